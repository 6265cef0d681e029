//! Positional encodings, padded + encoded source images, and the learnable
//! convolutional feature encoder.
//!
//! Source images are border-padded and augmented with positional-encoding
//! channels before feature extraction, so the encoder can emit distinctive
//! features outside the original image footprint instead of smearing a
//! constant border color.

use thiserror::Error;

use crate::geometry::CameraView;
use crate::grid::Grid;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("parameter count {got} does not match encoder layout ({want})")]
    ShapeMismatch { got: usize, want: usize },
}

/// Exponential-frequency sin/cos encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncodingConfig {
    pub num_frequencies: usize,
    /// Cycles per input unit for the lowest band; band j uses base * 2^j.
    pub base_frequency: f64,
    pub include_input: bool,
}

impl PositionalEncodingConfig {
    pub fn new(num_frequencies: usize, base_frequency: f64, include_input: bool) -> Self {
        Self {
            num_frequencies,
            base_frequency,
            include_input,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * usize::from(self.include_input) + input_dim * 2 * self.num_frequencies
    }
}

/// Encodes `x` as [x..., sin(2 pi f_j x_d), cos(2 pi f_j x_d), ...] with the
/// frequency index innermost, dimension index outer.
pub fn positional_encode(x: &[f64], cfg: &PositionalEncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.output_dim(x.len())];
    positional_encode_into(x, cfg, &mut out);
    out
}

pub fn positional_encode_into(x: &[f64], cfg: &PositionalEncodingConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.output_dim(x.len()));
    let mut i = 0;
    if cfg.include_input {
        out[..x.len()].copy_from_slice(x);
        i = x.len();
    }
    for &xd in x {
        let mut freq = cfg.base_frequency;
        for _ in 0..cfg.num_frequencies {
            let phase = std::f64::consts::TAU * freq * xd;
            out[i] = phase.sin();
            out[i + 1] = phase.cos();
            i += 2;
            freq *= 2.0;
        }
    }
}

/// Derivative of the scalar encoding with respect to its input.
pub fn positional_encode_scalar_deriv(x: f64, cfg: &PositionalEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim(1));
    if cfg.include_input {
        out.push(1.0);
    }
    let mut freq = cfg.base_frequency;
    for _ in 0..cfg.num_frequencies {
        let w = std::f64::consts::TAU * freq;
        let phase = w * x;
        out.push(w * phase.cos());
        out.push(-w * phase.sin());
        freq *= 2.0;
    }
    out
}

/// Encoding applied to padded pixel coordinates: raw uv plus 4 exponential
/// frequency bands starting at 0.5, for 18 channels total over (u, v).
pub fn gamma_encoding() -> PositionalEncodingConfig {
    PositionalEncodingConfig::new(4, 0.5, true)
}

/// Number of positional-encoding channels added to padded source images.
pub const GAMMA_CHANNELS: usize = 18;

/// A source image after border padding and positional-encoding channels.
#[derive(Debug, Clone)]
pub struct EncodedSourceImage {
    /// (H + 2 pad) x (W + 2 pad) x (3 + GAMMA_CHANNELS).
    pub data: Grid,
    pub pad: usize,
}

impl EncodedSourceImage {
    /// Maps original-image pixel coordinates to padded-canvas coordinates.
    #[inline]
    pub fn to_canvas(&self, u: f64, v: f64) -> (f64, f64) {
        (u + self.pad as f64, v + self.pad as f64)
    }
}

/// Border-replicates the RGB image into a canvas grown by `pad` on each side
/// and appends positional encodings of the canvas-normalized uv coordinates;
/// the encoding channels are exactly zero inside the original footprint.
pub fn pad_and_encode(
    image: &Grid,
    pad: usize,
    cfg: &PositionalEncodingConfig,
) -> EncodedSourceImage {
    assert_eq!(image.channels(), 3);
    let gamma_dim = cfg.output_dim(2);
    let (h, w) = (image.height(), image.width());
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut data = Grid::zeros(hp, wp, 3 + gamma_dim);
    let mut gamma = vec![0.0; gamma_dim];
    for y in 0..hp {
        for x in 0..wp {
            let sy = y.saturating_sub(pad).min(h - 1);
            let sx = x.saturating_sub(pad).min(w - 1);
            let inside = y >= pad && y < pad + h && x >= pad && x < pad + w;
            let src = image.texel(sy, sx);
            let out = data.texel_mut(y, x);
            out[..3].copy_from_slice(src);
            if !inside {
                // uv normalized to [-1, +1] across the padded canvas.
                let un = if wp > 1 {
                    2.0 * x as f64 / (wp - 1) as f64 - 1.0
                } else {
                    0.0
                };
                let vn = if hp > 1 {
                    2.0 * y as f64 / (hp - 1) as f64 - 1.0
                } else {
                    0.0
                };
                positional_encode_into(&[un, vn], cfg, &mut gamma);
                out[3..].copy_from_slice(&gamma);
            }
        }
    }
    EncodedSourceImage { data, pad }
}

/// One convolutional layer: `kernel` x `kernel`, stride 1, zero padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub tanh: bool,
}

/// Feature encoder layout. The default is three 3x3 layers with a tanh
/// between them and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<ConvSpec>,
}

impl EncoderConfig {
    pub fn standard(hidden: usize, feature_dim: usize) -> Self {
        Self {
            layers: vec![
                ConvSpec {
                    out_channels: hidden,
                    kernel: 3,
                    tanh: true,
                },
                ConvSpec {
                    out_channels: hidden,
                    kernel: 3,
                    tanh: true,
                },
                ConvSpec {
                    out_channels: feature_dim,
                    kernel: 3,
                    tanh: false,
                },
            ],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty encoder").out_channels
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        let mut c_in = in_channels;
        let mut total = 0;
        for spec in &self.layers {
            total += spec.out_channels * c_in * spec.kernel * spec.kernel + spec.out_channels;
            c_in = spec.out_channels;
        }
        total
    }

    /// Fan-in scaled uniform init; biases start at zero.
    pub fn init_params(&self, in_channels: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = rng::stream(seed, rng::tag::INIT, 0xE0C0);
        let mut params = Vec::with_capacity(self.param_count(in_channels));
        let mut c_in = in_channels;
        for spec in &self.layers {
            let fan_in = (c_in * spec.kernel * spec.kernel) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let n_w = spec.out_channels * c_in * spec.kernel * spec.kernel;
            for _ in 0..n_w {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat(0.0).take(spec.out_channels));
            c_in = spec.out_channels;
        }
        params
    }
}

// Repacks [o][i][ky][kx] weights into tap-major [ky][kx][i][o] so the inner
// convolution loop runs contiguously over output channels.
fn repack_weights(weights: &[f64], c_in: usize, c_out: usize, k: usize) -> Vec<f64> {
    let mut packed = vec![0.0; c_out * c_in * k * k];
    for o in 0..c_out {
        for i in 0..c_in {
            for t in 0..k * k {
                packed[(t * c_in + i) * c_out + o] = weights[(o * c_in + i) * k * k + t];
            }
        }
    }
    packed
}

fn conv_forward(input: &Grid, weights: &[f64], spec: &ConvSpec) -> Grid {
    let (h, w, c_in) = (input.height(), input.width(), input.channels());
    let k = spec.kernel;
    let r = k / 2;
    let c_out = spec.out_channels;
    debug_assert_eq!(weights.len(), c_out * c_in * k * k + c_out);
    let bias = &weights[c_out * c_in * k * k..];
    let packed = repack_weights(weights, c_in, c_out, k);
    let mut out = Grid::zeros(h, w, c_out);
    for y in 0..h {
        for x in 0..w {
            let o_texel = out.texel_mut(y, x);
            o_texel.copy_from_slice(bias);
            for dy in 0..k {
                let sy = y as isize + dy as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - r as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let texel = input.texel(sy as usize, sx as usize);
                    let tap = &packed[(dy * k + dx) * c_in * c_out..];
                    for (i, &v) in texel.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &tap[i * c_out..(i + 1) * c_out];
                        for (acc, &wv) in o_texel.iter_mut().zip(wrow) {
                            *acc += v * wv;
                        }
                    }
                }
            }
            if spec.tanh {
                crate::field::batch::tanh_slice(o_texel);
            }
        }
    }
    out
}

/// Post-activation outputs of every layer, kept for the backward pass.
pub struct EncoderTrace {
    pub activations: Vec<Grid>,
}

fn layer_param_len(c_in: usize, spec: &ConvSpec) -> usize {
    spec.out_channels * c_in * spec.kernel * spec.kernel + spec.out_channels
}

/// Deterministic, differentiable feature extraction over the padded canvas;
/// same spatial resolution as the input.
pub fn encode_features(
    src: &EncodedSourceImage,
    cfg: &EncoderConfig,
    params: &[f64],
) -> Result<Grid, EncodingError> {
    Ok(encode_features_traced(src, cfg, params)?.0)
}

pub fn encode_features_traced(
    src: &EncodedSourceImage,
    cfg: &EncoderConfig,
    params: &[f64],
) -> Result<(Grid, EncoderTrace), EncodingError> {
    let want = cfg.param_count(src.data.channels());
    if params.len() != want {
        return Err(EncodingError::ShapeMismatch {
            got: params.len(),
            want,
        });
    }
    let mut activations: Vec<Grid> = Vec::with_capacity(cfg.layers.len());
    let mut offset = 0;
    let mut c_in = src.data.channels();
    for spec in &cfg.layers {
        let len = layer_param_len(c_in, spec);
        let input = activations.last().unwrap_or(&src.data);
        let out = conv_forward(input, &params[offset..offset + len], spec);
        activations.push(out);
        offset += len;
        c_in = spec.out_channels;
    }
    let output = activations.last().expect("non-empty encoder").clone();
    Ok((output, EncoderTrace { activations }))
}

/// Accumulates encoder parameter gradients for an upstream feature-map
/// gradient. `d_output` must match the forward output shape.
pub fn encode_features_backward(
    src: &EncodedSourceImage,
    cfg: &EncoderConfig,
    params: &[f64],
    trace: &EncoderTrace,
    d_output: &Grid,
    d_params: &mut [f64],
) {
    debug_assert_eq!(d_params.len(), params.len());
    let n_layers = cfg.layers.len();
    let mut d_out = d_output.clone();
    // Walk layers top-down.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut c_in = src.data.channels();
    let mut off = 0;
    for spec in &cfg.layers {
        offsets.push((off, c_in));
        off += layer_param_len(c_in, spec);
        c_in = spec.out_channels;
    }
    for l in (0..n_layers).rev() {
        let spec = &cfg.layers[l];
        let (offset, c_in) = offsets[l];
        let len = layer_param_len(c_in, spec);
        let input = if l == 0 {
            &src.data
        } else {
            &trace.activations[l - 1]
        };
        let post = &trace.activations[l];
        // Through the activation: d pre = d post * (1 - tanh^2).
        if spec.tanh {
            for (dv, &a) in d_out.data_mut().iter_mut().zip(post.data().iter()) {
                *dv *= 1.0 - a * a;
            }
        }
        let w_layer = &params[offset..offset + len];
        let d_layer = &mut d_params[offset..offset + len];
        let d_in = conv_backward(input, w_layer, spec, &d_out, d_layer, l > 0);
        if let Some(d_in) = d_in {
            d_out = d_in;
        }
    }
}

fn conv_backward(
    input: &Grid,
    weights: &[f64],
    spec: &ConvSpec,
    d_out: &Grid,
    d_params: &mut [f64],
    need_d_input: bool,
) -> Option<Grid> {
    let (h, w, c_in) = (input.height(), input.width(), input.channels());
    let k = spec.kernel;
    let r = k / 2;
    let c_out = spec.out_channels;
    let w_count = c_out * c_in * k * k;
    let packed = repack_weights(weights, c_in, c_out, k);
    let mut packed_dw = vec![0.0; w_count];
    let mut d_input = need_d_input.then(|| Grid::zeros(h, w, c_in));
    for y in 0..h {
        for x in 0..w {
            let g = d_out.texel(y, x);
            for dy in 0..k {
                let sy = y as isize + dy as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - r as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let texel = input.texel(sy as usize, sx as usize);
                    let tap = (dy * k + dx) * c_in;
                    let dtap = &mut packed_dw[tap * c_out..(tap + c_in) * c_out];
                    for (i, &v) in texel.iter().enumerate() {
                        if v != 0.0 {
                            let drow = &mut dtap[i * c_out..(i + 1) * c_out];
                            for (dwv, &go) in drow.iter_mut().zip(g) {
                                *dwv += v * go;
                            }
                        }
                    }
                    if let Some(di) = d_input.as_mut() {
                        let dt = di.texel_mut(sy as usize, sx as usize);
                        let wtap = &packed[tap * c_out..(tap + c_in) * c_out];
                        for (i, dv) in dt.iter_mut().enumerate() {
                            *dv += crate::field::batch::dot(&wtap[i * c_out..(i + 1) * c_out], g);
                        }
                    }
                }
            }
            for (o, &go) in g.iter().enumerate() {
                d_params[w_count + o] += go;
            }
        }
    }
    // Unpack accumulated weight grads back into [o][i][ky][kx] layout.
    for o in 0..c_out {
        for i in 0..c_in {
            for t in 0..k * k {
                d_params[(o * c_in + i) * k * k + t] += packed_dw[(t * c_in + i) * c_out + o];
            }
        }
    }
    d_input
}

/// Default padding (px) applied to source images before encoding.
pub const DEFAULT_PAD: usize = 64;

/// Fills `view.encoded` from the view's image.
pub fn encode_view(view: &mut CameraView, pad: usize) {
    view.encoded = Some(pad_and_encode(&view.image, pad, &gamma_encoding()));
}

/// Fills `view.features` by running the encoder over the encoded image.
pub fn refresh_view_features(
    view: &mut CameraView,
    cfg: &EncoderConfig,
    params: &[f64],
) -> Result<(), EncodingError> {
    let encoded = view
        .encoded
        .as_ref()
        .expect("encode_view must run before refresh_view_features");
    view.features = Some(encode_features(encoded, cfg, params)?);
    Ok(())
}
