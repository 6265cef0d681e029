//! The conditioned radiance field: per-view MLP with depth-difference
//! conditioning, mean pooling across views, and the head MLP, all with
//! hand-rolled differentiation over one flat parameter vector.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::encoding::{
    self, EncoderConfig, PositionalEncodingConfig,
};
use crate::geometry::{project, CameraView, Vec3};
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("parameter vector length {got} does not match layout ({want})")]
    ShapeMismatch { got: usize, want: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Color plus optical density at one sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub density: f64,
}

impl RadianceSample {
    pub const EMPTY: Self = Self {
        color: [0.0; 3],
        density: 0.0,
    };
}

/// Architecture of the whole learnable pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub encoder: EncoderConfig,
    /// Padding (px) applied to source images before encoding.
    pub pad: usize,
    /// Hidden width of the per-view MLP; also its output width.
    pub f1_hidden: usize,
    /// Number of weight layers in the per-view MLP.
    pub f1_layers: usize,
    pub f2_hidden: usize,
    pub f2_layers: usize,
    pub x_encoding: PositionalEncodingConfig,
    pub dz_encoding: PositionalEncodingConfig,
    /// When false the depth-difference conditioning (encoding and validity
    /// bit) is fed as zeros; the parameter layout is unchanged.
    pub depth_conditioning: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::standard(32, 32),
            pad: encoding::DEFAULT_PAD,
            f1_hidden: 64,
            f1_layers: 3,
            f2_hidden: 64,
            f2_layers: 2,
            x_encoding: PositionalEncodingConfig::new(6, 1.0, true),
            dz_encoding: PositionalEncodingConfig::new(6, 1.0, true),
            depth_conditioning: true,
        }
    }
}

impl FieldConfig {
    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    /// Channels of the padded source image fed to the encoder.
    pub fn encoder_in_channels(&self) -> usize {
        3 + encoding::GAMMA_CHANNELS
    }

    pub fn dz_slice_dim(&self) -> usize {
        self.dz_encoding.output_dim(1) + 1 // encoding plus validity bit
    }

    pub fn f1_input_dim(&self) -> usize {
        self.x_encoding.output_dim(3) + 3 + self.feature_dim() + self.dz_slice_dim()
    }

    /// Offset of the sampled-feature slice inside the f1 input vector.
    pub fn omega_offset(&self) -> usize {
        self.x_encoding.output_dim(3) + 3
    }

    pub fn dz_offset(&self) -> usize {
        self.omega_offset() + self.feature_dim()
    }

    pub fn f1_shape(&self) -> MlpShape {
        let mut dims = vec![self.f1_input_dim()];
        dims.extend(std::iter::repeat(self.f1_hidden).take(self.f1_layers));
        MlpShape { dims }
    }

    pub fn f2_shape(&self) -> MlpShape {
        let mut dims = vec![self.f1_hidden];
        dims.extend(std::iter::repeat(self.f2_hidden).take(self.f2_layers));
        dims.push(4);
        MlpShape { dims }
    }
}

/// Dense MLP layout: tanh on every layer except the last, which is linear.
/// Per-layer parameters are row-major weights then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    pub dims: Vec<usize>,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// Parameter offset of the given weight layer.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn init_params(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for w in self.dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for _ in 0..n_in * n_out {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat(0.0).take(n_out));
        }
        params
    }
}

/// Post-activation values per layer, for the backward pass.
pub struct MlpTrace {
    pub activations: Vec<Vec<f64>>,
}

pub fn mlp_forward(shape: &MlpShape, params: &[f64], input: &[f64]) -> Vec<f64> {
    mlp_forward_traced(shape, params, input, false).0
}

pub fn mlp_forward_traced(
    shape: &MlpShape,
    params: &[f64],
    input: &[f64],
    keep_trace: bool,
) -> (Vec<f64>, Option<MlpTrace>) {
    debug_assert_eq!(params.len(), shape.param_count());
    debug_assert_eq!(input.len(), shape.dims[0]);
    let n_layers = shape.layer_count();
    let mut trace = keep_trace.then(|| MlpTrace {
        activations: Vec::with_capacity(n_layers),
    });
    let mut current = input.to_vec();
    let mut offset = 0;
    for (l, w) in shape.dims.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let mut next = bias.to_vec();
        for (o, nv) in next.iter_mut().enumerate() {
            let row = &weights[o * n_in..(o + 1) * n_in];
            let mut acc = *nv;
            for (wv, xv) in row.iter().zip(current.iter()) {
                acc += wv * xv;
            }
            *nv = acc;
        }
        if l + 1 < n_layers {
            for v in next.iter_mut() {
                *v = v.tanh();
            }
        }
        if let Some(t) = trace.as_mut() {
            t.activations.push(next.clone());
        }
        current = next;
        offset += n_in * n_out + n_out;
    }
    (current, trace)
}

/// Backpropagates `d_out` through the MLP. Parameter gradients accumulate
/// into `d_params`; returns the gradient with respect to the input.
pub fn mlp_backward(
    shape: &MlpShape,
    params: &[f64],
    input: &[f64],
    trace: &MlpTrace,
    d_out: &[f64],
    d_params: &mut [f64],
) -> Vec<f64> {
    debug_assert_eq!(d_params.len(), shape.param_count());
    let n_layers = shape.layer_count();
    let mut delta = d_out.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (shape.dims[l], shape.dims[l + 1]);
        let offset = shape.layer_offset(l);
        // Last layer is linear; hidden layers go through tanh.
        if l + 1 < n_layers {
            let post = &trace.activations[l];
            for (d, &a) in delta.iter_mut().zip(post.iter()) {
                *d *= 1.0 - a * a;
            }
        }
        let layer_input: &[f64] = if l == 0 {
            input
        } else {
            &trace.activations[l - 1]
        };
        let weights = &params[offset..offset + n_in * n_out];
        let (dw, db) = d_params[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        let mut d_in = vec![0.0; n_in];
        for (o, &g) in delta.iter().enumerate() {
            db[o] += g;
            let row = &weights[o * n_in..(o + 1) * n_in];
            let drow = &mut dw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                drow[i] += g * layer_input[i];
                d_in[i] += g * row[i];
            }
        }
        delta = d_in;
    }
    delta
}

/// Batched MLP working in feature-major layout: every matrix is
/// `[dim][n_samples]` with samples contiguous, so each inner loop is a
/// streaming mul-add over one row.
pub mod batch {
    use super::MlpShape;

    /// Per-layer post-activation matrices for one batched forward pass.
    /// Buffers are reused across calls.
    #[derive(Default)]
    pub struct BatchActs {
        pub layers: Vec<Vec<f64>>,
        pub n: usize,
    }

    // For buffers that are fully overwritten: only adjust the length.
    fn resize_any(buf: &mut Vec<f64>, len: usize) {
        if buf.len() != len {
            buf.resize(len, 0.0);
        }
    }

    // For accumulators: guarantee zeros.
    fn resize_zeroed(buf: &mut Vec<f64>, len: usize) {
        buf.clear();
        buf.resize(len, 0.0);
    }

    /// Sample-block width: blocks of every [dim][n] matrix stay L1-resident
    /// while a layer sweeps its weights.
    const BLOCK: usize = 256;

    /// tanh accurate to ~1e-15, built from a branch-free exp so the batched
    /// activation loops autovectorize (libm tanh does not).
    #[inline]
    pub fn fast_tanh(x: f64) -> f64 {
        const LOG2E: f64 = std::f64::consts::LOG2_E;
        const LN2_HI: f64 = 0.693_147_180_369_123_8;
        const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
        let y = 2.0 * x.abs().min(20.0);
        let nf = (y * LOG2E).round();
        let r = (y - nf * LN2_HI) - nf * LN2_LO;
        // Degree-13 Taylor of e^r on |r| <= ln2/2.
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (1.0 / 6.0
                        + r * (1.0 / 24.0
                            + r * (1.0 / 120.0
                                + r * (1.0 / 720.0
                                    + r * (1.0 / 5040.0
                                        + r * (1.0 / 40320.0
                                            + r * (1.0 / 362_880.0
                                                + r * (1.0 / 3_628_800.0
                                                    + r * (1.0 / 39_916_800.0
                                                        + r * (1.0 / 479_001_600.0
                                                            + r / 6_227_020_800.0))))))))))));
        let e2x = p * f64::from_bits(((nf as i64 + 1023) as u64) << 52);
        (1.0 - 2.0 / (e2x + 1.0)).copysign(x)
    }

    #[inline]
    pub fn tanh_slice(xs: &mut [f64]) {
        for v in xs.iter_mut() {
            *v = fast_tanh(*v);
        }
    }

    /// Forward: `x` is [dims[0]][n]. Leaves post-activations (tanh on all
    /// but the last layer) in `acts.layers[l]` as [dims[l+1]][n].
    pub fn forward(shape: &MlpShape, params: &[f64], x: &[f64], n: usize, acts: &mut BatchActs) {
        debug_assert_eq!(x.len(), shape.dims[0] * n);
        let n_layers = shape.layer_count();
        acts.layers.resize_with(n_layers, Vec::new);
        acts.n = n;
        for l in 0..n_layers {
            let (n_in, n_out) = (shape.dims[l], shape.dims[l + 1]);
            let offset = shape.layer_offset(l);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (done, rest) = acts.layers.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
            let out = &mut rest[0];
            resize_any(out, n_out * n);
            // Register tile: 2 output rows x 16 samples. Every input load
            // feeds two FMAs and the accumulators stay in registers.
            let pairs = n_out / 2;
            let chunks = n / TILE;
            for op in 0..pairs {
                let (o0, o1) = (2 * op, 2 * op + 1);
                let w0 = &weights[o0 * n_in..(o0 + 1) * n_in];
                let w1 = &weights[o1 * n_in..(o1 + 1) * n_in];
                for c in 0..chunks {
                    let c0 = c * TILE;
                    let mut acc0 = [bias[o0]; TILE];
                    let mut acc1 = [bias[o1]; TILE];
                    for f in 0..n_in {
                        let xa: &[f64; TILE] =
                            input[f * n + c0..f * n + c0 + TILE].try_into().expect("tile");
                        let (a, b) = (w0[f], w1[f]);
                        for i in 0..TILE {
                            acc0[i] += a * xa[i];
                            acc1[i] += b * xa[i];
                        }
                    }
                    out[o0 * n + c0..o0 * n + c0 + TILE].copy_from_slice(&acc0);
                    out[o1 * n + c0..o1 * n + c0 + TILE].copy_from_slice(&acc1);
                }
                for s in chunks * TILE..n {
                    let mut a0 = bias[o0];
                    let mut a1 = bias[o1];
                    for f in 0..n_in {
                        let xv = input[f * n + s];
                        a0 += w0[f] * xv;
                        a1 += w1[f] * xv;
                    }
                    out[o0 * n + s] = a0;
                    out[o1 * n + s] = a1;
                }
            }
            // Odd trailing row, streaming axpy.
            for o in 2 * pairs..n_out {
                let row_bias = bias[o];
                let mut b0 = 0usize;
                while b0 < n {
                    let b = BLOCK.min(n - b0);
                    let row = &mut out[o * n + b0..o * n + b0 + b];
                    row.fill(row_bias);
                    for f in 0..n_in {
                        let w = weights[o * n_in + f];
                        let xr = &input[f * n + b0..f * n + b0 + b];
                        for (r, &xv) in row.iter_mut().zip(xr) {
                            *r += xv * w;
                        }
                    }
                    b0 += b;
                }
            }
            if l + 1 < n_layers {
                tanh_slice(out);
            }
        }
    }

    /// Sample width of the register tile.
    const TILE: usize = 16;

    /// Backward: `delta` is d loss / d output, [dims.last()][n], consumed in
    /// place. Parameter gradients accumulate into `d_params`; d loss / d x
    /// lands in `d_x` ([dims[0]][n], overwritten).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        shape: &MlpShape,
        params: &[f64],
        x: &[f64],
        acts: &BatchActs,
        delta: &mut Vec<f64>,
        d_params: &mut [f64],
        d_x: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
    ) {
        let n = acts.n;
        let n_layers = shape.layer_count();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (shape.dims[l], shape.dims[l + 1]);
            let offset = shape.layer_offset(l);
            if l + 1 < n_layers {
                for (d, &a) in delta.iter_mut().zip(acts.layers[l].iter()) {
                    *d *= 1.0 - a * a;
                }
            }
            let input: &[f64] = if l == 0 { x } else { &acts.layers[l - 1] };
            let weights = &params[offset..offset + n_in * n_out];
            let (dw, db) =
                d_params[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            // dW[o][f] += delta_row(o) . input_row(f); db[o] += sum delta_row(o).
            let mut b0 = 0usize;
            while b0 < n {
                let b = BLOCK.min(n - b0);
                for o in 0..n_out {
                    let drow = &delta[o * n + b0..o * n + b0 + b];
                    db[o] += sum(drow);
                    for f in 0..n_in {
                        dw[o * n_in + f] += dot(drow, &input[f * n + b0..f * n + b0 + b]);
                    }
                }
                b0 += b;
            }
            // d input[f] = sum_o W[o][f] delta_row(o): the forward tile with
            // transposed weights and zero bias.
            let dest: &mut Vec<f64> = if l == 0 { d_x } else { scratch };
            resize_any(dest, n_in * n);
            let mut wt = vec![0.0; n_in * n_out];
            for o in 0..n_out {
                for f in 0..n_in {
                    wt[f * n_out + o] = weights[o * n_in + f];
                }
            }
            let pairs = n_in / 2;
            let chunks = n / TILE;
            for fp in 0..pairs {
                let (f0, f1) = (2 * fp, 2 * fp + 1);
                let w0 = &wt[f0 * n_out..(f0 + 1) * n_out];
                let w1 = &wt[f1 * n_out..(f1 + 1) * n_out];
                for c in 0..chunks {
                    let c0 = c * TILE;
                    let mut acc0 = [0.0f64; TILE];
                    let mut acc1 = [0.0f64; TILE];
                    for o in 0..n_out {
                        let ga: &[f64; TILE] =
                            delta[o * n + c0..o * n + c0 + TILE].try_into().expect("tile");
                        let (a, b) = (w0[o], w1[o]);
                        for i in 0..TILE {
                            acc0[i] += a * ga[i];
                            acc1[i] += b * ga[i];
                        }
                    }
                    dest[f0 * n + c0..f0 * n + c0 + TILE].copy_from_slice(&acc0);
                    dest[f1 * n + c0..f1 * n + c0 + TILE].copy_from_slice(&acc1);
                }
                for s in chunks * TILE..n {
                    let mut a0 = 0.0;
                    let mut a1 = 0.0;
                    for o in 0..n_out {
                        let g = delta[o * n + s];
                        a0 += w0[o] * g;
                        a1 += w1[o] * g;
                    }
                    dest[f0 * n + s] = a0;
                    dest[f1 * n + s] = a1;
                }
            }
            for f in 2 * pairs..n_in {
                let wrow = &wt[f * n_out..(f + 1) * n_out];
                for s in 0..n {
                    let mut a = 0.0;
                    for o in 0..n_out {
                        a += wrow[o] * delta[o * n + s];
                    }
                    dest[f * n + s] = a;
                }
            }
            if l > 0 {
                std::mem::swap(delta, scratch);
            }
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; 4];
        let ca = a.chunks_exact(4);
        let cb = b.chunks_exact(4);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (xa, xb) in ca.zip(cb) {
            for i in 0..4 {
                acc[i] += xa[i] * xb[i];
            }
        }
        let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (xa, xb) in ra.iter().zip(rb) {
            total += xa * xb;
        }
        total
    }

    #[inline]
    pub fn sum(a: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let ch = a.chunks_exact(4);
        let rem = ch.remainder();
        for x in ch {
            for i in 0..4 {
                acc[i] += x[i];
            }
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + rem.iter().sum::<f64>()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Turns the 4 raw head outputs into a range-enforced radiance sample.
#[inline]
pub fn apply_heads(raw: &[f64]) -> RadianceSample {
    RadianceSample {
        color: [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])],
        density: softplus(raw[3]),
    }
}

/// d raw / d (color, density) chain for the heads.
#[inline]
pub fn heads_backward(raw: &[f64], d_color: &[f64; 3], d_density: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for c in 0..3 {
        let s = sigmoid(raw[c]);
        out[c] = d_color[c] * s * (1.0 - s);
    }
    out[3] = d_density * sigmoid(raw[3]);
    out
}

/// All learnable parameters as one flat vector with named slices.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub data: Vec<f64>,
    pub encoder: std::ops::Range<usize>,
    pub f1: std::ops::Range<usize>,
    pub f2: std::ops::Range<usize>,
}

impl FieldParams {
    pub fn layout(cfg: &FieldConfig) -> (usize, usize, usize) {
        let enc = cfg.encoder.param_count(cfg.encoder_in_channels());
        let f1 = cfg.f1_shape().param_count();
        let f2 = cfg.f2_shape().param_count();
        (enc, f1, f2)
    }

    pub fn init(cfg: &FieldConfig, seed: u64) -> Self {
        let (n_enc, n_f1, n_f2) = Self::layout(cfg);
        let mut data = cfg.encoder.init_params(cfg.encoder_in_channels(), seed);
        debug_assert_eq!(data.len(), n_enc);
        let mut rng = crate::rng::stream(seed, crate::rng::tag::INIT, 0xF1F2);
        data.extend(cfg.f1_shape().init_params(&mut rng));
        data.extend(cfg.f2_shape().init_params(&mut rng));
        Self {
            data,
            encoder: 0..n_enc,
            f1: n_enc..n_enc + n_f1,
            f2: n_enc + n_f1..n_enc + n_f1 + n_f2,
        }
    }

    pub fn zeros_like(cfg: &FieldConfig) -> Self {
        let (n_enc, n_f1, n_f2) = Self::layout(cfg);
        Self {
            data: vec![0.0; n_enc + n_f1 + n_f2],
            encoder: 0..n_enc,
            f1: n_enc..n_enc + n_f1,
            f2: n_enc + n_f1..n_enc + n_f1 + n_f2,
        }
    }

    pub fn matches(&self, cfg: &FieldConfig) -> bool {
        let (n_enc, n_f1, n_f2) = Self::layout(cfg);
        self.encoder.len() == n_enc
            && self.f1.len() == n_f1
            && self.f2.len() == n_f2
            && self.data.len() == n_enc + n_f1 + n_f2
    }

    pub fn encoder_slice(&self) -> &[f64] {
        &self.data[self.encoder.clone()]
    }

    pub fn f1_slice(&self) -> &[f64] {
        &self.data[self.f1.clone()]
    }

    pub fn f2_slice(&self) -> &[f64] {
        &self.data[self.f2.clone()]
    }

    /// Writes the checkpoint: magic, version, slice table, then the flat
    /// little-endian f64 array. Round trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"DINR")?;
        f.write_all(&1u32.to_le_bytes())?;
        let table: [(&str, &std::ops::Range<usize>); 3] = [
            ("encoder", &self.encoder),
            ("f1", &self.f1),
            ("f2", &self.f2),
        ];
        f.write_all(&(table.len() as u32).to_le_bytes())?;
        for (name, range) in table {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(range.start as u64).to_le_bytes())?;
            f.write_all(&(range.len() as u64).to_le_bytes())?;
        }
        f.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"DINR" {
            return Err(FieldError::Format(format!(
                "bad magic {:?}, expected DINR",
                magic
            )));
        }
        let version = read_u32(&mut f)?;
        if version != 1 {
            return Err(FieldError::Format(format!("unsupported version {version}")));
        }
        let n_slices = read_u32(&mut f)? as usize;
        let mut slices = Vec::with_capacity(n_slices);
        for _ in 0..n_slices {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| FieldError::Format(format!("slice name not utf8: {e}")))?;
            let offset = read_u64(&mut f)? as usize;
            let len = read_u64(&mut f)? as usize;
            slices.push((name, offset..offset + len));
        }
        let total = read_u64(&mut f)? as usize;
        let mut data = vec![0.0f64; total];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let find = |name: &str| -> Result<std::ops::Range<usize>, FieldError> {
            slices
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, r)| r.clone())
                .ok_or_else(|| FieldError::Format(format!("missing slice {name}")))
        };
        let encoder = find("encoder")?;
        let f1 = find("f1")?;
        let f2 = find("f2")?;
        if f2.end != total || encoder.start != 0 || encoder.end != f1.start || f1.end != f2.start {
            return Err(FieldError::Format(
                "slice table does not partition the parameter vector".into(),
            ));
        }
        Ok(Self {
            data,
            encoder,
            f1,
            f2,
        })
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32, FieldError> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> Result<u64, FieldError> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Signed distance between the view's estimated surface and the camera-space
/// depth of `x`: positive in front of the surface. `None` when `x` projects
/// outside the depth map (or onto invalid depth).
pub fn delta_z(x: &Vec3, view: &CameraView) -> Option<f64> {
    let x_cam = view.pose.world_to_camera(x);
    let (u, v, z) = project(&x_cam, &view.pose.intrinsics).ok()?;
    view.depth.sample(u, v).map(|d| d - z)
}

/// Bilinear feature-gather footprint into a view's padded feature map.
/// Zero weights mean the point did not project (behind the camera).
#[derive(Debug, Clone, Copy)]
pub struct OmegaGather {
    /// Flat texel indices (y * width + x) into the padded canvas.
    pub texels: [u32; 4],
    pub weights: [f64; 4],
}

impl OmegaGather {
    pub const MISS: Self = Self {
        texels: [0; 4],
        weights: [0.0; 4],
    };
}

/// Everything of the f1 input that does not depend on learnable parameters:
/// [pe(x_cam) | d_cam | 0 (omega slot) | pe(dz) * valid | valid], plus the
/// feature-gather footprint for the omega slot.
pub fn f1_input_template(
    cfg: &FieldConfig,
    view: &CameraView,
    x: &Vec3,
    d: &Vec3,
) -> (Vec<f64>, OmegaGather) {
    let mut input = vec![0.0; cfg.f1_input_dim()];
    let x_cam = view.pose.world_to_camera(x);
    let d_cam = view.pose.direction_to_camera(d);
    let xe_dim = cfg.x_encoding.output_dim(3);
    encoding::positional_encode_into(x_cam.as_slice(), &cfg.x_encoding, &mut input[..xe_dim]);
    input[xe_dim..xe_dim + 3].copy_from_slice(d_cam.as_slice());

    let encoded = view
        .encoded
        .as_ref()
        .expect("view must be encoded before field evaluation");
    let gather = match project(&x_cam, &view.pose.intrinsics) {
        Ok((u, v, _z)) => {
            let (cu, cv) = encoded.to_canvas(u, v);
            let fp = encoded.data.bilinear_footprint(cu, cv);
            let w = encoded.data.width() as u32;
            OmegaGather {
                texels: [
                    fp.texels[0].0 as u32 * w + fp.texels[0].1 as u32,
                    fp.texels[1].0 as u32 * w + fp.texels[1].1 as u32,
                    fp.texels[2].0 as u32 * w + fp.texels[2].1 as u32,
                    fp.texels[3].0 as u32 * w + fp.texels[3].1 as u32,
                ],
                weights: fp.weights,
            }
        }
        Err(_) => OmegaGather::MISS,
    };

    if cfg.depth_conditioning {
        if let Some(dz) = delta_z(x, view) {
            let dz_off = cfg.dz_offset();
            let dz_dim = cfg.dz_encoding.output_dim(1);
            encoding::positional_encode_into(
                &[dz],
                &cfg.dz_encoding,
                &mut input[dz_off..dz_off + dz_dim],
            );
            input[dz_off + dz_dim] = 1.0;
        }
    }
    (input, gather)
}

/// Fills the omega slot of an f1 input from a feature map.
#[inline]
pub fn fill_omega(input: &mut [f64], gather: &OmegaGather, features: &Grid, cfg: &FieldConfig) {
    let f_dim = cfg.feature_dim();
    let omega = &mut input[cfg.omega_offset()..cfg.omega_offset() + f_dim];
    omega.fill(0.0);
    let data = features.data();
    for (w, &texel) in gather.weights.iter().zip(gather.texels.iter()) {
        if *w == 0.0 {
            continue;
        }
        let base = texel as usize * f_dim;
        for (o, &v) in omega.iter_mut().zip(&data[base..base + f_dim]) {
            *o += w * v;
        }
    }
}

/// Assembles the complete f1 input for one source view:
/// [pe(x_cam) | d_cam | omega | pe(dz) * valid | valid].
pub fn build_f1_input(cfg: &FieldConfig, view: &CameraView, x: &Vec3, d: &Vec3) -> Vec<f64> {
    let (mut input, gather) = f1_input_template(cfg, view, x, d);
    let features = view
        .features
        .as_ref()
        .expect("view features must be prepared before field evaluation");
    fill_omega(&mut input, &gather, features, cfg);
    input
}

/// Per-view MLP producing the intermediate feature vector V.
pub fn f1_forward(cfg: &FieldConfig, f1_params: &[f64], input: &[f64]) -> Result<Vec<f64>, FieldError> {
    let shape = cfg.f1_shape();
    if f1_params.len() != shape.param_count() {
        return Err(FieldError::ShapeMismatch {
            got: f1_params.len(),
            want: shape.param_count(),
        });
    }
    Ok(mlp_forward(&shape, f1_params, input))
}

/// Head MLP over the average-pooled per-view features.
pub fn f2_forward(cfg: &FieldConfig, f2_params: &[f64], v_set: &[Vec<f64>]) -> Result<RadianceSample, FieldError> {
    assert!(!v_set.is_empty(), "f2 needs at least one view feature");
    let shape = cfg.f2_shape();
    if f2_params.len() != shape.param_count() {
        return Err(FieldError::ShapeMismatch {
            got: f2_params.len(),
            want: shape.param_count(),
        });
    }
    let dim = v_set[0].len();
    let mut mean = vec![0.0; dim];
    for v in v_set {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / v_set.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let raw = mlp_forward(&shape, f2_params, &mean);
    Ok(apply_heads(&raw))
}

/// Full conditioned evaluation at a world point and direction.
///
/// Views must carry encoded images and feature maps.
pub fn field_eval(
    cfg: &FieldConfig,
    params: &FieldParams,
    views: &[CameraView],
    x: &Vec3,
    d: &Vec3,
) -> Result<RadianceSample, FieldError> {
    let mut v_set = Vec::with_capacity(views.len());
    for view in views {
        let input = build_f1_input(cfg, view, x, d);
        v_set.push(f1_forward(cfg, params.f1_slice(), &input)?);
    }
    f2_forward(cfg, params.f2_slice(), &v_set)
}
