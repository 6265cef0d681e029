//! Patch-based training of the conditioned field.
//!
//! Source depth maps are fixed during a run, so every quantity that does not
//! depend on learnable parameters is precomputed per training view: sample
//! positions along each pixel ray, the parameter-free part of every f1
//! input, and the bilinear footprints used to gather (and back-scatter)
//! encoder features. All batched matrices are feature-major
//! ([dim][n_samples], samples contiguous) so the MLP kernels stream.

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::encoding::{self, EncoderTrace};
use crate::field::{
    self,
    batch::{self, BatchActs},
    f1_input_template, sigmoid, softplus, FieldConfig, FieldError, FieldParams, OmegaGather,
};
use crate::geometry::{CameraPose, CameraView};
use crate::grid::Grid;
use crate::harness::adam::Adam;
use crate::harness::scene_gen::{build_source_view, render_target_image, GeneratedScene};
use crate::objective::{metrics, total_loss, Metrics, ObjectiveConfig, VggHook};
use crate::rendering::{
    render_image, ConditionedField, DepthGuidedSampler, RenderOptions, MAX_OPTICAL_DEPTH,
};
use crate::rng::{self, tag};
use crate::sampling::{depth_guided_samples, SamplingConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at iteration {iter}; aborted with last good checkpoint")]
    DivergenceDetected { iter: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Gaussian noise std (m) applied to the ground-truth source depth.
    pub noise_std: f64,
    pub sampling: SamplingConfig,
    pub objective: ObjectiveConfig,
    /// Held-out evaluation cadence in iterations (0: evaluate only at the end).
    pub metrics_every: usize,
    pub run_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            learning_rate: 1e-4,
            batch_size: 4,
            patch_size: 64,
            seed: 1,
            noise_std: 0.0,
            sampling: SamplingConfig::default(),
            objective: ObjectiveConfig::default(),
            metrics_every: 0,
            run_id: "train".into(),
        }
    }
}

/// Stable per-purpose view ids for random streams.
pub fn source_view_id(i: usize) -> u64 {
    i as u64
}
pub fn train_view_id(i: usize) -> u64 {
    1000 + i as u64
}
pub fn heldout_view_id(i: usize) -> u64 {
    2000 + i as u64
}

/// Scene-derived, parameter-independent training inputs.
pub struct TrainSetup {
    pub gen: GeneratedScene,
    /// Prepared source views: noisy depth, normals, encoded images.
    pub sources: Vec<CameraView>,
    pub train_poses: Vec<CameraPose>,
    pub train_images: Vec<Grid>,
    pub heldout_poses: Vec<CameraPose>,
    pub heldout_images: Vec<Grid>,
}

impl TrainSetup {
    /// Renders source views (with depth noise) and target ground truth.
    pub fn prepare(gen: GeneratedScene, pad: usize, noise_std: f64, seed: u64) -> Self {
        let sources: Vec<CameraView> = gen
            .sources
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut v = build_source_view(&gen, pose, source_view_id(i), noise_std, seed);
                encoding::encode_view(&mut v, pad);
                v
            })
            .collect();
        let train_poses = gen.train_targets.clone();
        let train_images: Vec<Grid> = train_poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_target_image(&gen, p, train_view_id(i), seed))
            .collect();
        let heldout_poses = gen.heldout_targets.clone();
        let heldout_images: Vec<Grid> = heldout_poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_target_image(&gen, p, heldout_view_id(i), seed))
            .collect();
        Self {
            gen,
            sources,
            train_poses,
            train_images,
            heldout_poses,
            heldout_images,
        }
    }
}

/// Cached per-pixel sample data for one training view. Templates are stored
/// feature-major per source view: `templates[(src * in_dim + f) * n + s]`.
pub struct ViewSampleTable {
    /// Per-pixel range into the flat sample arrays (len = H*W + 1).
    pub offsets: Vec<u32>,
    pub ts: Vec<f64>,
    pub deltas: Vec<f64>,
    pub templates: Vec<f64>,
    /// Feature gathers, `gathers[src * n + s]`.
    pub gathers: Vec<OmegaGather>,
    pub n_src: usize,
    pub in_dim: usize,
}

/// Builds the cached tables; sample positions use exactly the same per-ray
/// streams as the renderer, so cached and fresh sampling agree bit for bit.
pub fn build_sample_tables(
    setup: &TrainSetup,
    cfg: &FieldConfig,
    sampling: &SamplingConfig,
    seed: u64,
) -> Vec<ViewSampleTable> {
    let n_src = setup.sources.len();
    let in_dim = cfg.f1_input_dim();
    setup
        .train_poses
        .iter()
        .enumerate()
        .map(|(v, pose)| {
            let (h, w) = (pose.height, pose.width);
            let mut offsets = Vec::with_capacity(h * w + 1);
            let mut ts = Vec::new();
            let mut deltas = Vec::new();
            // Row-major per-sample staging; transposed once below.
            let mut staged: Vec<f64> = Vec::new();
            let mut staged_gathers: Vec<OmegaGather> = Vec::new();
            offsets.push(0u32);
            for y in 0..h {
                for x in 0..w {
                    let ray = pose.generate_ray(
                        (x as f64, y as f64),
                        setup.gen.t_near,
                        setup.gen.t_far,
                    );
                    let ray_id = (y * w + x) as u64;
                    let mut stream =
                        rng::ray_stream(seed, train_view_id(v), ray_id, tag::CANDIDATE_JITTER);
                    let set = depth_guided_samples(&ray, &setup.sources, sampling, &mut stream);
                    for (&t, &delta) in set.ts.iter().zip(set.deltas.iter()) {
                        let xw = ray.at(t);
                        ts.push(t);
                        deltas.push(delta);
                        for view in &setup.sources {
                            let (tmpl, gather) = f1_input_template(cfg, view, &xw, &ray.direction);
                            debug_assert_eq!(tmpl.len(), in_dim);
                            staged.extend_from_slice(&tmpl);
                            staged_gathers.push(gather);
                        }
                    }
                    offsets.push(ts.len() as u32);
                }
            }
            let n = ts.len();
            let mut templates = vec![0.0; n_src * in_dim * n];
            let mut gathers = vec![OmegaGather::MISS; n_src * n];
            for s in 0..n {
                for i in 0..n_src {
                    let src_row = &staged[(s * n_src + i) * in_dim..(s * n_src + i + 1) * in_dim];
                    for (f, &val) in src_row.iter().enumerate() {
                        templates[(i * in_dim + f) * n + s] = val;
                    }
                    gathers[i * n + s] = staged_gathers[s * n_src + i];
                }
            }
            ViewSampleTable {
                offsets,
                ts,
                deltas,
                templates,
                gathers,
                n_src,
                in_dim,
            }
        })
        .collect()
}

/// One patch selection: which training view and which crop origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPick {
    pub view: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Draws the batch's patch picks for one iteration.
pub fn pick_patches(
    setup: &TrainSetup,
    patch: usize,
    batch: usize,
    seed: u64,
    iter: u64,
) -> Vec<PatchPick> {
    let mut rng = rng::stream(seed, tag::TRAIN, iter);
    (0..batch)
        .map(|_| {
            let view = rng.gen_range(0..setup.train_poses.len());
            let pose = &setup.train_poses[view];
            let y0 = if pose.height > patch {
                rng.gen_range(0..=pose.height - patch)
            } else {
                0
            };
            let x0 = if pose.width > patch {
                rng.gen_range(0..=pose.width - patch)
            } else {
                0
            };
            PatchPick { view, y0, x0 }
        })
        .collect()
}


/// Reusable buffers for the batched passes.
#[derive(Default)]
pub struct TrainScratch {
    inputs: Vec<Vec<f64>>,
    f1_acts: Vec<BatchActs>,
    vmean: Vec<f64>,
    f2_acts: BatchActs,
    d_raw: Vec<f64>,
    d_vmean: Vec<f64>,
    d_f1_out: Vec<f64>,
    d_input: Vec<f64>,
    mlp_scratch: Vec<f64>,
    flat_deltas: Vec<f64>,
    weights: Vec<f64>,
    trans_final: Vec<f64>,
    pixel_counts: Vec<u32>,
}

/// Reusable training state: setup + cached tables + config.
pub struct TrainContext<'a> {
    pub setup: &'a TrainSetup,
    pub cfg: &'a FieldConfig,
    pub tables: &'a [ViewSampleTable],
    pub objective: ObjectiveConfig,
    pub background: [f64; 3],
    pub vgg: Option<&'a dyn VggHook>,
}

struct EncoderPass {
    features: Vec<Grid>,
    traces: Vec<EncoderTrace>,
}

impl TrainContext<'_> {
    fn encoder_pass(&self, params: &FieldParams) -> Result<EncoderPass, FieldError> {
        let mut features = Vec::with_capacity(self.setup.sources.len());
        let mut traces = Vec::with_capacity(self.setup.sources.len());
        for view in &self.setup.sources {
            let encoded = view.encoded.as_ref().expect("sources encoded in prepare");
            let (fmap, trace) =
                encoding::encode_features_traced(encoded, &self.cfg.encoder, params.encoder_slice())
                    .map_err(shape_err)?;
            features.push(fmap);
            traces.push(trace);
        }
        Ok(EncoderPass { features, traces })
    }

    /// Mean loss over the batch, forward only.
    pub fn batch_loss(
        &self,
        params: &FieldParams,
        picks: &[PatchPick],
        scratch: &mut TrainScratch,
    ) -> Result<f64, FieldError> {
        let pass = self.encoder_pass(params)?;
        let mut total = 0.0;
        for pick in picks {
            let pred = self.forward_patch(params, &pass, pick, false, scratch)?;
            let gt = self.gt_crop(pick);
            let (loss, _) =
                total_loss(&pred, &gt, &self.objective, self.vgg).expect("patch shapes agree");
            total += loss;
        }
        Ok(total / picks.len() as f64)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn batch_loss_grad(
        &self,
        params: &FieldParams,
        picks: &[PatchPick],
        scratch: &mut TrainScratch,
    ) -> Result<(f64, Vec<f64>), FieldError> {
        let pass = self.encoder_pass(params)?;
        let mut grad = vec![0.0; params.data.len()];
        let mut fmap_grads: Vec<Grid> = pass
            .features
            .iter()
            .map(|f| Grid::zeros(f.height(), f.width(), f.channels()))
            .collect();
        let mut total = 0.0;
        for pick in picks {
            total +=
                self.patch_backward(params, &pass, pick, &mut grad, &mut fmap_grads, scratch)?;
        }
        // Encoder backward once per source view over the summed feature grads.
        for (i, view) in self.setup.sources.iter().enumerate() {
            let encoded = view.encoded.as_ref().expect("encoded");
            encoding::encode_features_backward(
                encoded,
                &self.cfg.encoder,
                params.encoder_slice(),
                &pass.traces[i],
                &fmap_grads[i],
                &mut grad[params.encoder.clone()],
            );
        }
        let inv = 1.0 / picks.len() as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        Ok((total / picks.len() as f64, grad))
    }

    fn gt_crop(&self, pick: &PatchPick) -> Grid {
        let p = self.objective.patch_size;
        self.setup.train_images[pick.view].crop(pick.y0, pick.x0, p, p)
    }

    /// Collects the patch's per-row contiguous sample ranges and per-pixel
    /// counts. Returns the total sample count.
    fn patch_ranges(
        &self,
        pick: &PatchPick,
        row_ranges: &mut Vec<(usize, usize)>,
        pixel_counts: &mut Vec<u32>,
    ) -> usize {
        let table = &self.tables[pick.view];
        let pose = &self.setup.train_poses[pick.view];
        let p = self.objective.patch_size;
        row_ranges.clear();
        pixel_counts.clear();
        let mut n_samples = 0usize;
        for y in 0..p {
            let a = (pick.y0 + y) * pose.width + pick.x0;
            let (s0, s1) = (table.offsets[a] as usize, table.offsets[a + p] as usize);
            row_ranges.push((s0, s1));
            n_samples += s1 - s0;
            for x in 0..p {
                pixel_counts
                    .push(table.offsets[a + x + 1] - table.offsets[a + x]);
            }
        }
        n_samples
    }

    /// Assembles the feature-major input matrices for one patch and runs
    /// f1 (per source), mean pooling, and f2. Returns the sample count.
    fn forward_core(
        &self,
        params: &FieldParams,
        pass: &EncoderPass,
        pick: &PatchPick,
        row_ranges: &[(usize, usize)],
        n: usize,
        scratch: &mut TrainScratch,
    ) {
        let cfg = self.cfg;
        let table = &self.tables[pick.view];
        let n_src = table.n_src;
        let in_dim = table.in_dim;
        let f_dim = cfg.feature_dim();
        let omega_off = cfg.omega_offset();

        scratch.inputs.resize_with(n_src, Vec::new);
        scratch.f1_acts.resize_with(n_src, BatchActs::default);
        scratch.flat_deltas.clear();
        for &(s0, s1) in row_ranges {
            scratch.flat_deltas.extend_from_slice(&table.deltas[s0..s1]);
        }

        let f1_shape = cfg.f1_shape();
        let f2_shape = cfg.f2_shape();
        let vdim = cfg.f1_hidden;
        if scratch.vmean.len() != vdim * n {
            scratch.vmean.resize(vdim * n, 0.0);
        }

        for i in 0..n_src {
            #[cfg(test)]
            let t_assemble = std::time::Instant::now();
            let input = &mut scratch.inputs[i];
            if input.len() != in_dim * n {
                input.resize(in_dim * n, 0.0);
            }
            // Copy cached template rows (contiguous per patch row).
            let view_n = table.ts.len();
            for f in 0..in_dim {
                let src_row = &table.templates[(i * in_dim + f) * view_n..(i * in_dim + f + 1) * view_n];
                let dst_row = &mut input[f * n..(f + 1) * n];
                let mut at = 0usize;
                for &(s0, s1) in row_ranges {
                    dst_row[at..at + (s1 - s0)].copy_from_slice(&src_row[s0..s1]);
                    at += s1 - s0;
                }
            }
            #[cfg(test)]
            phase_timing::add(&phase_timing::ASSEMBLE, t_assemble.elapsed());
            #[cfg(test)]
            let t_gather = std::time::Instant::now();
            // Gather current features into the omega rows.
            let fmap = pass.features[i].data();
            let gathers = &table.gathers[i * view_n..(i + 1) * view_n];
            let mut at = 0usize;
            for &(s0, s1) in row_ranges {
                for s in s0..s1 {
                    let g = &gathers[s];
                    for f in 0..f_dim {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            let w = g.weights[k];
                            if w != 0.0 {
                                acc += w * fmap[g.texels[k] as usize * f_dim + f];
                            }
                        }
                        input[(omega_off + f) * n + at] = acc;
                    }
                    at += 1;
                }
            }
            #[cfg(test)]
            phase_timing::add(&phase_timing::GATHER, t_gather.elapsed());
            #[cfg(test)]
            let t_f1 = std::time::Instant::now();
            // f1 forward; accumulate the view mean.
            batch::forward(&f1_shape, params.f1_slice(), input, n, &mut scratch.f1_acts[i]);
            let v = scratch.f1_acts[i].layers.last().expect("f1 layers");
            if i == 0 {
                scratch.vmean.copy_from_slice(v);
            } else {
                for (m, &x) in scratch.vmean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
            }
            #[cfg(test)]
            phase_timing::add(&phase_timing::F1, t_f1.elapsed());
        }
        let inv_n = 1.0 / n_src as f64;
        for m in scratch.vmean.iter_mut() {
            *m *= inv_n;
        }
        #[cfg(test)]
        let t_f2 = std::time::Instant::now();
        batch::forward(
            &f2_shape,
            params.f2_slice(),
            &scratch.vmean,
            n,
            &mut scratch.f2_acts,
        );
        #[cfg(test)]
        phase_timing::add(&phase_timing::F2, t_f2.elapsed());
    }

    /// Forward pass over one patch; integrates into a predicted patch.
    fn forward_patch(
        &self,
        params: &FieldParams,
        pass: &EncoderPass,
        pick: &PatchPick,
        keep: bool,
        scratch: &mut TrainScratch,
    ) -> Result<Grid, FieldError> {
        let p = self.objective.patch_size;
        let mut row_ranges = Vec::new();
        let mut pixel_counts = Vec::new();
        let n = self.patch_ranges(pick, &mut row_ranges, &mut pixel_counts);
        scratch.pixel_counts = pixel_counts;
        self.forward_core(params, pass, pick, &row_ranges, n, scratch);

        let raw = scratch.f2_acts.layers.last().expect("f2 layers");
        let mut pred = Grid::zeros(p, p, 3);
        if keep {
            scratch.weights.clear();
            scratch.weights.resize(n, 0.0);
            scratch.trans_final.clear();
            scratch.trans_final.resize(p * p, 0.0);
        }
        let mut idx = 0usize;
        for (pix, &count) in scratch.pixel_counts.iter().enumerate() {
            let mut transmittance = 1.0f64;
            let texel = pred.texel_mut(pix / p, pix % p);
            for _ in 0..count {
                let color = [
                    sigmoid(raw[idx]),
                    sigmoid(raw[n + idx]),
                    sigmoid(raw[2 * n + idx]),
                ];
                let density = softplus(raw[3 * n + idx]);
                let optical = (density * scratch.flat_deltas[idx]).min(MAX_OPTICAL_DEPTH);
                let next = transmittance * (-optical).exp();
                let w = transmittance - next;
                for (t, &c) in texel.iter_mut().zip(color.iter()) {
                    *t += w * c;
                }
                if keep {
                    scratch.weights[idx] = w;
                }
                transmittance = next;
                idx += 1;
            }
            for (t, &bg) in texel.iter_mut().zip(self.background.iter()) {
                *t += transmittance * bg;
            }
            if keep {
                scratch.trans_final[pix] = transmittance;
            }
        }
        Ok(pred)
    }

    /// Forward + backward for one patch; accumulates into `grad` (f1/f2
    /// slices) and `fmap_grads`. Returns the patch loss.
    fn patch_backward(
        &self,
        params: &FieldParams,
        pass: &EncoderPass,
        pick: &PatchPick,
        grad: &mut [f64],
        fmap_grads: &mut [Grid],
        scratch: &mut TrainScratch,
    ) -> Result<f64, FieldError> {
        let cfg = self.cfg;
        let pred = self.forward_patch(params, pass, pick, true, scratch)?;
        let gt = self.gt_crop(pick);
        let (loss, d_pred) =
            total_loss(&pred, &gt, &self.objective, self.vgg).expect("patch shapes agree");

        let table = &self.tables[pick.view];
        let n_src = table.n_src;
        let in_dim = table.in_dim;
        let p = self.objective.patch_size;
        let mut row_ranges = Vec::new();
        let mut counts_unused = Vec::new();
        let n = self.patch_ranges(pick, &mut row_ranges, &mut counts_unused);
        let raw_owned;
        {
            let raw = scratch.f2_acts.layers.last().expect("f2 layers");
            raw_owned = raw.clone();
        }
        let raw = &raw_owned;

        // d loss / d raw head outputs via the integration weights.
        scratch.d_raw.clear();
        scratch.d_raw.resize(4 * n, 0.0);
        let mut pix_start = vec![0usize; scratch.pixel_counts.len()];
        {
            let mut at = 0usize;
            for (pix, &c) in scratch.pixel_counts.iter().enumerate() {
                pix_start[pix] = at;
                at += c as usize;
            }
        }
        for (pix, &count) in scratch.pixel_counts.iter().enumerate() {
            let g = d_pred.texel(pix / p, pix % p);
            let bg_dot: f64 = g
                .iter()
                .zip(self.background.iter())
                .map(|(a, b)| a * b)
                .sum();
            let mut suffix = scratch.trans_final[pix] * bg_dot;
            let mut t_after = scratch.trans_final[pix];
            let start = pix_start[pix];
            for s in (0..count as usize).rev() {
                let idx = start + s;
                let color = [
                    sigmoid(raw[idx]),
                    sigmoid(raw[n + idx]),
                    sigmoid(raw[2 * n + idx]),
                ];
                let density = softplus(raw[3 * n + idx]);
                let w = scratch.weights[idx];
                let g_dot_c: f64 = g.iter().zip(color.iter()).map(|(a, b)| a * b).sum();
                let optical = density * scratch.flat_deltas[idx];
                let d_density = if optical >= MAX_OPTICAL_DEPTH {
                    0.0
                } else {
                    // d w_j / d sigma_j = delta_j T_{j+1};
                    // d w_k / d sigma_j = -delta_j w_k for k > j;
                    // d T_final / d sigma_j = -delta_j T_final.
                    scratch.flat_deltas[idx] * (t_after * g_dot_c - suffix)
                };
                suffix += w * g_dot_c;
                t_after += w;
                // Through the heads.
                for c in 0..3 {
                    let sc = color[c];
                    scratch.d_raw[c * n + idx] = w * g[c] * sc * (1.0 - sc);
                }
                scratch.d_raw[3 * n + idx] = d_density * sigmoid(raw[3 * n + idx]);
            }
        }

        // f2 backward.
        let f2_shape = cfg.f2_shape();
        let mut d_raw = std::mem::take(&mut scratch.d_raw);
        batch::backward(
            &f2_shape,
            params.f2_slice(),
            &scratch.vmean,
            &scratch.f2_acts,
            &mut d_raw,
            &mut grad[params.f2.clone()],
            &mut scratch.d_vmean,
            &mut scratch.mlp_scratch,
        );
        scratch.d_raw = d_raw;

        // f1 backward per source; omega rows scatter into feature maps.
        let f1_shape = cfg.f1_shape();
        let inv_n = 1.0 / n_src as f64;
        let omega_off = cfg.omega_offset();
        let f_dim = cfg.feature_dim();
        let view_n = table.ts.len();
        for i in 0..n_src {
            scratch.d_f1_out.clear();
            scratch
                .d_f1_out
                .extend(scratch.d_vmean.iter().map(|d| d * inv_n));
            let mut d_f1_out = std::mem::take(&mut scratch.d_f1_out);
            batch::backward(
                &f1_shape,
                params.f1_slice(),
                &scratch.inputs[i],
                &scratch.f1_acts[i],
                &mut d_f1_out,
                &mut grad[params.f1.clone()],
                &mut scratch.d_input,
                &mut scratch.mlp_scratch,
            );
            scratch.d_f1_out = d_f1_out;

            let fg_data = fmap_grads[i].data_mut();
            let gathers = &table.gathers[i * view_n..(i + 1) * view_n];
            let mut at = 0usize;
            for &(s0, s1) in &row_ranges {
                for s in s0..s1 {
                    let gather = &gathers[s];
                    if gather.weights.iter().all(|&w| w == 0.0) {
                        at += 1;
                        continue;
                    }
                    for f in 0..f_dim {
                        let dv = scratch.d_input[(omega_off + f) * n + at];
                        if dv == 0.0 {
                            continue;
                        }
                        for k in 0..4 {
                            let wt = gather.weights[k];
                            if wt != 0.0 {
                                fg_data[gather.texels[k] as usize * f_dim + f] += wt * dv;
                            }
                        }
                    }
                    at += 1;
                }
            }
        }
        Ok(loss)
    }

    /// Renders the held-out views with the current parameters and averages
    /// the metrics.
    pub fn evaluate_heldout(
        &self,
        params: &FieldParams,
        sampling: &SamplingConfig,
        seed: u64,
        threads: usize,
    ) -> Result<Metrics, FieldError> {
        let mut sources = self.setup.sources.clone();
        for view in sources.iter_mut() {
            encoding::refresh_view_features(view, &self.cfg.encoder, params.encoder_slice())
                .map_err(shape_err)?;
        }
        let field = ConditionedField::new(self.cfg, params, &sources);
        let mut acc = Metrics {
            l1: 0.0,
            l2: 0.0,
            psnr: 0.0,
            ssim: 0.0,
        };
        let n = self.setup.heldout_poses.len().max(1);
        for (i, pose) in self.setup.heldout_poses.iter().enumerate() {
            let sampler = DepthGuidedSampler {
                views: &sources,
                cfg: *sampling,
                seed,
            };
            let opts = RenderOptions {
                t_near: self.setup.gen.t_near,
                t_far: self.setup.gen.t_far,
                background: self.background,
                threads,
            };
            let img = render_image(pose, heldout_view_id(i), &sampler, &field, &opts);
            let m = metrics(&img.color, &self.setup.heldout_images[i]).expect("same shapes");
            acc.l1 += m.l1 / n as f64;
            acc.l2 += m.l2 / n as f64;
            acc.psnr += m.psnr / n as f64;
            acc.ssim += m.ssim / n as f64;
        }
        Ok(acc)
    }
}

fn shape_err(e: encoding::EncodingError) -> FieldError {
    match e {
        encoding::EncodingError::ShapeMismatch { got, want } => {
            FieldError::ShapeMismatch { got, want }
        }
    }
}

/// One row of the training metrics log.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iter: usize,
    pub metrics: Metrics,
    pub train_loss: f64,
}

pub struct TrainReport {
    pub params: FieldParams,
    pub rows: Vec<MetricsRow>,
    pub final_metrics: Metrics,
    pub checkpoint: Option<PathBuf>,
    pub initial_loss: f64,
}

/// Runs the full training loop. When `out_dir` is given, writes
/// `params.dinr` (+ `.meta` sidecar) and `metrics.csv` there.
pub fn run_training(
    setup: &TrainSetup,
    cfg: &FieldConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    train
        .objective
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if train.objective.patch_size != train.patch_size {
        return Err(TrainError::Config(
            "objective patch size must match training patch size".into(),
        ));
    }
    for pose in &setup.train_poses {
        if pose.width < train.patch_size || pose.height < train.patch_size {
            return Err(TrainError::Config(format!(
                "patch {} exceeds image {}x{}",
                train.patch_size, pose.width, pose.height
            )));
        }
    }

    let tables = build_sample_tables(setup, cfg, &train.sampling, train.seed);
    let ctx = TrainContext {
        setup,
        cfg,
        tables: &tables,
        objective: train.objective,
        background: setup.gen.scene.background,
        vgg: None,
    };

    let mut params = FieldParams::init(cfg, train.seed);
    let mut opt = Adam::new(train.learning_rate, params.data.len());
    let mut scratch = TrainScratch::default();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ckpt_path = out_dir.map(|d| d.join("params.dinr"));

    for iter in 0..train.iterations {
        let picks = pick_patches(
            setup,
            train.patch_size,
            train.batch_size,
            train.seed,
            iter as u64,
        );
        let (loss, grad) = ctx.batch_loss_grad(&params, &picks, &mut scratch)?;
        if iter == 0 {
            initial_loss = loss;
        }
        if !loss.is_finite() {
            if let Some(path) = &ckpt_path {
                params.save(path)?;
            }
            return Err(TrainError::DivergenceDetected { iter });
        }
        last_loss = loss;
        opt.step(&mut params.data, &grad);

        if train.metrics_every > 0 && (iter + 1) % train.metrics_every == 0 {
            let m = ctx.evaluate_heldout(&params, &train.sampling, train.seed, 1)?;
            rows.push(MetricsRow {
                iter: iter + 1,
                metrics: m,
                train_loss: loss,
            });
            if let Some(path) = &ckpt_path {
                params.save(path)?;
            }
        }
    }

    let final_metrics = ctx.evaluate_heldout(&params, &train.sampling, train.seed, 1)?;
    if rows.last().map(|r| r.iter) != Some(train.iterations) {
        rows.push(MetricsRow {
            iter: train.iterations,
            metrics: final_metrics,
            train_loss: last_loss,
        });
    }
    if let Some(path) = &ckpt_path {
        params.save(path)?;
        save_run_meta(
            &meta_path(path),
            cfg,
            &train.sampling,
            train.noise_std,
            train.seed,
        )?;
    }
    if let Some(dir) = out_dir {
        let rows_csv: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{}",
                    train.run_id,
                    r.iter,
                    r.metrics.l1,
                    r.metrics.l2,
                    r.metrics.psnr,
                    r.metrics.ssim
                )
            })
            .collect();
        crate::io::save_csv(
            &dir.join("metrics.csv"),
            "run_id,iter,L1,L2,PSNR,SSIM",
            &rows_csv,
        )?;
    }

    Ok(TrainReport {
        params,
        rows,
        final_metrics,
        checkpoint: ckpt_path,
        initial_loss,
    })
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

/// Sidecar describing the architecture and conditioning pipeline of a
/// checkpoint, so `render`/`eval` can rebuild the same field. Encoders are
/// always the standard 3-layer layout here.
pub fn save_run_meta(
    path: &Path,
    cfg: &FieldConfig,
    sampling: &SamplingConfig,
    noise_std: f64,
    seed: u64,
) -> std::io::Result<()> {
    use std::io::Write;
    let enc_hidden = cfg
        .encoder
        .layers
        .first()
        .map(|l| l.out_channels)
        .unwrap_or(0);
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "feature_dim {}", cfg.feature_dim())?;
    writeln!(f, "encoder_hidden {enc_hidden}")?;
    writeln!(f, "pad {}", cfg.pad)?;
    writeln!(f, "f1_hidden {}", cfg.f1_hidden)?;
    writeln!(f, "f1_layers {}", cfg.f1_layers)?;
    writeln!(f, "f2_hidden {}", cfg.f2_hidden)?;
    writeln!(f, "f2_layers {}", cfg.f2_layers)?;
    writeln!(f, "x_frequencies {}", cfg.x_encoding.num_frequencies)?;
    writeln!(f, "dz_frequencies {}", cfg.dz_encoding.num_frequencies)?;
    writeln!(f, "depth_conditioning {}", u8::from(cfg.depth_conditioning))?;
    writeln!(f, "n_cand {}", sampling.n_cand)?;
    writeln!(f, "n_shortlist {}", sampling.n_shortlist)?;
    writeln!(f, "n_gauss {}", sampling.n_gauss)?;
    writeln!(f, "backface {}", u8::from(sampling.backface))?;
    writeln!(f, "noise_std {noise_std}")?;
    writeln!(f, "seed {seed}")?;
    Ok(())
}

/// Parses the `.meta` sidecar back into configs.
pub fn load_run_meta(path: &Path) -> std::io::Result<(FieldConfig, SamplingConfig, f64, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(' ') {
            map.insert(k.to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> std::io::Result<f64> {
        map.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("missing or bad meta key {k}"),
            )
        })
    };
    let mut cfg = FieldConfig {
        encoder: crate::encoding::EncoderConfig::standard(
            get("encoder_hidden")? as usize,
            get("feature_dim")? as usize,
        ),
        pad: get("pad")? as usize,
        f1_hidden: get("f1_hidden")? as usize,
        f1_layers: get("f1_layers")? as usize,
        f2_hidden: get("f2_hidden")? as usize,
        f2_layers: get("f2_layers")? as usize,
        ..field::FieldConfig::default()
    };
    cfg.x_encoding.num_frequencies = get("x_frequencies")? as usize;
    cfg.dz_encoding.num_frequencies = get("dz_frequencies")? as usize;
    cfg.depth_conditioning = get("depth_conditioning")? != 0.0;
    let sampling = SamplingConfig {
        n_cand: get("n_cand")? as usize,
        n_shortlist: get("n_shortlist")? as usize,
        n_gauss: get("n_gauss")? as usize,
        backface: get("backface")? != 0.0,
    };
    Ok((cfg, sampling, get("noise_std")?, get("seed")? as u64))
}
