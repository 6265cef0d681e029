//! Discrete volumetric integration along rays and image assembly.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{field_eval, FieldConfig, FieldParams, RadianceSample};
use crate::geometry::{CameraPose, CameraView, DepthMap, Ray, Vec3};
use crate::grid::Grid;
use crate::rng::{self, tag};
use crate::sampling::{
    coarse_to_fine_samples, depth_guided_samples, uniform_candidates, SampleSet, SamplingConfig,
};
use crate::scene::SyntheticScene;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("sample/radiance length mismatch: {samples} vs {radiances}")]
    LengthMismatch { samples: usize, radiances: usize },
}

/// Optical depth is clamped here before exponentiation so transmittance
/// never underflows into NaN gradients.
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;

/// Alpha below which the expected depth is reported as undefined.
pub const MIN_ALPHA_FOR_DEPTH: f64 = 1e-6;

/// Result of integrating one ray, before background compositing.
#[derive(Debug, Clone, Copy)]
pub struct RayResult {
    pub color: [f64; 3],
    pub alpha: f64,
    /// Transmittance-weighted mean sample parameter; NaN when alpha is
    /// (numerically) zero.
    pub expected_depth: f64,
}

/// Volumetric integration of radiance samples along a ray.
///
/// Transmittance updates multiplicatively and weights are formed as
/// adjacent-transmittance differences, so the energy identity
/// sum(w_j) = alpha holds to machine precision for any partition.
pub fn integrate_ray(
    samples: &SampleSet,
    radiances: &[RadianceSample],
) -> Result<RayResult, RenderError> {
    if samples.len() != radiances.len() {
        return Err(RenderError::LengthMismatch {
            samples: samples.len(),
            radiances: radiances.len(),
        });
    }
    let mut transmittance = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut depth_acc = 0.0f64;
    let mut weight_acc = 0.0f64;
    for ((&t, &delta), sample) in samples
        .ts
        .iter()
        .zip(samples.deltas.iter())
        .zip(radiances.iter())
    {
        debug_assert!(delta >= 0.0);
        let optical = (sample.density * delta).min(MAX_OPTICAL_DEPTH);
        let next = transmittance * (-optical).exp();
        let w = transmittance - next;
        for (c, &s) in color.iter_mut().zip(sample.color.iter()) {
            *c += w * s;
        }
        depth_acc += w * t;
        weight_acc += w;
        transmittance = next;
    }
    let alpha = 1.0 - transmittance;
    let expected_depth = if alpha < MIN_ALPHA_FOR_DEPTH {
        f64::NAN
    } else {
        depth_acc / weight_acc
    };
    Ok(RayResult {
        color,
        alpha,
        expected_depth,
    })
}

/// Anything that can score a world point for rendering.
pub trait RadianceField: Sync {
    fn eval(&self, x: &Vec3, d: &Vec3) -> RadianceSample;
}

/// Exact synthetic-scene oracle.
pub struct AnalyticField<'a>(pub &'a SyntheticScene);

impl RadianceField for AnalyticField<'_> {
    fn eval(&self, x: &Vec3, _d: &Vec3) -> RadianceSample {
        self.0.radiance_at(x)
    }
}

/// The learned field conditioned on prepared source views.
pub struct ConditionedField<'a> {
    pub cfg: &'a FieldConfig,
    pub params: &'a FieldParams,
    pub views: &'a [CameraView],
}

impl<'a> ConditionedField<'a> {
    pub fn new(cfg: &'a FieldConfig, params: &'a FieldParams, views: &'a [CameraView]) -> Self {
        assert!(params.matches(cfg), "parameter vector does not fit config");
        for view in views {
            assert!(
                view.features.is_some() && view.encoded.is_some(),
                "views must be encoded and featurised before rendering"
            );
        }
        Self { cfg, params, views }
    }
}

impl RadianceField for ConditionedField<'_> {
    fn eval(&self, x: &Vec3, d: &Vec3) -> RadianceSample {
        field_eval(self.cfg, self.params, self.views, x, d)
            .expect("shapes validated at construction")
    }
}

/// Produces the sample positions for one ray. `view_id`/`ray_id` seed the
/// per-ray random stream.
pub trait RaySampler: Sync {
    fn sample(&self, ray: &Ray, view_id: u64, ray_id: u64) -> SampleSet;
}

pub struct DepthGuidedSampler<'a> {
    pub views: &'a [CameraView],
    pub cfg: SamplingConfig,
    pub seed: u64,
}

impl RaySampler for DepthGuidedSampler<'_> {
    fn sample(&self, ray: &Ray, view_id: u64, ray_id: u64) -> SampleSet {
        let mut rng = rng::ray_stream(self.seed, view_id, ray_id, tag::CANDIDATE_JITTER);
        depth_guided_samples(ray, self.views, &self.cfg, &mut rng)
    }
}

pub struct CoarseToFineSampler<'a> {
    pub density: &'a (dyn Fn(&Vec3) -> f64 + Sync),
    pub n_total: usize,
    pub seed: u64,
}

impl RaySampler for CoarseToFineSampler<'_> {
    fn sample(&self, ray: &Ray, view_id: u64, ray_id: u64) -> SampleSet {
        let mut rng = rng::ray_stream(self.seed, view_id, ray_id, tag::COARSE_TO_FINE);
        coarse_to_fine_samples(ray, self.n_total, self.density, &mut rng)
    }
}

pub struct UniformSampler {
    pub n: usize,
    pub seed: u64,
    pub jitter: bool,
}

impl RaySampler for UniformSampler {
    fn sample(&self, ray: &Ray, view_id: u64, ray_id: u64) -> SampleSet {
        let ts = if self.jitter {
            let mut rng = rng::ray_stream(self.seed, view_id, ray_id, tag::CANDIDATE_JITTER);
            uniform_candidates(ray, self.n, Some(&mut rng))
        } else {
            uniform_candidates(ray, self.n, None)
        };
        let deltas: Vec<f64> = ts
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                if j + 1 < ts.len() {
                    ts[j + 1] - t
                } else {
                    ray.t_far - t
                }
            })
            .collect();
        let n = ts.len();
        SampleSet {
            ts,
            deltas,
            per_view_p: Vec::new(),
            pooled_p: vec![0.0; n],
            p_oa: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub t_near: f64,
    pub t_far: f64,
    pub background: [f64; 3],
    /// 1 guarantees bit-identical repeat runs; more threads split pixel rows.
    pub threads: usize,
}

/// A rendered view: color plus alpha and expected-depth diagnostics.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub color: Grid,
    pub alpha: Grid,
    /// Expected termination depth (ray parameter, m); NaN where undefined.
    pub depth: Grid,
}

/// Renders every pixel of `target` by integrating sampler-produced sample
/// sets, compositing the configured background behind the accumulated alpha.
pub fn render_image(
    target: &CameraPose,
    target_view_id: u64,
    sampler: &dyn RaySampler,
    field: &dyn RadianceField,
    opts: &RenderOptions,
) -> RenderedImage {
    let (h, w) = (target.height, target.width);
    let mut color = Grid::zeros(h, w, 3);
    let mut alpha = Grid::zeros(h, w, 1);
    let mut depth = Grid::zeros(h, w, 1);

    let render_row = |y: usize, color_row: &mut [f64], alpha_row: &mut [f64], depth_row: &mut [f64]| {
        for x in 0..w {
            let ray = target.generate_ray((x as f64, y as f64), opts.t_near, opts.t_far);
            let ray_id = (y * w + x) as u64;
            let samples = sampler.sample(&ray, target_view_id, ray_id);
            let radiances: Vec<RadianceSample> = samples
                .ts
                .iter()
                .map(|&t| field.eval(&ray.at(t), &ray.direction))
                .collect();
            let result = integrate_ray(&samples, &radiances).expect("lengths match");
            for c in 0..3 {
                color_row[x * 3 + c] =
                    result.color[c] + (1.0 - result.alpha) * opts.background[c];
            }
            alpha_row[x] = result.alpha;
            depth_row[x] = result.expected_depth;
        }
    };

    if opts.threads <= 1 {
        for y in 0..h {
            let (c, a, d) = row_slices(&mut color, &mut alpha, &mut depth, y, w);
            render_row(y, c, a, d);
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .expect("thread pool");
        pool.install(|| {
            let color_rows: Vec<&mut [f64]> = color.data_mut().chunks_mut(w * 3).collect();
            let alpha_rows: Vec<&mut [f64]> = alpha.data_mut().chunks_mut(w).collect();
            let depth_rows: Vec<&mut [f64]> = depth.data_mut().chunks_mut(w).collect();
            color_rows
                .into_par_iter()
                .zip(alpha_rows.into_par_iter())
                .zip(depth_rows.into_par_iter())
                .enumerate()
                .for_each(|(y, ((c, a), d))| render_row(y, c, a, d));
        });
    }
    RenderedImage {
        color,
        alpha,
        depth,
    }
}

fn row_slices<'a>(
    color: &'a mut Grid,
    alpha: &'a mut Grid,
    depth: &'a mut Grid,
    y: usize,
    w: usize,
) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
    let c = &mut color.data_mut()[y * w * 3..(y + 1) * w * 3];
    let a = &mut alpha.data_mut()[y * w..(y + 1) * w];
    let d = &mut depth.data_mut()[y * w..(y + 1) * w];
    (c, a, d)
}

/// Renders ground-truth first-surface depth for a camera, optionally
/// perturbed by Gaussian noise. The std map is the noise level floored at
/// `std_floor` so downstream likelihoods stay well defined.
pub fn render_gt_depth(
    pose: &CameraPose,
    scene: &SyntheticScene,
    noise_std: f64,
    std_floor: f64,
    seed: u64,
    view_id: u64,
) -> (DepthMap, Grid) {
    let (h, w) = (pose.height, pose.width);
    let mut data = Grid::zeros(h, w, 1);
    let mut valid = vec![false; h * w];
    let sigma = noise_std.max(std_floor).max(1e-9);
    let mut rng = rng::stream(seed, tag::DEPTH_NOISE, view_id);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    for y in 0..h {
        for x in 0..w {
            // Unit-length pixel ray straight from the pose (bounds-free).
            let k = &pose.intrinsics;
            let dir_cam = Vec3::new(
                (x as f64 - k[(0, 2)]) / k[(0, 0)],
                (y as f64 - k[(1, 2)]) / k[(1, 1)],
                1.0,
            );
            let dir_world = (pose.rotation.transpose() * dir_cam).normalize();
            let origin = pose.center();
            // Draw per-pixel noise unconditionally to keep the stream layout
            // independent of scene content.
            let noise: f64 = rng.sample(normal) * noise_std;
            if let Some(hit) = scene.first_hit(&origin, &dir_world) {
                let z = hit.t * pose.direction_to_camera(&dir_world).z;
                data.set(y, x, 0, (z + noise).max(1e-6));
                valid[y * w + x] = true;
            }
        }
    }
    let std_map = Grid::from_fn(h, w, 1, |_, _, _| sigma);
    (DepthMap::new(data, valid), std_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Primitive, PrimitiveShape};

    fn constant_samples(ts: Vec<f64>, t_far: f64) -> SampleSet {
        let n = ts.len();
        let deltas: Vec<f64> = ts
            .iter()
            .enumerate()
            .map(|(j, &t)| if j + 1 < n { ts[j + 1] - t } else { t_far - t })
            .collect();
        SampleSet {
            ts,
            deltas,
            per_view_p: Vec::new(),
            pooled_p: vec![0.0; n],
            p_oa: vec![0.0; n],
        }
    }

    fn rad(c: [f64; 3], density: f64) -> RadianceSample {
        RadianceSample { color: c, density }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let samples = constant_samples(vec![1.0, 1.5, 2.0], 2.5);
        let radiances = vec![rad([1.0, 0.5, 0.2], 0.0); 3];
        let r = integrate_ray(&samples, &radiances).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.alpha, 0.0);
        assert!(r.expected_depth.is_nan());
    }

    #[test]
    fn constant_medium_telescopes_exactly() {
        // sigma = 1 over total length ln 2 gives alpha = 1/2 for any split.
        let l = std::f64::consts::LN_2;
        let c = [0.8, 0.4, 0.1];
        let mut rng = crate::rng::stream(1, tag::INIT, 0);
        for _ in 0..100 {
            let mut cuts: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..l)).collect();
            cuts.push(0.0);
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ts: Vec<f64> = cuts.iter().map(|t| 1.0 + t).collect();
            let samples = constant_samples(ts, 1.0 + l);
            let radiances = vec![rad(c, 1.0); samples.len()];
            let r = integrate_ray(&samples, &radiances).unwrap();
            for ch in 0..3 {
                assert!(
                    (r.color[ch] - 0.5 * c[ch]).abs() < 1e-12,
                    "channel {ch}: {}",
                    r.color[ch]
                );
            }
            assert!((r.alpha - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let samples = constant_samples(vec![1.0, 2.0, 3.0], 4.0);
        // First segment has optical depth 20.
        let radiances = vec![
            rad([0.9, 0.1, 0.3], 20.0),
            rad([0.0, 1.0, 0.0], 5.0),
            rad([0.0, 0.0, 1.0], 5.0),
        ];
        let r = integrate_ray(&samples, &radiances).unwrap();
        for ch in 0..3 {
            assert!((r.color[ch] - radiances[0].color[ch]).abs() < 1e-8);
        }
        assert!((r.expected_depth - 1.0).abs() < 1e-8);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let samples = constant_samples(vec![1.0, 2.0], 3.0);
        assert_eq!(
            integrate_ray(&samples, &[rad([0.0; 3], 1.0)]).unwrap_err(),
            RenderError::LengthMismatch {
                samples: 2,
                radiances: 1
            }
        );
    }

    #[test]
    fn energy_identity_and_bounds() {
        let mut rng = crate::rng::stream(2, tag::INIT, 0);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..3.0)).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let samples = constant_samples(ts, 3.2);
            let radiances: Vec<RadianceSample> = (0..samples.len())
                .map(|_| {
                    rad(
                        [rng.gen(), rng.gen(), rng.gen()],
                        rng.gen_range(0.0..30.0),
                    )
                })
                .collect();
            let r = integrate_ray(&samples, &radiances).unwrap();
            // Energy: recompute the weight sum independently.
            let mut t_acc = 1.0;
            let mut wsum = 0.0;
            for (j, s) in radiances.iter().enumerate() {
                let a = 1.0 - (-s.density * samples.deltas[j]).exp();
                wsum += t_acc * a;
                t_acc *= 1.0 - a;
            }
            assert!((wsum - r.alpha).abs() < 1e-12);
            // Compositing bound without background.
            let cmax = radiances
                .iter()
                .flat_map(|s| s.color.iter())
                .cloned()
                .fold(0.0, f64::max);
            assert!(r.color.iter().all(|&c| c <= cmax + 1e-12));
            assert!((0.0..=1.0 + 1e-12).contains(&r.alpha));
        }
    }

    #[test]
    fn increasing_density_increases_alpha() {
        let samples = constant_samples(vec![1.0, 1.4, 1.8], 2.2);
        let mut last = -1.0;
        for scale in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let radiances = vec![rad([0.5; 3], scale); 3];
            let r = integrate_ray(&samples, &radiances).unwrap();
            assert!(r.alpha >= last);
            last = r.alpha;
        }
    }

    #[test]
    fn linearly_varying_density_converges_at_first_order() {
        // sigma(t) = 2 + 3 (t - 1) over [1, 2]; analytic optical depth 3.5.
        let sigma = |t: f64| 2.0 + 3.0 * (t - 1.0);
        let truth = 1.0 - (-3.5f64).exp();
        let mut errs = Vec::new();
        let mut ns = Vec::new();
        for pow in 4..11 {
            let n = 1usize << pow;
            let ts: Vec<f64> = (0..n).map(|j| 1.0 + (j as f64 + 0.5) / n as f64).collect();
            let samples = constant_samples(ts.clone(), 2.0);
            let radiances: Vec<RadianceSample> =
                ts.iter().map(|&t| rad([1.0; 3], sigma(t))).collect();
            let r = integrate_ray(&samples, &radiances).unwrap();
            errs.push((r.alpha - truth).abs().max(1e-16));
            ns.push(n as f64);
        }
        // Log-log slope of error vs n.
        let k = errs.len() as f64;
        let sx: f64 = ns.iter().map(|n| n.ln()).sum();
        let sy: f64 = errs.iter().map(|e| e.ln()).sum();
        let sxx: f64 = ns.iter().map(|n| n.ln() * n.ln()).sum();
        let sxy: f64 = ns.iter().zip(&errs).map(|(n, e)| n.ln() * e.ln()).sum();
        let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
        assert!(
            (slope + 1.0).abs() < 0.2,
            "convergence slope {slope}, expected about -1"
        );
    }

    fn unit_sphere_scene() -> SyntheticScene {
        SyntheticScene {
            primitives: vec![Primitive {
                shape: PrimitiveShape::Sphere {
                    center: Vec3::new(0.0, 0.0, 4.0),
                    radius: 1.0,
                },
                color: [0.9, 0.3, 0.2],
                density: 40.0,
            }],
            background: [0.0; 3],
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SyntheticScene {
            primitives: vec![],
            background: [0.1, 0.2, 0.3],
        };
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::zeros(), 30.0, 16, 16);
        let opts = RenderOptions {
            t_near: 0.5,
            t_far: 4.0,
            background: scene.background,
            threads: 1,
        };
        let sampler = UniformSampler {
            n: 16,
            seed: 0,
            jitter: false,
        };
        let img = render_image(&pose, 0, &sampler, &AnalyticField(&scene), &opts);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(img.color.texel(y, x), &[0.1, 0.2, 0.3]);
                assert_eq!(img.alpha.get(y, x, 0), 0.0);
            }
        }
    }

    #[test]
    fn analytic_sphere_matches_supersampled_reference() {
        let scene = unit_sphere_scene();
        let pose = CameraPose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0), 48.0, 64, 64);
        let pose_hi = CameraPose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0), 192.0, 256, 256);
        let opts = RenderOptions {
            t_near: 2.0,
            t_far: 6.0,
            background: [0.0; 3],
            threads: 1,
        };
        let sampler = UniformSampler {
            n: 192,
            seed: 0,
            jitter: false,
        };
        let field = AnalyticField(&scene);
        let low = render_image(&pose, 0, &sampler, &field, &opts);
        let high = render_image(&pose_hi, 0, &sampler, &field, &opts);
        // Box-average the 4x supersampled reference down to 64x64.
        let mut err_sum = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            acc += high.color.get(y * 4 + dy, x * 4 + dx, c);
                        }
                    }
                    err_sum += (low.color.get(y, x, c) - acc / 16.0).abs();
                }
            }
        }
        let mae = err_sum / (64.0 * 64.0 * 3.0);
        assert!(mae < 0.02, "mean abs error {mae}");
    }

    #[test]
    fn rendering_is_deterministic_single_threaded() {
        let scene = unit_sphere_scene();
        let pose = CameraPose::look_at(Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0), 24.0, 24, 24);
        let opts = RenderOptions {
            t_near: 2.0,
            t_far: 6.0,
            background: [0.05; 3],
            threads: 1,
        };
        let sampler = UniformSampler {
            n: 32,
            seed: 9,
            jitter: true,
        };
        let field = AnalyticField(&scene);
        let a = render_image(&pose, 3, &sampler, &field, &opts);
        let b = render_image(&pose, 3, &sampler, &field, &opts);
        for (x, y) in a.color.data().iter().zip(b.color.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gt_depth_of_frontal_plane_is_constant() {
        let scene = SyntheticScene {
            primitives: vec![Primitive {
                shape: PrimitiveShape::Plane {
                    point: Vec3::new(0.0, 0.0, 2.0),
                    normal: Vec3::new(0.0, 0.0, -1.0),
                },
                color: [1.0; 3],
                density: 10.0,
            }],
            background: [0.0; 3],
        };
        let pose = CameraPose {
            intrinsics: crate::geometry::Mat3::new(
                20.0, 0.0, 7.5, 0.0, 20.0, 7.5, 0.0, 0.0, 1.0,
            ),
            rotation: crate::geometry::Mat3::identity(),
            translation: Vec3::zeros(),
            width: 16,
            height: 16,
        };
        let (depth, std) = render_gt_depth(&pose, &scene, 0.0, 1e-3, 1, 0);
        for y in 0..16 {
            for x in 0..16 {
                assert!(depth.is_valid(y, x));
                assert!((depth.data.get(y, x, 0) - 2.0).abs() < 1e-12);
                assert_eq!(std.get(y, x, 0), 1e-3);
            }
        }
    }

    #[test]
    fn gt_depth_of_unit_sphere_center_pixel() {
        let scene = unit_sphere_scene();
        // Odd resolution: pixel (16, 16) sits exactly on the optical axis.
        let pose = CameraPose {
            intrinsics: crate::geometry::Mat3::new(
                40.0, 0.0, 16.0, 0.0, 40.0, 16.0, 0.0, 0.0, 1.0,
            ),
            rotation: crate::geometry::Mat3::identity(),
            translation: Vec3::zeros(),
            width: 33,
            height: 33,
        };
        let (depth, _) = render_gt_depth(&pose, &scene, 0.0, 1e-3, 1, 0);
        let d = depth.data.get(16, 16, 0);
        assert!((d - 3.0).abs() < 1e-12, "center depth {d}");
        // Rays that miss are invalid.
        assert!(!depth.is_valid(0, 0));
    }

    #[test]
    fn gt_depth_matches_quadratic_oracle_off_center() {
        let scene = unit_sphere_scene();
        let pose = CameraPose {
            intrinsics: crate::geometry::Mat3::new(
                40.0, 0.0, 15.5, 0.0, 40.0, 15.5, 0.0, 0.0, 1.0,
            ),
            rotation: crate::geometry::Mat3::identity(),
            translation: Vec3::zeros(),
            width: 32,
            height: 32,
        };
        let (depth, _) = render_gt_depth(&pose, &scene, 0.0, 1e-3, 1, 0);
        for (x, y) in [(10usize, 12usize), (20, 18), (15, 8)] {
            if !depth.is_valid(y, x) {
                continue;
            }
            // Oracle: solve the quadratic for the pixel ray directly.
            let dir = Vec3::new(
                (x as f64 - 15.5) / 40.0,
                (y as f64 - 15.5) / 40.0,
                1.0,
            );
            let dn = dir.norm();
            let d_unit = dir / dn;
            let oc = -Vec3::new(0.0, 0.0, 4.0);
            let b = oc.dot(&d_unit);
            let c = oc.norm_squared() - 1.0;
            let disc = b * b - c;
            assert!(disc >= 0.0);
            let t = -b - disc.sqrt();
            let z = t * d_unit.z;
            assert!(
                (depth.data.get(y, x, 0) - z).abs() < 1e-9,
                "pixel ({x},{y}): {} vs oracle {z}",
                depth.data.get(y, x, 0)
            );
        }
    }
}
