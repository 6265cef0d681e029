//! Depth-guided ray sampling and the coarse-to-fine baseline.
//!
//! Candidate samples along a ray are scored against every source view's
//! depth distribution, pooled, and reduced to a shortlist plus extra draws
//! from a Gaussian fitted to the occlusion-aware termination likelihoods.
//! All randomness comes through an explicit per-ray stream, so rays can be
//! processed independently on any number of threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CameraView, NormalMap, Ray, Vec3};
use crate::math::gaussian_slab_mass;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("occlusion-aware weights sum below 1e-12; no depth evidence")]
    DegenerateWeights,
}

/// Sampling budget and switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Uniform candidates scored per ray.
    pub n_cand: usize,
    /// Candidates kept by pooled likelihood.
    pub n_shortlist: usize,
    /// Extra draws from the fitted termination Gaussian.
    pub n_gauss: usize,
    /// Discard candidates whose depth-map normal faces away from the ray.
    pub backface: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_cand: 1000,
            n_shortlist: 25,
            n_gauss: 15,
            backface: true,
        }
    }
}

impl SamplingConfig {
    pub fn total_samples(&self) -> usize {
        self.n_shortlist + self.n_gauss
    }
}

/// Ordered samples along one ray with their segment lengths and the
/// likelihoods that produced them.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    /// Strictly ascending ray parameters (m).
    pub ts: Vec<f64>,
    /// Segment lengths; the last entry extends to the far plane.
    pub deltas: Vec<f64>,
    /// Per-view surface likelihoods at the final sample positions (N x n).
    pub per_view_p: Vec<Vec<f64>>,
    /// View-wise max-pooled likelihoods.
    pub pooled_p: Vec<f64>,
    /// Occlusion-aware termination likelihoods.
    pub p_oa: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn from_positions(mut ts: Vec<f64>, t_far: f64) -> Self {
        ts.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample t"));
        ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);
        let deltas = deltas_for(&ts, t_far);
        let n = ts.len();
        Self {
            ts,
            deltas,
            per_view_p: Vec::new(),
            pooled_p: vec![0.0; n],
            p_oa: vec![0.0; n],
        }
    }

    /// Debug check of the structural invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.ts.len();
        if self.deltas.len() != n || self.pooled_p.len() != n || self.p_oa.len() != n {
            return Err("length mismatch".into());
        }
        for w in self.ts.windows(2) {
            if w[1] <= w[0] {
                return Err(format!("ts not strictly ascending: {} then {}", w[0], w[1]));
            }
        }
        for j in 0..n.saturating_sub(1) {
            if (self.deltas[j] - (self.ts[j + 1] - self.ts[j])).abs() > 1e-12 {
                return Err("interior delta mismatch".into());
            }
        }
        let all_p = self
            .per_view_p
            .iter()
            .flatten()
            .chain(self.pooled_p.iter())
            .chain(self.p_oa.iter());
        for &p in all_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability out of range: {p}"));
            }
        }
        let sum: f64 = self.p_oa.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(format!("termination mass exceeds 1: {sum}"));
        }
        Ok(())
    }
}

fn deltas_for(ts: &[f64], t_far: f64) -> Vec<f64> {
    let n = ts.len();
    let mut deltas = vec![0.0; n];
    for j in 0..n {
        deltas[j] = if j + 1 < n {
            ts[j + 1] - ts[j]
        } else {
            (t_far - ts[j]).max(0.0)
        };
    }
    deltas
}

/// Stratified-uniform candidates over [t_near, t_far], ascending. With no
/// RNG each stratum midpoint is used.
pub fn uniform_candidates(ray: &Ray, n_cand: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    debug_assert!(n_cand > 0);
    let span = ray.t_far - ray.t_near;
    let delta = span / n_cand as f64;
    let mut ts = Vec::with_capacity(n_cand);
    match rng {
        Some(rng) => {
            for j in 0..n_cand {
                let jitter: f64 = rng.gen::<f64>();
                ts.push(ray.t_near + (j as f64 + jitter) * delta);
            }
        }
        None => {
            for j in 0..n_cand {
                ts.push(ray.t_near + (j as f64 + 0.5) * delta);
            }
        }
    }
    ts
}

/// Candidate spacing used as the slab width of the likelihood integral.
#[inline]
pub fn candidate_delta(ray: &Ray, n_cand: usize) -> f64 {
    (ray.t_far - ray.t_near) / n_cand as f64
}

/// Likelihood that `x` is a surface point for one view: the mass of the
/// view's depth distribution at the projected pixel falling inside the
/// sample's slab of width `delta`. Out-of-frustum or invalid depth gives 0.
pub fn surface_likelihood(x: &Vec3, view: &CameraView, delta: f64) -> f64 {
    let x_cam = view.pose.world_to_camera(x);
    let z = x_cam.z;
    if z <= 1e-9 {
        return 0.0;
    }
    let k = &view.pose.intrinsics;
    let u = k[(0, 0)] * x_cam.x / z + k[(0, 2)];
    let v = k[(1, 1)] * x_cam.y / z + k[(1, 2)];
    let Some(mu) = view.depth.sample(u, v) else {
        return 0.0;
    };
    let sigma = view.depth_std.sample_bilinear_scalar(u, v);
    debug_assert!(sigma > 0.0);
    gaussian_slab_mass(mu, sigma, z, delta)
}

/// True when the sample should be discarded for this view: the angle
/// between the ray direction and the surface normal at the sample's
/// projection is strictly smaller than 90 degrees. Invalid normals keep the
/// sample.
pub fn backface_cull(x: &Vec3, ray_dir: &Vec3, view: &CameraView, normals: &NormalMap) -> bool {
    let x_cam = view.pose.world_to_camera(x);
    if x_cam.z <= 1e-9 {
        return false;
    }
    let k = &view.pose.intrinsics;
    let u = k[(0, 0)] * x_cam.x / x_cam.z + k[(0, 2)];
    let v = k[(1, 1)] * x_cam.y / x_cam.z + k[(1, 2)];
    let (w, h) = (view.width() as f64, view.height() as f64);
    if u < 0.0 || v < 0.0 || u > w - 1.0 || v > h - 1.0 {
        return false;
    }
    let Some(n) = normals.sample(u, v) else {
        return false;
    };
    let d_cam = view.pose.direction_to_camera(ray_dir);
    d_cam.dot(&n) > 0.0
}

/// View-wise max pooling of per-view likelihoods.
pub fn pool_likelihoods(per_view_p: &[Vec<f64>]) -> Vec<f64> {
    assert!(!per_view_p.is_empty());
    let n = per_view_p[0].len();
    let mut pooled = vec![0.0; n];
    for row in per_view_p {
        debug_assert_eq!(row.len(), n);
        for (p, &v) in pooled.iter_mut().zip(row.iter()) {
            if v > *p {
                *p = v;
            }
        }
    }
    pooled
}

/// Indices of the `n_shortlist` highest-likelihood candidates, re-sorted
/// ascending in t. Ties prefer smaller t.
pub fn shortlist_indices(pooled_p: &[f64], n_shortlist: usize) -> Vec<usize> {
    let n = pooled_p.len();
    let keep = n_shortlist.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Sort by likelihood descending, index (= t order) ascending on ties.
    order.sort_by(|&a, &b| {
        pooled_p[b]
            .partial_cmp(&pooled_p[a])
            .expect("non-finite likelihood")
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..keep].to_vec();
    picked.sort_unstable();
    picked
}

/// The shortlisted t values themselves, ascending.
pub fn shortlist(ts: &[f64], pooled_p: &[f64], n_shortlist: usize) -> Vec<f64> {
    shortlist_indices(pooled_p, n_shortlist)
        .into_iter()
        .map(|i| ts[i])
        .collect()
}

/// Occlusion-aware termination likelihoods:
/// p_oa(x_j) = p(x_j) * prod_{k<j} (1 - p(x_k)). Input must be in ascending
/// t order.
pub fn occlusion_aware(pooled_p: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    let mut out = Vec::with_capacity(pooled_p.len());
    for &p in pooled_p {
        out.push(p * transmittance);
        transmittance *= 1.0 - p;
    }
    out
}

/// Moment-matched Gaussian fit to the termination distribution.
pub fn fit_termination_gaussian(ts: &[f64], p_oa: &[f64]) -> Result<(f64, f64), SamplingError> {
    debug_assert_eq!(ts.len(), p_oa.len());
    let total: f64 = p_oa.iter().sum();
    if total < 1e-12 {
        return Err(SamplingError::DegenerateWeights);
    }
    let mean: f64 = ts.iter().zip(p_oa).map(|(t, w)| w * t).sum::<f64>() / total;
    let var: f64 = ts
        .iter()
        .zip(p_oa)
        .map(|(t, w)| w * (t - mean) * (t - mean))
        .sum::<f64>()
        / total;
    Ok((mean, var.max(0.0).sqrt()))
}

/// Draws `n_gauss` samples around the ray's termination expectation. The
/// fitted sigma is floored at `sigma_floor` (one candidate spacing) so the
/// draws stay distinct; results are clamped to the ray bounds.
pub fn gaussian_boost(
    ts: &[f64],
    p_oa: &[f64],
    n_gauss: usize,
    sigma_floor: f64,
    bounds: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SamplingError> {
    let (mean, sigma) = fit_termination_gaussian(ts, p_oa)?;
    let sigma = sigma.max(sigma_floor);
    let normal = rand_distr::Normal::new(mean, sigma).expect("finite gaussian fit");
    let (lo, hi) = bounds;
    let hi_inset = hi - 1e-9 * (hi - lo).max(1.0);
    Ok((0..n_gauss)
        .map(|_| rng.sample(normal).clamp(lo, hi_inset))
        .collect())
}

/// Per-view likelihoods for a whole candidate list, with backface culling.
///
/// Matches `surface_likelihood`/`backface_cull` exactly; the loop just
/// hoists the per-view transform and skips saturated far tails.
pub fn per_view_likelihoods(
    ray: &Ray,
    ts: &[f64],
    view: &CameraView,
    delta: f64,
    backface: bool,
) -> Vec<f64> {
    let rot = &view.pose.rotation;
    let a = rot * ray.origin + view.pose.translation;
    let b = rot * ray.direction;
    let k = &view.pose.intrinsics;
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let (w, h) = (view.width() as f64, view.height() as f64);
    let d_cam = b;
    let normals = view.normals.as_ref();
    let mut out = vec![0.0; ts.len()];
    for (o, &t) in out.iter_mut().zip(ts.iter()) {
        let z = a.z + t * b.z;
        if z <= 1e-9 {
            continue;
        }
        let u = fx * (a.x + t * b.x) / z + cx;
        let v = fy * (a.y + t * b.y) / z + cy;
        if u < 0.0 || v < 0.0 || u > w - 1.0 || v > h - 1.0 {
            continue;
        }
        let fp = view.depth.data.bilinear_footprint(u, v);
        let mut mu = 0.0;
        let mut ok = true;
        for (wt, &(ty, tx)) in fp.weights.iter().zip(fp.texels.iter()) {
            if !view.depth.is_valid(ty, tx) {
                ok = false;
                break;
            }
            mu += wt * view.depth.data.get(ty, tx, 0);
        }
        if !ok {
            continue;
        }
        let sigma = view.depth_std.sample_bilinear_scalar(u, v);
        // Both slab endpoints deep in the same tail: the mass underflows.
        if (z - mu).abs() - delta * 0.5 > 42.0 * sigma {
            continue;
        }
        if backface {
            if let Some(nm) = normals {
                if let Some(n) = nm.sample(u, v) {
                    if d_cam.dot(&n) > 0.0 {
                        continue;
                    }
                }
            }
        }
        *o = gaussian_slab_mass(mu, sigma, z, delta);
    }
    out
}

/// The full depth-guided pipeline: score candidates against every view,
/// pool, shortlist, boost, merge. Falls back to a stratified-uniform set of
/// the full budget when no view provides any depth evidence.
pub fn depth_guided_samples(
    ray: &Ray,
    views: &[CameraView],
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    assert!(!views.is_empty(), "depth-guided sampling needs source views");
    let ts = uniform_candidates(ray, cfg.n_cand, Some(rng));
    let delta = candidate_delta(ray, cfg.n_cand);
    let per_view: Vec<Vec<f64>> = views
        .iter()
        .map(|view| per_view_likelihoods(ray, &ts, view, delta, cfg.backface))
        .collect();
    let pooled = pool_likelihoods(&per_view);
    let p_oa = occlusion_aware(&pooled);

    let positions = match gaussian_boost(
        &ts,
        &p_oa,
        cfg.n_gauss,
        delta,
        (ray.t_near, ray.t_far),
        rng,
    ) {
        Ok(boosted) => {
            let mut merged = shortlist(&ts, &pooled, cfg.n_shortlist);
            merged.extend(boosted);
            merged
        }
        // No depth evidence anywhere: rays into empty space still need
        // samples to render the background.
        Err(SamplingError::DegenerateWeights) => {
            uniform_candidates(ray, cfg.total_samples(), Some(rng))
        }
    };

    let mut set = SampleSet::from_positions(positions, ray.t_far);
    let final_per_view: Vec<Vec<f64>> = views
        .iter()
        .map(|view| per_view_likelihoods(ray, &set.ts, view, delta, cfg.backface))
        .collect();
    set.pooled_p = pool_likelihoods(&final_per_view);
    set.p_oa = occlusion_aware(&set.pooled_p);
    set.per_view_p = final_per_view;
    set
}

/// Coarse-to-fine baseline: half the budget stratified-uniform, the other
/// half importance-sampled from piecewise-constant weights derived from a
/// coarse density probe.
pub fn coarse_to_fine_samples(
    ray: &Ray,
    n_total: usize,
    coarse_density: &dyn Fn(&Vec3) -> f64,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let n_coarse = (n_total / 2).max(1);
    let n_fine = n_total - n_coarse;
    let coarse_ts = uniform_candidates(ray, n_coarse, Some(rng));
    let delta = (ray.t_far - ray.t_near) / n_coarse as f64;

    // Transmittance-weighted contribution of each stratum.
    let mut weights = Vec::with_capacity(n_coarse);
    let mut transmittance = 1.0;
    for &t in &coarse_ts {
        let sigma = coarse_density(&ray.at(t));
        let alpha = 1.0 - (-sigma * delta).min(80.0).exp();
        weights.push(transmittance * alpha);
        transmittance *= 1.0 - alpha;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }

    // Inverse-CDF draws, piecewise-constant over the strata.
    let mut cdf = Vec::with_capacity(n_coarse + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    let norm: f64 = weights.iter().sum();
    for &w in &weights {
        acc += w / norm;
        cdf.push(acc);
    }
    *cdf.last_mut().expect("non-empty cdf") = 1.0;

    let mut positions = coarse_ts;
    for _ in 0..n_fine {
        let u: f64 = rng.gen();
        let bin = match cdf.binary_search_by(|c| c.partial_cmp(&u).expect("finite cdf")) {
            Ok(i) => i.min(n_coarse - 1),
            Err(i) => (i - 1).min(n_coarse - 1),
        };
        let lo = cdf[bin];
        let hi = cdf[bin + 1];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        let t0 = ray.t_near + bin as f64 * delta;
        positions.push(t0 + frac * delta);
    }
    SampleSet::from_positions(positions, ray.t_far)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraPose, DepthMap, Mat3};
    use crate::grid::Grid;
    use crate::math::quadrature::gauss_mass;
    use crate::math::{ks_two_sample_pvalue, ks_uniform_pvalue};
    use crate::rng::{ray_stream, tag};
    use proptest::prelude::*;
    use rand::Rng;

    fn test_ray() -> Ray {
        Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 1.0, 3.0)
    }

    fn frontal_view(depth: f64, sigma: f64, h: usize, w: usize) -> CameraView {
        let pose = CameraPose {
            intrinsics: Mat3::new(
                (w as f64) * 0.8,
                0.0,
                (w as f64 - 1.0) / 2.0,
                0.0,
                (w as f64) * 0.8,
                (h as f64 - 1.0) / 2.0,
                0.0,
                0.0,
                1.0,
            ),
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width: w,
            height: h,
        };
        let mut view = CameraView::new(
            pose,
            Grid::zeros(h, w, 3),
            DepthMap::constant(h, w, depth),
            Grid::from_fn(h, w, 1, |_, _, _| sigma),
        );
        view.compute_normals(crate::geometry::DEFAULT_EDGE_THRESHOLD);
        view
    }

    #[test]
    fn single_candidate_stays_in_bounds() {
        let ray = test_ray();
        let mut rng = ray_stream(1, 0, 0, tag::CANDIDATE_JITTER);
        let ts = uniform_candidates(&ray, 1, Some(&mut rng));
        assert_eq!(ts.len(), 1);
        assert!(ts[0] >= ray.t_near && ts[0] <= ray.t_far);
    }

    #[test]
    fn deterministic_mode_uses_stratum_midpoints() {
        let ray = test_ray();
        let ts = uniform_candidates(&ray, 4, None);
        assert_eq!(ts, vec![1.25, 1.75, 2.25, 2.75]);
    }

    #[test]
    fn candidate_distribution_is_uniform() {
        let ray = test_ray();
        let mut rng = ray_stream(2, 0, 0, tag::CANDIDATE_JITTER);
        let mut draws = Vec::with_capacity(100_000);
        for _ in 0..1000 {
            draws.extend(uniform_candidates(&ray, 100, Some(&mut rng)));
        }
        let p = ks_uniform_pvalue(&mut draws, ray.t_near, ray.t_far);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn surface_likelihood_matches_quadrature_value() {
        // mu = 2.0, sigma = 0.1, z = 2.0, delta = 0.01.
        let view = frontal_view(2.0, 0.1, 17, 17);
        let p = surface_likelihood(&Vec3::new(0.0, 0.0, 2.0), &view, 0.01);
        let oracle = gauss_mass(2.0, 0.1, 2.0 - 0.005, 2.0 + 0.005);
        assert!((p - oracle).abs() < 1e-10, "p {p}, oracle {oracle}");
        assert!((p - 0.03988).abs() < 5e-5, "expected about 0.03988, got {p}");
    }

    #[test]
    fn surface_likelihood_far_tail_vanishes() {
        let view = frontal_view(2.0, 0.1, 17, 17);
        // z = mu + 10 sigma.
        let p = surface_likelihood(&Vec3::new(0.0, 0.0, 3.0), &view, 0.01);
        assert!(p < 1e-20, "far-tail mass {p}");
    }

    #[test]
    fn surface_likelihood_symmetry_is_exact() {
        let view = frontal_view(2.0, 0.1, 17, 17);
        let a = 0.0625; // exact in binary so z - mu mirrors bit for bit
        let front = surface_likelihood(&Vec3::new(0.0, 0.0, 2.0 - a), &view, 0.01);
        let back = surface_likelihood(&Vec3::new(0.0, 0.0, 2.0 + a), &view, 0.01);
        assert_eq!(front.to_bits(), back.to_bits());
    }

    #[test]
    fn surface_likelihood_out_of_frustum_is_zero() {
        let view = frontal_view(2.0, 0.1, 17, 17);
        assert_eq!(surface_likelihood(&Vec3::new(9.0, 0.0, 2.0), &view, 0.01), 0.0);
        assert_eq!(surface_likelihood(&Vec3::new(0.0, 0.0, -1.0), &view, 0.01), 0.0);
    }

    #[test]
    fn surface_likelihood_grows_with_delta() {
        let view = frontal_view(2.0, 0.05, 17, 17);
        let x = Vec3::new(0.0, 0.0, 1.97);
        let mut last = 0.0;
        for delta in [0.001, 0.01, 0.05, 0.2] {
            let p = surface_likelihood(&x, &view, delta);
            assert!(p >= last, "not monotone in delta");
            last = p;
        }
    }

    #[test]
    fn backface_angles() {
        let view = frontal_view(2.0, 0.1, 17, 17);
        let normals = view.normals.clone().unwrap();
        let x = Vec3::new(0.0, 0.0, 2.0);
        // Normal of the fronto-parallel plane is (0,0,-1): a +z ray sees it
        // head-on (angle 180 degrees) and keeps the sample.
        assert!(!backface_cull(&x, &Vec3::new(0.0, 0.0, 1.0), &view, &normals));
        // A flipped normal map simulates angle 0: discard.
        let mut flipped = normals.clone();
        for v in flipped.data.data_mut().iter_mut() {
            *v = -*v;
        }
        assert!(backface_cull(&x, &Vec3::new(0.0, 0.0, 1.0), &view, &flipped));
        // Exactly 90 degrees keeps (strict inequality).
        let mut sideways = normals.clone();
        let w = sideways.data.width();
        for y in 0..sideways.data.height() {
            for xx in 0..w {
                let t = sideways.data.texel_mut(y, xx);
                t[0] = 1.0;
                t[1] = 0.0;
                t[2] = 0.0;
            }
        }
        assert!(!backface_cull(&x, &Vec3::new(0.0, 0.0, 1.0), &view, &sideways));
        // Invalid normals keep the sample.
        let mut invalid = normals.clone();
        invalid.valid.fill(false);
        assert!(!backface_cull(&x, &Vec3::new(0.0, 0.0, 1.0), &view, &invalid));
    }

    #[test]
    fn pooling_single_view_is_identity() {
        let row = vec![0.3, 0.1, 0.8];
        assert_eq!(pool_likelihoods(&[row.clone()]), row);
    }

    #[test]
    fn pooling_takes_columnwise_max() {
        let rows = vec![vec![0.1, 0.9], vec![0.5, 0.2]];
        assert_eq!(pool_likelihoods(&rows), vec![0.5, 0.9]);
    }

    #[test]
    fn shortlist_keeps_highest_likelihoods_in_t_order() {
        let ts = vec![1.0, 2.0, 3.0];
        let p = vec![0.1, 0.9, 0.5];
        assert_eq!(shortlist(&ts, &p, 2), vec![2.0, 3.0]);
    }

    #[test]
    fn shortlist_ties_prefer_smaller_t() {
        let ts = vec![1.0, 2.0, 3.0, 4.0];
        let p = vec![0.5, 0.5, 0.5, 0.5];
        assert_eq!(shortlist(&ts, &p, 2), vec![1.0, 2.0]);
    }

    #[test]
    fn shortlist_matches_full_sort_oracle() {
        let mut rng = ray_stream(3, 0, 0, tag::CANDIDATE_JITTER);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let keep = rng.gen_range(1..=n);
            let p: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let got = shortlist_indices(&p, keep);
            // Oracle: stable sort of (likelihood, index) pairs.
            let mut pairs: Vec<(usize, f64)> = p.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut want: Vec<usize> = pairs[..keep].iter().map(|(i, _)| *i).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn occlusion_aware_basics() {
        assert_eq!(occlusion_aware(&[0.7]), vec![0.7]);
        assert_eq!(occlusion_aware(&[0.5, 0.5]), vec![0.5, 0.25]);
    }

    #[test]
    fn occlusion_aware_telescopes() {
        let mut rng = ray_stream(4, 0, 0, tag::CANDIDATE_JITTER);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let p_oa = occlusion_aware(&p);
            let sum: f64 = p_oa.iter().sum();
            let want = 1.0 - p.iter().map(|q| 1.0 - q).product::<f64>();
            assert!((sum - want).abs() < 1e-12);
            assert!(sum <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gaussian_fit_symmetric_weights_center_exactly() {
        let ts = vec![2.0, 3.0, 4.0];
        let p_oa = vec![0.25, 0.5, 0.25];
        let (mu, _) = fit_termination_gaussian(&ts, &p_oa).unwrap();
        assert_eq!(mu, 3.0);
    }

    #[test]
    fn gaussian_fit_single_weight_degenerates_to_point() {
        let ts = vec![1.0, 2.0, 3.0];
        let p_oa = vec![0.0, 0.6, 0.0];
        let (mu, sigma) = fit_termination_gaussian(&ts, &p_oa).unwrap();
        assert_eq!(mu, 2.0);
        assert_eq!(sigma, 0.0);
        // With the floor applied, draws stay within a few spacings of t0.
        let mut rng = ray_stream(5, 0, 0, tag::GAUSSIAN_BOOST);
        let floor = 0.002;
        let boosted = gaussian_boost(&ts, &p_oa, 50, floor, (1.0, 3.0), &mut rng).unwrap();
        assert!(boosted.iter().all(|t| (t - 2.0).abs() < 6.0 * floor));
    }

    #[test]
    fn gaussian_fit_rejects_vanishing_weights() {
        assert_eq!(
            fit_termination_gaussian(&[1.0, 2.0], &[0.0, 1e-13]).unwrap_err(),
            SamplingError::DegenerateWeights
        );
    }

    #[test]
    fn boosted_sample_mean_matches_fit() {
        let ts: Vec<f64> = (0..100).map(|i| 1.0 + i as f64 * 0.02).collect();
        let p_oa: Vec<f64> = ts
            .iter()
            .map(|t| (-0.5 * ((t - 2.0) / 0.15f64).powi(2)).exp())
            .collect();
        let (mu, sigma) = fit_termination_gaussian(&ts, &p_oa).unwrap();
        let mut rng = ray_stream(6, 0, 0, tag::GAUSSIAN_BOOST);
        let n = 100_000;
        let draws = gaussian_boost(&ts, &p_oa, n, 1e-4, (0.0, 10.0), &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(
            (mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt(),
            "monte carlo mean {mean} vs fit {mu} (sigma {sigma})"
        );
    }

    #[test]
    fn default_budget_produces_40_samples() {
        let view = frontal_view(2.0, 0.01, 33, 33);
        let ray = test_ray();
        let cfg = SamplingConfig::default();
        let mut rng = ray_stream(7, 0, 0, tag::CANDIDATE_JITTER);
        let set = depth_guided_samples(&ray, std::slice::from_ref(&view), &cfg, &mut rng);
        assert_eq!(set.len(), 40);
        set.check_invariants().unwrap();
    }

    #[test]
    fn tight_depth_concentrates_all_samples_near_surface() {
        // sigma = 8 mm; 25 shortlisted candidates span +-25 mm around the
        // surface and boosted draws stay within 4 sigma almost surely.
        let sigma = 0.008;
        let view = frontal_view(2.0, sigma, 33, 33);
        let ray = test_ray();
        let cfg = SamplingConfig::default();
        let mut rng = ray_stream(8, 0, 1, tag::CANDIDATE_JITTER);
        let set = depth_guided_samples(&ray, std::slice::from_ref(&view), &cfg, &mut rng);
        assert_eq!(set.len(), 40);
        for &t in &set.ts {
            assert!(
                (t - 2.0).abs() <= 4.0 * sigma,
                "sample {t} strayed from the surface"
            );
        }
    }

    #[test]
    fn samples_collapse_onto_surface_as_sigma_vanishes() {
        let view = frontal_view(2.0, 1e-4, 33, 33);
        let ray = test_ray();
        let cfg = SamplingConfig::default();
        let mut rng = ray_stream(9, 0, 2, tag::CANDIDATE_JITTER);
        let set = depth_guided_samples(&ray, std::slice::from_ref(&view), &cfg, &mut rng);
        let min_dist = set
            .ts
            .iter()
            .map(|t| (t - 2.0).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist <= candidate_delta(&ray, cfg.n_cand));
    }

    #[test]
    fn no_depth_evidence_falls_back_to_uniform_budget() {
        // Every projection misses the (tiny) depth map footprint.
        let mut view = frontal_view(2.0, 0.01, 9, 9);
        view.depth.valid.fill(false);
        let ray = test_ray();
        let cfg = SamplingConfig::default();
        let mut rng = ray_stream(10, 0, 3, tag::CANDIDATE_JITTER);
        let set = depth_guided_samples(&ray, std::slice::from_ref(&view), &cfg, &mut rng);
        assert_eq!(set.len(), cfg.total_samples());
        assert!(set.pooled_p.iter().all(|&p| p == 0.0));
        set.check_invariants().unwrap();
    }

    #[test]
    fn batch_likelihoods_match_scalar_op() {
        let view = frontal_view(2.0, 0.03, 33, 33);
        let ray = Ray::new(
            Vec3::new(0.1, -0.05, 0.0),
            Vec3::new(-0.05, 0.02, 1.0),
            1.0,
            3.0,
        );
        let ts = uniform_candidates(&ray, 64, None);
        let delta = candidate_delta(&ray, 64);
        let batch = per_view_likelihoods(&ray, &ts, &view, delta, false);
        for (j, &t) in ts.iter().enumerate() {
            let want = surface_likelihood(&ray.at(t), &view, delta);
            assert!(
                (batch[j] - want).abs() < 1e-15,
                "candidate {j}: batch {} vs scalar {want}",
                batch[j]
            );
        }
    }

    #[test]
    fn coarse_to_fine_zero_density_is_uniform() {
        let ray = test_ray();
        let zero = |_: &Vec3| 0.0;
        let mut all = Vec::new();
        for i in 0..2000u64 {
            let mut rng = ray_stream(11, 0, i, tag::COARSE_TO_FINE);
            let set = coarse_to_fine_samples(&ray, 16, &zero, &mut rng);
            set.check_invariants().unwrap();
            all.extend(set.ts);
        }
        let p = ks_uniform_pvalue(&mut all, ray.t_near, ray.t_far);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn coarse_to_fine_spike_concentrates_fine_samples() {
        let ray = test_ray();
        // Delta-like density inside a thin shell near t = 2.2.
        let spike = |x: &Vec3| {
            if (x.z - 2.2).abs() < 0.05 {
                500.0
            } else {
                0.0
            }
        };
        let mut rng = ray_stream(12, 0, 0, tag::COARSE_TO_FINE);
        let set = coarse_to_fine_samples(&ray, 32, &spike, &mut rng);
        // 16 coarse are uniform; all 16 fine draws must land in the spike's
        // stratum (width 0.125 around the first opaque bin).
        let fine_in_spike = set
            .ts
            .iter()
            .filter(|&&t| (t - 2.2).abs() < 0.125)
            .count();
        assert!(
            fine_in_spike >= 16,
            "only {fine_in_spike} samples near the spike"
        );
    }

    #[test]
    fn inverse_cdf_matches_rejection_sampling_oracle() {
        let ray = test_ray();
        let density = |x: &Vec3| if x.z > 1.8 && x.z < 2.6 { 2.0 } else { 0.2 };
        // Collect fine samples from many rays.
        let mut mine = Vec::new();
        for i in 0..400u64 {
            let mut rng = ray_stream(13, 0, i, tag::COARSE_TO_FINE);
            let n_coarse = 16;
            let set = coarse_to_fine_samples(&ray, 2 * n_coarse, &density, &mut rng);
            // Keep everything; the coarse half is the same for both samplers.
            mine.extend(set.ts);
        }
        // Rejection-sampling oracle with the same piecewise weight rule.
        let mut oracle = Vec::new();
        let mut rng = ray_stream(14, 0, 0, tag::COARSE_TO_FINE);
        let n_coarse = 16;
        let delta = (ray.t_far - ray.t_near) / n_coarse as f64;
        for _ in 0..400 {
            let coarse = uniform_candidates(&ray, n_coarse, Some(&mut rng));
            let mut weights = Vec::new();
            let mut trans = 1.0;
            for &t in &coarse {
                let sigma = density(&ray.at(t));
                let alpha = 1.0 - (-sigma * delta).exp();
                weights.push(trans * alpha);
                trans *= 1.0 - alpha;
            }
            let wmax = weights.iter().cloned().fold(0.0, f64::max);
            oracle.extend(coarse.iter().copied());
            let mut accepted = 0;
            while accepted < n_coarse {
                let bin = rng.gen_range(0..n_coarse);
                if rng.gen::<f64>() * wmax <= weights[bin] {
                    let t0 = ray.t_near + bin as f64 * delta;
                    oracle.push(t0 + rng.gen::<f64>() * delta);
                    accepted += 1;
                }
            }
        }
        let p = ks_two_sample_pvalue(&mut mine, &mut oracle);
        assert!(p > 0.01, "two-sample KS p-value {p}");
    }

    proptest! {
        #[test]
        fn pooled_dominates_every_row(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 16),
                1..5,
            ),
        ) {
            let pooled = pool_likelihoods(&rows);
            for row in &rows {
                for (p, v) in pooled.iter().zip(row.iter()) {
                    prop_assert!(p >= v);
                }
            }
        }

        #[test]
        fn earlier_evidence_weakly_decreases_later_termination(
            p in proptest::collection::vec(0.0f64..1.0, 2..30),
            insert in 0.01f64..1.0,
        ) {
            let base = occlusion_aware(&p);
            let mut augmented = vec![insert];
            augmented.extend(&p);
            let aug = occlusion_aware(&augmented);
            for (&b, &a) in base.iter().zip(aug[1..].iter()) {
                prop_assert!(a <= b + 1e-15);
            }
            prop_assert!(aug.iter().sum::<f64>() <= 1.0 + 1e-9);
        }

        #[test]
        fn merged_samples_sorted_unique_in_bounds(seed in 0u64..500) {
            let view = frontal_view(2.0, 0.02, 17, 17);
            let ray = test_ray();
            let cfg = SamplingConfig {
                n_cand: 200,
                n_shortlist: 9,
                n_gauss: 7,
                backface: true,
            };
            let mut rng = ray_stream(seed, 0, 0, tag::CANDIDATE_JITTER);
            let set = depth_guided_samples(&ray, std::slice::from_ref(&view), &cfg, &mut rng);
            prop_assert!(set.check_invariants().is_ok());
            for w in set.ts.windows(2) {
                prop_assert!(w[1] - w[0] > 1e-9);
            }
            prop_assert!(set.ts.first().copied().unwrap_or(ray.t_near) >= ray.t_near);
            prop_assert!(set.ts.last().copied().unwrap_or(ray.t_near) <= ray.t_far);
        }
    }
}
