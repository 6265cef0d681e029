//! Losses and image-quality metrics.
//!
//! The anti-bias term is an l1 loss on average-pooled patches: it kills
//! color shifts without penalizing high-frequency misalignment, so it can
//! accompany a perceptual loss without reintroducing low-frequency bias.
//! The perceptual loss itself is only a hook here; its default weight is 0.

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub w_l1: f64,
    /// Weight of the pluggable perceptual loss; no implementation ships, so
    /// the effective default is 0. (0.1 pairs with an actual hook.)
    pub w_vgg: f64,
    pub w_ab: f64,
    /// Average-pooling factor of the anti-bias term.
    pub ab_downsample_k: usize,
    pub patch_size: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            w_l1: 1.0,
            w_vgg: 0.0,
            w_ab: 5.0,
            ab_downsample_k: 8,
            patch_size: 64,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.w_l1 < 0.0 || self.w_vgg < 0.0 || self.w_ab < 0.0 {
            return Err(ObjectiveError::ShapeMismatch(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.patch_size % self.ab_downsample_k != 0 {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "patch size {} not divisible by pooling factor {}",
                self.patch_size, self.ab_downsample_k
            )));
        }
        Ok(())
    }
}

/// Optional perceptual-loss callback: returns the loss and its gradient
/// with respect to the prediction.
pub trait VggHook: Sync {
    fn eval(&self, pred: &Grid, target: &Grid) -> (f64, Grid);
}

fn check_same_shape(a: &Grid, b: &Grid) -> Result<(), ObjectiveError> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn loss_l1(pred: &Grid, target: &Grid) -> Result<f64, ObjectiveError> {
    check_same_shape(pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// k x k average pooling; dimensions must divide evenly.
pub fn avg_pool(g: &Grid, k: usize) -> Result<Grid, ObjectiveError> {
    if k == 0 || g.height() % k != 0 || g.width() % k != 0 {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{}x{} not divisible by pooling factor {k}",
            g.height(),
            g.width()
        )));
    }
    let (hp, wp, c) = (g.height() / k, g.width() / k, g.channels());
    let inv = 1.0 / (k * k) as f64;
    let mut out = Grid::zeros(hp, wp, c);
    for y in 0..hp {
        for x in 0..wp {
            let texel = out.texel_mut(y, x);
            for dy in 0..k {
                for dx in 0..k {
                    let src = g.texel(y * k + dy, x * k + dx);
                    for (o, &v) in texel.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            for v in texel.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Mean absolute difference of k x k average-pooled patches.
pub fn loss_anti_bias(pred: &Grid, target: &Grid, k: usize) -> Result<f64, ObjectiveError> {
    check_same_shape(pred, target)?;
    loss_l1(&avg_pool(pred, k)?, &avg_pool(target, k)?)
}

/// Weighted objective plus its analytic gradient with respect to the
/// prediction. The l1 subgradient at exact ties is 0.
pub fn total_loss(
    pred: &Grid,
    target: &Grid,
    cfg: &ObjectiveConfig,
    vgg: Option<&dyn VggHook>,
) -> Result<(f64, Grid), ObjectiveError> {
    check_same_shape(pred, target)?;
    cfg.validate()?;
    let mut grad = Grid::zeros(pred.height(), pred.width(), pred.channels());
    let mut loss = 0.0;

    if cfg.w_l1 > 0.0 {
        let n = pred.data().len() as f64;
        let mut acc = 0.0;
        for ((g, &p), &t) in grad
            .data_mut()
            .iter_mut()
            .zip(pred.data())
            .zip(target.data())
        {
            let diff = p - t;
            acc += diff.abs();
            *g += cfg.w_l1 * sign(diff) / n;
        }
        loss += cfg.w_l1 * acc / n;
    }

    if cfg.w_ab > 0.0 {
        let k = cfg.ab_downsample_k;
        let pooled_pred = avg_pool(pred, k)?;
        let pooled_target = avg_pool(target, k)?;
        let m = pooled_pred.data().len() as f64;
        let mut acc = 0.0;
        let scale = cfg.w_ab / (m * (k * k) as f64);
        for yp in 0..pooled_pred.height() {
            for xp in 0..pooled_pred.width() {
                let pp = pooled_pred.texel(yp, xp);
                let pt = pooled_target.texel(yp, xp);
                for c in 0..pred.channels() {
                    let diff = pp[c] - pt[c];
                    acc += diff.abs();
                    let s = sign(diff) * scale;
                    if s != 0.0 {
                        for dy in 0..k {
                            for dx in 0..k {
                                grad.texel_mut(yp * k + dy, xp * k + dx)[c] += s;
                            }
                        }
                    }
                }
            }
        }
        loss += cfg.w_ab * acc / m;
    }

    if cfg.w_vgg > 0.0 {
        if let Some(hook) = vgg {
            let (l, g) = hook.eval(pred, target);
            loss += cfg.w_vgg * l;
            for (o, &v) in grad.data_mut().iter_mut().zip(g.data()) {
                *o += cfg.w_vgg * v;
            }
        }
    }
    Ok((loss, grad))
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar image-quality metrics over [0, 1] images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub l2: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR is capped at 99 dB below this mean-squared-error floor.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP: f64 = 99.0;

pub fn metrics(pred: &Grid, target: &Grid) -> Result<Metrics, ObjectiveError> {
    check_same_shape(pred, target)?;
    let n = pred.data().len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let d = a - b;
        l1 += d.abs();
        l2 += d * d;
    }
    l1 /= n;
    l2 /= n;
    let psnr = if l2 < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        -10.0 * l2.log10()
    };
    // SSIM needs the full 11x11 window; report NaN for smaller images.
    let ssim = if pred.height() >= SSIM_WINDOW && pred.width() >= SSIM_WINDOW {
        ssim(pred, target)?
    } else {
        f64::NAN
    };
    Ok(Metrics { l1, l2, psnr, ssim })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

// Valid-region separable Gaussian filter of one channel.
fn blur_valid(img: &Grid, channel: usize, window: &[f64; SSIM_WINDOW]) -> Vec<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = vec![vec![0.0; wo]; h];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &wv) in window.iter().enumerate() {
                acc += wv * img.get(y, x + i, channel);
            }
            horiz[y][x] = acc;
        }
    }
    let mut out = vec![vec![0.0; wo]; ho];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &wv) in window.iter().enumerate() {
                acc += wv * horiz[y + i][x];
            }
            out[y][x] = acc;
        }
    }
    out
}

/// Windowed SSIM (11 x 11 Gaussian, sigma 1.5, dynamic range 1), averaged
/// over valid window positions and channels.
pub fn ssim(pred: &Grid, target: &Grid) -> Result<f64, ObjectiveError> {
    check_same_shape(pred, target)?;
    if pred.height() < SSIM_WINDOW || pred.width() < SSIM_WINDOW {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "image {}x{} smaller than the {}x{} ssim window",
            pred.height(),
            pred.width(),
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    let window = gaussian_window();
    let sq = |g: &Grid, c: usize| {
        let mut s = Grid::zeros(g.height(), g.width(), 1);
        for y in 0..g.height() {
            for x in 0..g.width() {
                let v = g.get(y, x, c);
                s.set(y, x, 0, v * v);
            }
        }
        s
    };
    let prod = |a: &Grid, b: &Grid, c: usize| {
        let mut s = Grid::zeros(a.height(), a.width(), 1);
        for y in 0..a.height() {
            for x in 0..a.width() {
                s.set(y, x, 0, a.get(y, x, c) * b.get(y, x, c));
            }
        }
        s
    };
    let mut total = 0.0;
    for c in 0..pred.channels() {
        let mu_x = blur_valid(pred, c, &window);
        let mu_y = blur_valid(target, c, &window);
        let xx = blur_valid(&sq(pred, c), 0, &window);
        let yy = blur_valid(&sq(target, c), 0, &window);
        let xy = blur_valid(&prod(pred, target, c), 0, &window);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..mu_x.len() {
            for x in 0..mu_x[0].len() {
                let (mx, my) = (mu_x[y][x], mu_y[y][x]);
                let vx = xx[y][x] - mx * mx;
                let vy = yy[y][x] - my * my;
                let cov = xy[y][x] - mx * my;
                let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / pred.channels() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> Grid {
        let mut rng = crate::rng::stream(seed, crate::rng::tag::INIT, 77);
        Grid::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn l1_basics() {
        let a = random_grid(8, 8, 3, 1);
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for v in b.data_mut().iter_mut() {
            *v += 0.1;
        }
        assert!((loss_l1(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_direct_summation_oracle() {
        let a = random_grid(7, 9, 3, 2);
        let b = random_grid(7, 9, 3, 3);
        let mut acc = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                for c in 0..3 {
                    acc += (a.get(y, x, c) - b.get(y, x, c)).abs();
                }
            }
        }
        let want = acc / (7.0 * 9.0 * 3.0);
        assert!((loss_l1(&a, &b).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn anti_bias_ignores_zero_mean_checkerboard() {
        // Exactly representable values, so pooling cancels bit for bit.
        let target = Grid::from_fn(16, 16, 3, |_, _, _| 0.5);
        let pred = Grid::from_fn(16, 16, 3, |y, x, _| {
            if (x + y) % 2 == 0 {
                0.5 + 0.0625
            } else {
                0.5 - 0.0625
            }
        });
        assert_eq!(loss_anti_bias(&pred, &target, 8).unwrap(), 0.0);
        assert!(loss_l1(&pred, &target).unwrap() > 0.06);
        // On arbitrary values the cancellation holds to round-off.
        let noisy_target = random_grid(16, 16, 3, 4);
        let mut noisy_pred = noisy_target.clone();
        for y in 0..16 {
            for x in 0..16 {
                let s = if (x + y) % 2 == 0 { 0.02 } else { -0.02 };
                for c in 0..3 {
                    let v = noisy_pred.get(y, x, c) + s;
                    noisy_pred.set(y, x, c, v);
                }
            }
        }
        assert!(loss_anti_bias(&noisy_pred, &noisy_target, 8).unwrap() < 1e-15);
    }

    #[test]
    fn anti_bias_preserves_constant_offsets() {
        let target = random_grid(16, 16, 3, 5);
        let mut pred = target.clone();
        for v in pred.data_mut().iter_mut() {
            *v += 0.1;
        }
        assert!((loss_anti_bias(&pred, &target, 8).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pooling_64_by_8_gives_8x8() {
        let g = random_grid(64, 64, 3, 6);
        let pooled = avg_pool(&g, 8).unwrap();
        assert_eq!((pooled.height(), pooled.width()), (8, 8));
    }

    #[test]
    fn total_loss_reduces_to_l1_without_other_terms() {
        let a = random_grid(16, 16, 3, 7);
        let b = random_grid(16, 16, 3, 8);
        let cfg = ObjectiveConfig {
            w_ab: 0.0,
            w_vgg: 0.0,
            patch_size: 16,
            ..Default::default()
        };
        let (loss, _) = total_loss(&a, &b, &cfg, None).unwrap();
        assert!((loss - loss_l1(&a, &b).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let pred = random_grid(8, 8, 3, 9);
        let mut target = random_grid(8, 8, 3, 10);
        // Keep element and pooled differences away from the l1 kink.
        for (t, &p) in target.data_mut().iter_mut().zip(pred.data()) {
            if (p - *t).abs() < 0.05 {
                *t = p - 0.1;
            }
        }
        let cfg = ObjectiveConfig {
            ab_downsample_k: 4,
            patch_size: 8,
            ..Default::default()
        };
        let (_, grad) = total_loss(&pred, &target, &cfg, None).unwrap();
        let mut rng = crate::rng::stream(11, crate::rng::tag::INIT, 0);
        let h = 1e-6;
        for _ in 0..60 {
            let idx = rng.gen_range(0..pred.data().len());
            let mut up = pred.clone();
            up.data_mut()[idx] += h;
            let mut dn = pred.clone();
            dn.data_mut()[idx] -= h;
            let (lu, _) = total_loss(&up, &target, &cfg, None).unwrap();
            let (ld, _) = total_loss(&dn, &target, &cfg, None).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let g = grad.data()[idx];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-5, "index {idx}: fd {fd} vs analytic {g}");
        }
    }

    #[test]
    fn vgg_hook_contributes_when_weighted() {
        struct Mock;
        impl VggHook for Mock {
            fn eval(&self, pred: &Grid, _target: &Grid) -> (f64, Grid) {
                (2.0, Grid::zeros(pred.height(), pred.width(), pred.channels()))
            }
        }
        let a = random_grid(8, 8, 3, 12);
        let cfg = ObjectiveConfig {
            w_l1: 0.0,
            w_ab: 0.0,
            w_vgg: 0.1,
            ab_downsample_k: 4,
            patch_size: 8,
        };
        let (loss, _) = total_loss(&a, &a, &cfg, Some(&Mock)).unwrap();
        assert!((loss - 0.2).abs() < 1e-14);
        // Absent hook contributes nothing.
        let (loss, _) = total_loss(&a, &a, &cfg, None).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn metrics_of_identical_images() {
        let a = random_grid(32, 32, 3, 13);
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.l2, 0.0);
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = Grid::zeros(16, 16, 3);
        let b = Grid::from_fn(16, 16, 3, |_, _, _| 0.1);
        let m = metrics(&a, &b).unwrap();
        assert!((m.l2 - 0.01).abs() < 1e-15);
        assert!((m.psnr - 20.0).abs() < 1e-12);
    }

    // Direct per-window SSIM oracle, no separable shortcuts.
    fn ssim_oracle(a: &Grid, b: &Grid) -> f64 {
        let window = gaussian_window();
        let mut total = 0.0;
        for c in 0..a.channels() {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..a.height() - SSIM_WINDOW + 1 {
                for x0 in 0..a.width() - SSIM_WINDOW + 1 {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut xx = 0.0;
                    let mut yy = 0.0;
                    let mut xy = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wv = window[dy] * window[dx];
                            let pa = a.get(y0 + dy, x0 + dx, c);
                            let pb = b.get(y0 + dy, x0 + dx, c);
                            mx += wv * pa;
                            my += wv * pb;
                            xx += wv * pa * pa;
                            yy += wv * pb * pb;
                            xy += wv * pa * pb;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cov = xy - mx * my;
                    acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / a.channels() as f64
    }

    #[test]
    fn ssim_matches_reference_formula() {
        let a = random_grid(32, 32, 3, 14);
        let b = random_grid(32, 32, 3, 15);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn anti_bias_never_exceeds_l1(seed in 0u64..1000) {
            let a = random_grid(16, 16, 3, seed);
            let b = random_grid(16, 16, 3, seed + 10_000);
            let l1 = loss_l1(&a, &b).unwrap();
            let ab = loss_anti_bias(&a, &b, 8).unwrap();
            prop_assert!(ab <= l1 + 1e-12);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..200) {
            let a = random_grid(16, 16, 1, seed);
            let b = random_grid(16, 16, 1, seed + 999);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
