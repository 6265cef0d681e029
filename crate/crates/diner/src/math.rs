//! Scalar numerics: error function and Gaussian CDF.
//!
//! The surface-likelihood integral reduces to a difference of Gaussian CDFs,
//! so `erf` accuracy directly bounds the sampling engine's accuracy. The
//! implementation uses the Maclaurin series for small arguments and the
//! Legendre continued fraction for the complementary function at large
//! arguments; both converge to full f64 precision with no tabulated
//! coefficients to get wrong.

use std::f64::consts::PI;

const FRAC_2_SQRT_PI: f64 = 1.128_379_167_095_512_6; // 2/sqrt(pi)
const SERIES_CF_SPLIT: f64 = 3.0;

/// Error function, accurate to ~1e-14 absolute over the full range.
///
/// Odd symmetry is exact: erf(-x) computes as -erf(x) bit for bit.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let val = if ax <= SERIES_CF_SPLIT {
        erf_series(ax)
    } else {
        1.0 - erfc_cf(ax)
    };
    if x.is_sign_negative() {
        -val
    } else {
        val
    }
}

/// Complementary error function; keeps relative accuracy in the far tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= SERIES_CF_SPLIT {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

// Maclaurin series erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1)).
// For x <= 3 the largest term exceeds the result by at most ~e^9, so about
// four decimal digits cancel; the 1e-18 term cutoff still leaves ~1e-13
// absolute accuracy at the seam and much better below it.
fn erf_series(x: f64) -> f64 {
    debug_assert!((0.0..=SERIES_CF_SPLIT + 1e-12).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    let x2 = x * x;
    let mut power = x; // (-1)^n x^(2n+1) / n!
    let mut sum = x;
    for n in 1..300u32 {
        power *= -x2 / n as f64;
        let term = power / (2 * n + 1) as f64;
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-30) {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

// Legendre continued fraction, evaluated bottom-up with a fixed depth:
//   erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// Converges quickly for x >= 3.
fn erfc_cf(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut tail = 0.0;
    for k in (1..=200u32).rev() {
        tail = (0.5 * k as f64) / (x + tail);
    }
    (-x * x).exp() / (PI.sqrt() * (x + tail))
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability mass of N(mu, sigma^2) in the interval [lo, hi].
pub fn gaussian_interval_mass(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    standardized_mass((lo - mu) / (sigma * std::f64::consts::SQRT_2), (hi - mu) / (sigma * std::f64::consts::SQRT_2))
}

/// Probability mass of N(mu, sigma^2) in the slab of the given width
/// centered at z.
///
/// The center offset z - mu is formed before the half-width is applied, so
/// mirrored inputs (z = mu + a vs z = mu - a) produce bit-identical masses
/// whenever the offsets themselves mirror exactly.
pub fn gaussian_slab_mass(mu: f64, sigma: f64, z: f64, width: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    debug_assert!(width >= 0.0);
    let d0 = z - mu;
    let s = sigma * std::f64::consts::SQRT_2;
    standardized_mass((d0 - width * 0.5) / s, (d0 + width * 0.5) / s)
}

fn standardized_mass(a: f64, b: f64) -> f64 {
    if a >= 6.5 || b <= -6.5 {
        // Both endpoints in the same saturated tail of erf; the difference
        // still underflows gracefully through erfc.
        let m = 0.5 * (erfc(a.min(b)) - erfc(a.max(b))).abs();
        return m.clamp(0.0, 1.0);
    }
    (0.5 * (erf(b) - erf(a))).clamp(0.0, 1.0)
}

/// Asymptotic Kolmogorov distribution Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2);
/// the p-value of a scaled KS statistic.
pub fn kolmogorov_pvalue(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test p-value against the uniform distribution on [lo, hi].
pub fn ks_uniform_pvalue(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    assert!(hi > lo && !samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    kolmogorov_pvalue(n.sqrt() * d)
}

/// Two-sample KS test p-value.
pub fn ks_two_sample_pvalue(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    a.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    kolmogorov_pvalue(ne * d)
}

#[cfg(test)]
pub(crate) mod quadrature {
    //! Adaptive Simpson quadrature of the Gaussian density; the independent
    //! oracle for everything erf-based. Test-only.

    use std::f64::consts::PI;

    pub fn gauss_mass(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
        let pdf = |z: f64| {
            let u = (z - mu) / sigma;
            (-0.5 * u * u).exp() / (sigma * (2.0 * PI).sqrt())
        };
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, eps: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * eps {
                left + right + (left + right - whole) / 15.0
            } else {
                adapt(f, a, m, left, eps * 0.5, depth - 1)
                    + adapt(f, m, b, right, eps * 0.5, depth - 1)
            }
        }
        adapt(&pdf, lo, hi, simpson(&pdf, lo, hi), 1e-14, 48)
    }
}

#[cfg(test)]
mod tests {
    use super::quadrature::gauss_mass;
    use super::*;

    #[test]
    fn erf_reference_values() {
        let cases = [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.0, 0.999_977_909_503_001_4),
        ];
        for (x, want) in cases {
            assert!(
                (erf(x) - want).abs() < 1e-13,
                "erf({x}) = {}, want {want}",
                erf(x)
            );
        }
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn erf_odd_symmetry_exact() {
        for &x in &[0.1, 0.75, 1.5, 2.5, 4.0, 7.0] {
            assert_eq!(erf(-x).to_bits(), (-erf(x)).to_bits());
        }
    }

    #[test]
    fn erf_continuous_across_series_cf_seam() {
        let below = erf(SERIES_CF_SPLIT - 1e-9);
        let above = erf(SERIES_CF_SPLIT + 1e-9);
        assert!(
            (below - above).abs() < 1e-12,
            "seam jump: {below} vs {above}"
        );
    }

    #[test]
    fn erfc_tail_reference_values() {
        // erfc(4) and erfc(5) to published precision.
        assert!((erfc(4.0) - 1.541_725_790_028_002e-8).abs() < 1e-21);
        assert!((erfc(5.0) - 1.537_459_794_428_035e-12).abs() < 1e-25);
    }

    #[test]
    fn normal_cdf_matches_quadrature() {
        for i in 0..200 {
            let x = -6.0 + 12.0 * (i as f64 + 0.5) / 200.0;
            let q = gauss_mass(0.0, 1.0, -40.0, x);
            let got = normal_cdf(x);
            assert!((got - q).abs() < 1e-12, "Phi({x}) = {got}, quadrature {q}");
        }
    }

    #[test]
    fn erfc_tail_matches_quadrature() {
        // Beyond x ~ 4 the quadrature oracle's absolute tolerance dominates
        // the tiny tail mass, so the relative check stops there; the far
        // tail is pinned against published values instead.
        for &x in &[2.1, 2.5, 3.0, 3.5] {
            let q = 2.0 * gauss_mass(0.0, 1.0, -40.0, -x * std::f64::consts::SQRT_2);
            let got = erfc(x);
            assert!(
                (got - q).abs() < 1e-12 && (got - q).abs() < 1e-6 * q.abs().max(1e-30),
                "erfc({x}) = {got}, quadrature {q}"
            );
        }
    }

    #[test]
    fn erfc_far_tail_is_tiny_but_positive() {
        let v = erfc(10.0);
        assert!(v > 0.0 && v < 1e-43, "erfc(10) = {v}");
    }

    #[test]
    fn slab_mass_symmetry_exact_for_mirrored_offsets() {
        // Offsets that are exact in binary, so z - mu mirrors bit for bit.
        let (mu, sigma, delta) = (2.0, 0.1, 0.01);
        for &a in &[0.0625, 0.125, 0.3125] {
            let hi = gaussian_slab_mass(mu, sigma, mu + a, delta);
            let lo = gaussian_slab_mass(mu, sigma, mu - a, delta);
            assert_eq!(hi.to_bits(), lo.to_bits());
        }
    }

    #[test]
    fn slab_mass_matches_interval_mass() {
        for &(mu, sigma, z, w) in &[(2.0, 0.1, 2.03, 0.01), (0.5, 0.02, 0.48, 0.004)] {
            let a = gaussian_slab_mass(mu, sigma, z, w);
            let b = gaussian_interval_mass(mu, sigma, z - w / 2.0, z + w / 2.0);
            assert!((a - b).abs() < 1e-15);
        }
    }
}
