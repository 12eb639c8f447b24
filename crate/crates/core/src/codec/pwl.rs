//! Piecewise-linear CDF math shared by the entropy model and the latent
//! entropy-loss op.
//!
//! A channel's distribution over integer symbols in [-R, R-1] is built from
//! B = 2R unconstrained reals ψ: bin increments g_j = softplus(ψ_j) > 0,
//! normalized by G = Σ g_j. The CDF is linear between knots at half-integer
//! boundaries b_j = -R - 0.5 + j, so CDF(-R-0.5) = 0 and CDF(R-0.5) = 1
//! exactly and monotonicity holds by construction. A unit-width interval
//! [z-0.5, z+0.5] then carries mass (overlap-weighted sum of increments)/G,
//! and for integer z this reduces to g_{z+R}/G.

use crate::tensor::Scalar;

/// Numerically stable ln(1 + e^x).
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x > T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Positive bin increments from raw parameters.
pub fn increments<T: Scalar>(psi: &[T]) -> Vec<T> {
    psi.iter().map(|&p| softplus(p)).collect()
}

/// CDF at an arbitrary point, given increments. Clamps outside the support.
pub fn cdf<T: Scalar>(g: &[T], x: T) -> T {
    let b = g.len();
    let r_half = T::from_f64(b as f64 / 2.0 + 0.5);
    let pos = x + r_half; // offset from the left knot, in [0, B]
    if pos <= T::ZERO {
        return T::ZERO;
    }
    let total: T = g.iter().fold(T::ZERO, |acc, &v| acc + v);
    let j = pos.to_f64().floor() as usize;
    if j >= b {
        return T::ONE;
    }
    let mut acc = T::ZERO;
    for &v in &g[..j] {
        acc += v;
    }
    let t = pos - T::from_f64(j as f64);
    (acc + g[j] * t) / total
}

/// Mass of the unit interval [z-0.5, z+0.5] for an already-clamped z in
/// [-R, R-1]. Returns (numerator, bin of the left edge, bin of the right
/// edge); probability is numerator / Σg.
pub fn unit_interval_numerator<T: Scalar>(g: &[T], z: T) -> (T, usize, usize) {
    let b = g.len();
    let r = b / 2;
    let a_pos = z.to_f64() + r as f64; // z - 0.5 offset from left knot
    let ja = (a_pos.floor() as isize).clamp(0, b as isize - 1) as usize;
    let jb = ((a_pos + 1.0).floor() as isize).clamp(0, b as isize - 1) as usize;
    let mut num = T::ZERO;
    for l in ja..=jb {
        let lo = a_pos.max(l as f64);
        let hi = (a_pos + 1.0).min(l as f64 + 1.0);
        if hi > lo {
            num += g[l] * T::from_f64(hi - lo);
        }
    }
    (num, ja, jb)
}

/// Probability of integer symbol k under the increments; exact ratio
/// g_{k+R} / G with no floor applied.
pub fn symbol_prob_raw(g: &[f64], k: i32) -> f64 {
    let r = (g.len() / 2) as i32;
    debug_assert!(k >= -r && k < r);
    let total: f64 = g.iter().sum();
    g[(k + r) as usize] / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!(softplus(-200.0f64) > 0.0);
        assert!((softplus(200.0f64) - 200.0).abs() < 1e-9);
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cdf_endpoints_are_exact() {
        let g = increments(&[0.3f64, -1.0, 2.0, 0.0]);
        assert_eq!(cdf(&g, -2.5), 0.0);
        assert_eq!(cdf(&g, 1.5), 1.0);
        assert!(cdf(&g, 10.0) == 1.0 && cdf(&g, -10.0) == 0.0);
    }

    #[test]
    fn cdf_is_monotone() {
        let g = increments(&[0.5f64, -0.2, 1.3, -2.0, 0.7, 0.1]);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let x = -3.5 + 7.0 * i as f64 / 1000.0;
            let c = cdf(&g, x);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn integer_symbol_mass_matches_increment_ratio() {
        let g = increments(&[0.1f64, 0.4, -0.3, 0.9]);
        let total: f64 = g.iter().sum();
        for k in -2..2 {
            let (num, _, _) = unit_interval_numerator(&g, k as f64);
            let p = symbol_prob_raw(&g, k);
            assert!((num / total - p).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_mass_equals_cdf_difference() {
        let g = increments(&[0.5f64, -0.7, 0.2, 1.1, -0.1, 0.3]);
        let total: f64 = g.iter().sum();
        for &z in &[-2.7f64, -1.3, 0.0, 0.49, 1.9] {
            let (num, _, _) = unit_interval_numerator(&g, z);
            let want = cdf(&g, z + 0.5) - cdf(&g, z - 0.5);
            assert!((num / total - want).abs() < 1e-12, "z={z}");
        }
    }
}
