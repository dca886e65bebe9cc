//! Gaussian densities and tails for the tree free field.
//!
//! With branching number `d`, the root field is `N(0, d/(d-1))` and each
//! child receives `parent/d + Y` with `Y ~ N(0, (d+1)/d)`.

use libm::erfc;
use std::f64::consts::{PI, SQRT_2};

/// Variance of the field marginal `ν`.
pub fn sigma_nu2(d: u32) -> f64 {
    let d = d as f64;
    d / (d - 1.0)
}

/// Variance of the innovation `Y`.
pub fn sigma_y2(d: u32) -> f64 {
    let d = d as f64;
    (d + 1.0) / d
}

/// Centred normal density with variance `var`.
#[inline]
pub fn normal_pdf(z: f64, var: f64) -> f64 {
    (-0.5 * z * z / var).exp() / (2.0 * PI * var).sqrt()
}

/// `P(X > z)` for `X ~ N(0, var)`.
pub fn upper_tail(z: f64, var: f64) -> f64 {
    0.5 * erfc(z / (SQRT_2 * var.sqrt()))
}

/// `P(a ≤ X ≤ b)` for `X ~ N(0, var)`, computed from whichever tail is smaller.
pub fn interval_mass(a: f64, b: f64, var: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        upper_tail(a, var) - upper_tail(b, var)
    } else if b <= 0.0 {
        upper_tail(-b, var) - upper_tail(-a, var)
    } else {
        1.0 - upper_tail(-a, var) - upper_tail(b, var)
    }
}

/// Smallest `z ≥ 0` with `P(X > z) < tol`, to within `1e-9`.
pub fn upper_quantile(tol: f64, var: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while upper_tail(hi, var) >= tol {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if upper_tail(mid, var) < tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variances() {
        assert_eq!(sigma_nu2(2), 2.0);
        assert_eq!(sigma_nu2(3), 1.5);
        assert!((sigma_y2(3) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tails_are_consistent() {
        assert!((upper_tail(0.0, 2.0) - 0.5).abs() < 1e-15);
        let m = interval_mass(-1.0, 2.0, 1.5);
        let n = 1.0 - upper_tail(2.0, 1.5) - upper_tail(1.0, 1.5);
        assert!((m - n).abs() < 1e-15);
        let q = upper_quantile(1e-12, 1.0);
        assert!(upper_tail(q, 1.0) < 1e-12);
        assert!(upper_tail(q - 1e-6, 1.0) >= 1e-12);
    }
}
