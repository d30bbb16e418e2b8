//! Standard normal distribution helpers.

use statrs::function::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / SQRT_2)
}

/// Upper tail `1 - Φ(x)`, computed without cancellation.
pub fn sf(x: f64) -> f64 {
    0.5 * erf::erfc(x / SQRT_2)
}

/// Two-sided tail `G(t) = 2 - 2Φ(t)`.
pub fn two_sided_tail(t: f64) -> f64 {
    erf::erfc(t / SQRT_2)
}

/// Standard normal quantile `Φ^{-1}(p)`.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erf::erfc_inv(2.0 * p)
}

/// Inverse of the two-sided tail: the `t ≥ 0` with `G(t) = q`, for `q ∈ (0, 1]`.
pub fn two_sided_tail_inv(q: f64) -> f64 {
    if q >= 1.0 {
        return 0.0;
    }
    if q <= 0.0 {
        return f64::INFINITY;
    }
    SQRT_2 * erf::erfc_inv(q)
}

/// `z_{α/2} = Φ^{-1}(1 - α/2)`.
pub fn z_half_alpha(alpha: f64) -> f64 {
    two_sided_tail_inv(alpha)
}
