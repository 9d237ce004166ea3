//! Scalar functions for `no_std` builds, backed by `libm`.

use core::f64::consts::{FRAC_1_SQRT_2, PI};

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

/// Standard normal cumulative distribution.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x) / sqrt(2.0 * PI)
}

/// Two-sided tail mass `1 - P(|N(0,1)| ≤ x)`, i.e. `erfc(x/√2)`.
///
/// This is the confidence map used by the Gaussian centering program:
/// it equals 1 at `x = 0` and decreases to 0.
#[inline]
pub fn two_sided_tail(x: f64) -> f64 {
    libm::erfc(x * FRAC_1_SQRT_2)
}
