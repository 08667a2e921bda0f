//! Thin wrappers over `libm` so every build (std or not) uses the same
//! floating-point routines and stays bitwise reproducible.

pub(crate) use core::f64::consts::PI;

#[inline]
pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub(crate) fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + exp(-t))
    } else {
        let e = exp(t);
        e / (1.0 + e)
    }
}

/// Euclidean remainder into `[0, m)`.
#[inline]
pub(crate) fn rem_euclid(x: f64, m: f64) -> f64 {
    let r = x - m * floor(x / m);
    // `x` just below a multiple of `m` can round up to exactly `m`.
    if r >= m {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `[-pi, pi)`.
#[inline]
pub(crate) fn wrap_angle(a: f64) -> f64 {
    rem_euclid(a + PI, 2.0 * PI) - PI
}
