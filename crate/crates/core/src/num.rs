//! Float helpers routed through `libm`.
//!
//! Keeping every transcendental call on the `libm` implementations makes the
//! numerical output bit-identical between `std` and `no_std` builds, which
//! the determinism contracts of the solvers rely on.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// `a+` — the positive part.
#[inline]
pub fn pos(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `a-` — the negative part (non-negative by convention).
#[inline]
pub fn neg(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// log2 of a ratio, used by observed-order estimates.
#[inline]
pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}
