//! Float math shims. In a `no_std` build the `f64` transcendental methods are
//! unavailable, so everything routes through `libm`; this also keeps results
//! bit-identical across platforms.

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

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
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
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

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Log-density of the standard normal in `dim` dimensions at squared radius `sq_norm`.
#[inline]
pub fn std_normal_log_density(sq_norm: f64, dim: usize) -> f64 {
    -0.5 * (dim as f64) * LN_2PI - 0.5 * sq_norm
}
