// Thin libm wrappers so the same code builds with and without std.

pub(crate) use core::f64::consts::{PI, TAU};

#[inline]
pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub(crate) fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
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
pub(crate) fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub(crate) fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub(crate) fn expf(x: f32) -> f32 {
    libm::expf(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Wraps an angle into `[-pi, pi)`.
pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut w = a - TAU * floor((a + PI) / TAU);
    if w >= PI {
        w -= TAU;
    }
    if w < -PI {
        w += TAU;
    }
    w
}

pub(crate) fn l2_norm(v: &[f32]) -> f32 {
    let s: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    sqrt(s) as f32
}

/// Normalizes in place; returns false (and leaves zeros) for a zero vector.
pub(crate) fn normalize(v: &mut [f32]) -> bool {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        let inv = 1.0 / n;
        v.iter_mut().for_each(|x| *x *= inv);
        true
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        false
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}
