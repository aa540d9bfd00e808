use super::{Grid3, Real};
use crate::error::{config_err, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Real>(input: &Grid3<T>, slope: T) -> Grid3<T> {
    input.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient w.r.t. the pre-activation; the kink at zero takes the negative-side slope.
pub fn leaky_relu_backward<T: Real>(
    input: &Grid3<T>,
    grad_out: &Grid3<T>,
    slope: T,
) -> Result<Grid3<T>> {
    if !input.same_dims(grad_out) {
        return config_err("leaky_relu backward: shape mismatch");
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.values_mut().iter_mut().zip(input.values()) {
        if x <= T::zero() {
            *gv *= slope;
        }
    }
    Ok(g)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Grid3<T>) -> Grid3<T> {
    input.map(sigmoid_scalar)
}

/// Backward from the sigmoid *output*.
pub fn sigmoid_backward<T: Real>(output: &Grid3<T>, grad_out: &Grid3<T>) -> Result<Grid3<T>> {
    if !output.same_dims(grad_out) {
        return config_err("sigmoid backward: shape mismatch");
    }
    let mut g = grad_out.clone();
    for (gv, &s) in g.values_mut().iter_mut().zip(output.values()) {
        *gv *= s * (T::one() - s);
    }
    Ok(g)
}
