use super::{Grid3, LayerKind, LayerParams, Real};
use crate::error::{config_err, Result};

fn check<T: Real>(input: &Grid3<T>, params: &LayerParams<T>) -> Result<(usize, usize)> {
    let LayerKind::Linear { c_in, c_out } = params.kind else {
        return config_err(format!("layer {} is not a linear layer", params.name));
    };
    if c_in != input.depth() {
        return config_err(format!(
            "layer {} expects depth {c_in}, got {}",
            params.name,
            input.depth()
        ));
    }
    Ok((c_in, c_out))
}

/// `out(y, x) = W^T in(y, x) + b` at every spatial position.
pub fn linear_forward<T: Real>(input: &Grid3<T>, params: &LayerParams<T>) -> Result<Grid3<T>> {
    let (c_in, c_out) = check(input, params)?;
    let p = input.height() * input.width();
    let mut out = Vec::with_capacity(p * c_out);
    for _ in 0..p {
        out.extend_from_slice(&params.bias);
    }
    T::gemm(
        p,
        c_in,
        c_out,
        T::one(),
        input.values(),
        (c_in as isize, 1),
        &params.weight,
        (c_out as isize, 1),
        T::one(),
        &mut out,
        (c_out as isize, 1),
    );
    Grid3::from_vec(input.height(), input.width(), c_out, out)
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn linear_backward<T: Real>(
    input: &Grid3<T>,
    params: &mut LayerParams<T>,
    grad_out: &Grid3<T>,
) -> Result<Grid3<T>> {
    let (c_in, c_out) = check(input, params)?;
    if grad_out.dims() != (input.height(), input.width(), c_out) {
        return config_err(format!(
            "layer {}: grad_out {:?} does not match output shape",
            params.name,
            grad_out.dims()
        ));
    }
    let p = input.height() * input.width();
    let g = grad_out.values();
    T::gemm(
        c_in,
        p,
        c_out,
        T::one(),
        input.values(),
        (1, c_in as isize),
        g,
        (c_out as isize, 1),
        T::one(),
        &mut params.grad_weight,
        (c_out as isize, 1),
    );
    for row in g.chunks_exact(c_out) {
        for (b, &v) in params.grad_bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut grad_in = vec![T::zero(); p * c_in];
    T::gemm(
        p,
        c_out,
        c_in,
        T::one(),
        g,
        (c_out as isize, 1),
        &params.weight,
        (1, c_out as isize),
        T::zero(),
        &mut grad_in,
        (c_in as isize, 1),
    );
    Grid3::from_vec(input.height(), input.width(), c_in, grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_copy_input() {
        let input = Grid3::<f64>::from_fn(3, 2, 4, |y, x, d| (y * 8 + x * 4 + d) as f64 - 5.0);
        let mut p = LayerParams::linear("id", 4, 4);
        for i in 0..4 {
            p.weight[i * 4 + i] = 1.0;
        }
        assert_eq!(linear_forward(&input, &p).unwrap(), input);
    }

    #[test]
    fn depth_mismatch_rejected() {
        let input = Grid3::<f32>::zeros(2, 2, 3);
        let p = LayerParams::linear("l", 4, 2);
        assert!(linear_forward(&input, &p).is_err());
    }
}
