//! Zero-padded 3x3 cross-correlation, lowered to a matrix product via im2col.

use super::{Grid3, LayerKind, LayerParams, Real};
use crate::error::{config_err, Result};

fn check_shapes<T: Real>(
    input: &Grid3<T>,
    params: &LayerParams<T>,
    stride: usize,
) -> Result<(usize, usize)> {
    let LayerKind::Conv3x3 { c_in, .. } = params.kind else {
        return config_err(format!("layer {} is not a 3x3 convolution", params.name));
    };
    if c_in != input.depth() {
        return config_err(format!(
            "layer {} expects {c_in} input channels, got {}",
            params.name,
            input.depth()
        ));
    }
    if stride == 0 {
        return config_err("convolution stride must be >= 1");
    }
    if input.height() == 0 || input.width() == 0 {
        return config_err("convolution input must be non-empty");
    }
    Ok((
        (input.height() - 1) / stride + 1,
        (input.width() - 1) / stride + 1,
    ))
}

/// Builds the `(out_h * out_w) x (9 * c_in)` patch matrix.
fn im2col<T: Real>(input: &Grid3<T>, stride: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let (h, w, c) = input.dims();
    let k = 9 * c;
    let mut cols = vec![T::zero(); out_h * out_w * k];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * k..(oy * out_w + ox + 1) * k];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(input.cell(iy as usize, ix as usize));
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], grad_in: &mut Grid3<T>, stride: usize, out_h: usize, out_w: usize) {
    let (h, w, c) = grad_in.dims();
    let k = 9 * c;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &cols[(oy * out_w + ox) * k..(oy * out_w + ox + 1) * k];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (ky * 3 + kx) * c;
                    let dst = grad_in.cell_mut(iy as usize, ix as usize);
                    for (d, &g) in dst.iter_mut().zip(&row[src..src + c]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Stride-1, padding-1 convolution: output keeps the input's spatial size.
pub fn conv3x3_forward<T: Real>(input: &Grid3<T>, params: &LayerParams<T>) -> Result<Grid3<T>> {
    conv3x3_forward_strided(input, params, 1)
}

pub fn conv3x3_forward_strided<T: Real>(
    input: &Grid3<T>,
    params: &LayerParams<T>,
    stride: usize,
) -> Result<Grid3<T>> {
    let (out_h, out_w) = check_shapes(input, params, stride)?;
    let c_out = params.c_out();
    let k = 9 * input.depth();
    let p = out_h * out_w;
    let cols = im2col(input, stride, out_h, out_w);
    let mut out = Vec::with_capacity(p * c_out);
    for _ in 0..p {
        out.extend_from_slice(&params.bias);
    }
    T::gemm(
        p,
        k,
        c_out,
        T::one(),
        &cols,
        (k as isize, 1),
        &params.weight,
        (c_out as isize, 1),
        T::one(),
        &mut out,
        (c_out as isize, 1),
    );
    Grid3::from_vec(out_h, out_w, c_out, out)
}

/// Accumulates weight/bias gradients into `params` and returns the input gradient.
pub fn conv3x3_backward<T: Real>(
    input: &Grid3<T>,
    params: &mut LayerParams<T>,
    grad_out: &Grid3<T>,
) -> Result<Grid3<T>> {
    conv3x3_backward_strided(input, params, grad_out, 1)
}

pub fn conv3x3_backward_strided<T: Real>(
    input: &Grid3<T>,
    params: &mut LayerParams<T>,
    grad_out: &Grid3<T>,
    stride: usize,
) -> Result<Grid3<T>> {
    let (out_h, out_w) = check_shapes(input, params, stride)?;
    let c_out = params.c_out();
    if grad_out.dims() != (out_h, out_w, c_out) {
        return config_err(format!(
            "layer {}: grad_out {:?} does not match output {:?}",
            params.name,
            grad_out.dims(),
            (out_h, out_w, c_out)
        ));
    }
    let k = 9 * input.depth();
    let p = out_h * out_w;
    let g = grad_out.values();
    let cols = im2col(input, stride, out_h, out_w);

    // dW += cols^T * G
    T::gemm(
        k,
        p,
        c_out,
        T::one(),
        &cols,
        (1, k as isize),
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

    // dcols = G * W^T
    let mut dcols = vec![T::zero(); p * k];
    T::gemm(
        p,
        c_out,
        k,
        T::one(),
        g,
        (c_out as isize, 1),
        &params.weight,
        (1, c_out as isize),
        T::zero(),
        &mut dcols,
        (k as isize, 1),
    );
    let mut grad_in = Grid3::zeros(input.height(), input.width(), input.depth());
    col2im(&dcols, &mut grad_in, stride, out_h, out_w);
    Ok(grad_in)
}
