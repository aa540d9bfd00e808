//! Channel-wise bilinear resizing with the align-corners convention: the
//! corner cells of input and output coincide.

use super::{Grid3, Real};
use crate::error::{arg_err, config_err, Result};

/// For each output index, the two source indices and the weight of the upper one.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(input: &Grid3<T>, new_h: usize, new_w: usize) -> Result<Grid3<T>> {
    if new_h == 0 || new_w == 0 {
        return arg_err(format!("resize target {new_h}x{new_w} must be non-empty"));
    }
    let (h, w, d) = input.dims();
    if (h, w) == (new_h, new_w) {
        return Ok(input.clone());
    }
    let ty = axis_taps(h, new_h);
    let tx = axis_taps(w, new_w);
    let mut out = Grid3::zeros(new_h, new_w, d);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::lit(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::lit(fx);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let (a, b, c, e) = (
                input.cell(y0, x0),
                input.cell(y0, x1),
                input.cell(y1, x0),
                input.cell(y1, x1),
            );
            let dst = out.cell_mut(oy, ox);
            for k in 0..d {
                dst[k] = w00 * a[k] + w01 * b[k] + w10 * c[k] + w11 * e[k];
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`]: scatters output gradients back to the source grid.
pub fn bilinear_resize_backward<T: Real>(
    input_dims: (usize, usize, usize),
    grad_out: &Grid3<T>,
) -> Result<Grid3<T>> {
    let (h, w, d) = input_dims;
    let (new_h, new_w, gd) = grad_out.dims();
    if gd != d {
        return config_err("resize backward: depth mismatch");
    }
    if (h, w) == (new_h, new_w) {
        return Ok(grad_out.clone());
    }
    let ty = axis_taps(h, new_h);
    let tx = axis_taps(w, new_w);
    let mut g = Grid3::zeros(h, w, d);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let fy = T::lit(fy);
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let fx = T::lit(fx);
            let weights = [
                (y0, x0, (T::one() - fy) * (T::one() - fx)),
                (y0, x1, (T::one() - fy) * fx),
                (y1, x0, fy * (T::one() - fx)),
                (y1, x1, fy * fx),
            ];
            let src = grad_out.cell(oy, ox).to_vec();
            for (y, x, wt) in weights {
                let dst = g.cell_mut(y, x);
                for k in 0..d {
                    dst[k] += wt * src[k];
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_to_three_by_three_center() {
        let g = Grid3::from_vec(2, 2, 1, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&g, 3, 3).unwrap();
        assert_eq!(r.get(1, 1, 0), 1.5);
        // corners are preserved under align-corners
        assert_eq!(r.get(0, 0, 0), 0.0);
        assert_eq!(r.get(2, 2, 0), 3.0);
        assert_eq!(r.get(0, 1, 0), 0.5);
    }

    #[test]
    fn same_size_is_identity_and_constant_is_preserved() {
        let g = Grid3::<f64>::from_fn(4, 5, 2, |y, x, d| (y * 7 + x * 3 + d) as f64);
        assert_eq!(bilinear_resize(&g, 4, 5).unwrap(), g);
        let c = Grid3::filled(3, 4, 2, 0.75f64);
        let r = bilinear_resize(&c, 7, 9).unwrap();
        assert!(r.values().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        let down = bilinear_resize(&c, 2, 1).unwrap();
        assert!(down.values().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn zero_target_rejected() {
        let g = Grid3::<f32>::zeros(2, 2, 1);
        assert!(bilinear_resize(&g, 0, 3).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <R x, y> == <x, R^T y>
        let x = Grid3::<f64>::from_fn(3, 4, 2, |y, x, d| {
            ((y * 13 + x * 7 + d * 3) % 5) as f64 - 2.0
        });
        let y = Grid3::<f64>::from_fn(5, 7, 2, |a, b, d| ((a * 3 + b * 5 + d) % 7) as f64 * 0.25);
        let rx = bilinear_resize(&x, 5, 7).unwrap();
        let rty = bilinear_resize_backward(x.dims(), &y).unwrap();
        let lhs: f64 = rx.values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .values()
            .iter()
            .zip(rty.values())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
