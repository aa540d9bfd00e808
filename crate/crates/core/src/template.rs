//! Template extraction: the exemplar's footprint on the feature grid, rounded
//! out to whole cells and cropped with bilinear RoIAlign sampling.

use crate::backbone::FeatureMap;
use crate::boxes::BoxXYWH;
use crate::error::{arg_err, config_err, Result};
use crate::numerics::{Grid3, Real};

/// Absorbs rounding noise when a box edge sits exactly on a cell boundary.
const EDGE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Template<T> {
    pub grid: Grid3<T>,
    pub exemplar: BoxXYWH,
    pub feature_stride: f64,
    /// Sampled region in feature units, `(x1, y1, x2, y2)`.
    pub region: [f64; 4],
}

impl<T: Real> Template<T> {
    pub fn t_h(&self) -> usize {
        self.grid.height()
    }

    pub fn t_w(&self) -> usize {
        self.grid.width()
    }
}

fn first_cell(lo: f64) -> f64 {
    (lo + EDGE_EPS).floor()
}

fn span(lo: f64, hi: f64) -> usize {
    let cells = (hi - EDGE_EPS).ceil() - first_cell(lo);
    if cells.is_finite() && cells >= 1.0 {
        cells as usize
    } else {
        1
    }
}

/// Number of cells `(t_h, t_w)` of the smallest grid-aligned region covering
/// the exemplar.
pub fn template_size(exemplar: &BoxXYWH, stride: f64) -> (usize, usize) {
    (
        span(exemplar.y1() / stride, exemplar.y2() / stride),
        span(exemplar.x1() / stride, exemplar.x2() / stride),
    )
}

/// Grid-aligned region covering the exemplar, in feature units.
pub fn aligned_region(exemplar: &BoxXYWH, stride: f64) -> [f64; 4] {
    let (t_h, t_w) = template_size(exemplar, stride);
    let x1 = first_cell(exemplar.x1() / stride);
    let y1 = first_cell(exemplar.y1() / stride);
    [x1, y1, x1 + t_w as f64, y1 + t_h as f64]
}

/// Interpolation taps for one coordinate: clamped index pair and weight of
/// the upper index. Cell `i` has its center at `i + 0.5`.
fn axis_tap(u: f64, len: usize) -> (usize, usize, f64) {
    let p = (u - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, p - lo as f64)
}

/// RoIAlign with one bilinear sample at the center of each output bin.
///
/// `region` is `(x1, y1, x2, y2)` in feature units; samples outside the map
/// are clamped to the border cells.
pub fn roi_align<T: Real>(
    grid: &Grid3<T>,
    region: [f64; 4],
    out_h: usize,
    out_w: usize,
) -> Result<Grid3<T>> {
    if out_h == 0 || out_w == 0 || grid.height() == 0 || grid.width() == 0 {
        return arg_err("roi_align needs non-empty input and output");
    }
    let d = grid.depth();
    let mut out = Grid3::zeros(out_h, out_w, d);
    for_each_sample(grid, region, out_h, out_w, |oy, ox, taps| {
        let dst = out.cell_mut(oy, ox);
        for &(y, x, wgt) in taps {
            if wgt == 0.0 {
                continue;
            }
            let w = T::lit(wgt);
            for (o, &v) in dst.iter_mut().zip(grid.cell(y, x)) {
                *o += w * v;
            }
        }
    });
    Ok(out)
}

/// Scatters the gradient of a [`roi_align`] output back onto the source grid.
pub fn roi_align_backward<T: Real>(
    grad_out: &Grid3<T>,
    region: [f64; 4],
    source_dims: (usize, usize, usize),
) -> Result<Grid3<T>> {
    let (h, w, d) = source_dims;
    if grad_out.depth() != d {
        return config_err(format!(
            "roi_align gradient depth {} does not match source depth {d}",
            grad_out.depth()
        ));
    }
    let mut grad = Grid3::zeros(h, w, d);
    let shape = Grid3::<T>::zeros(h, w, 0);
    for_each_sample(
        &shape,
        region,
        grad_out.height(),
        grad_out.width(),
        |oy, ox, taps| {
            let g = grad_out.cell(oy, ox);
            for &(y, x, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                let w = T::lit(wgt);
                for (dst, &gv) in grad.cell_mut(y, x).iter_mut().zip(g) {
                    *dst += w * gv;
                }
            }
        },
    );
    Ok(grad)
}

fn for_each_sample<T: Real>(
    grid: &Grid3<T>,
    region: [f64; 4],
    out_h: usize,
    out_w: usize,
    mut f: impl FnMut(usize, usize, &[(usize, usize, f64); 4]),
) {
    let [x1, y1, x2, y2] = region;
    let bin_w = (x2 - x1) / out_w as f64;
    let bin_h = (y2 - y1) / out_h as f64;
    for oy in 0..out_h {
        let (ylo, yhi, fy) = axis_tap(y1 + (oy as f64 + 0.5) * bin_h, grid.height());
        for ox in 0..out_w {
            let (xlo, xhi, fx) = axis_tap(x1 + (ox as f64 + 0.5) * bin_w, grid.width());
            let taps = [
                (ylo, xlo, (1.0 - fy) * (1.0 - fx)),
                (ylo, xhi, (1.0 - fy) * fx),
                (yhi, xlo, fy * (1.0 - fx)),
                (yhi, xhi, fy * fx),
            ];
            f(oy, ox, &taps);
        }
    }
}

/// Crops the exemplar's template from `fm`.
pub fn roi_align_extract<T: Real>(fm: &FeatureMap<T>, exemplar: &BoxXYWH) -> Result<Template<T>> {
    exemplar.validate()?;
    let (img_w, img_h) = fm.image_extent();
    if exemplar.clamp_to(img_w, img_h).is_none() {
        return arg_err(format!(
            "exemplar {exemplar:?} lies outside the {img_w}x{img_h} image"
        ));
    }
    let (t_h, t_w) = template_size(exemplar, fm.stride);
    let region = aligned_region(exemplar, fm.stride);
    Ok(Template {
        grid: roi_align(&fm.grid, region, t_h, t_w)?,
        exemplar: *exemplar,
        feature_stride: fm.stride,
        region,
    })
}

/// Gradient of the template with respect to the feature map it was cut from.
pub fn template_backward<T: Real>(
    template: &Template<T>,
    grad_template: &Grid3<T>,
    fm_dims: (usize, usize, usize),
) -> Result<Grid3<T>> {
    if grad_template.dims() != template.grid.dims() {
        return config_err("template gradient has the wrong shape");
    }
    roi_align_backward(grad_template, template.region, fm_dims)
}
