//! Center-size boxes, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::SignatureHasher;

/// Axis-aligned box given by its center and size, in image pixels unless
/// stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub const fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return arg_err(format!("box {self:?} has non-finite coordinates"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return arg_err(format!("box {self:?} must have positive size"));
        }
        Ok(())
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Intersection with `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<Self> {
        let x1 = self.x1().max(0.0);
        let y1 = self.y1().max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(x1, y1, x2, y2))
    }

    pub fn contains(&self, other: &BoxXYWH, tol: f64) -> bool {
        other.x1() >= self.x1() - tol
            && other.y1() >= self.y1() - tol
            && other.x2() <= self.x2() + tol
            && other.y2() <= self.y2() + tol
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new_unchecked(a[0], a[1], a[2], a[3])
    }
}

pub fn intersection_area(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    iw * ih
}

pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    giou_with_grad(a, b).0
}

/// Generalized IoU and its gradient with respect to `a`'s `(cx, cy, w, h)`.
///
/// At ties between edges the gradient follows the branch `a` loses
/// (strict comparisons), and a zero-width overlap contributes no
/// intersection gradient.
pub fn giou_with_grad(a: &BoxXYWH, b: &BoxXYWH) -> (f64, [f64; 4]) {
    let (g, grad, _) = giou_full(a, b);
    (g, grad)
}

/// Branch signature of the piecewise gIoU formula, for finite-difference checks.
pub fn giou_signature(a: &BoxXYWH, b: &BoxXYWH, sig: &mut SignatureHasher) {
    giou_full(a, b).2.iter().for_each(|&bit| sig.push(bit));
}

fn giou_full(a: &BoxXYWH, b: &BoxXYWH) -> (f64, [f64; 4], [bool; 10]) {
    let (ax1, ax2, ay1, ay2) = (a.x1(), a.x2(), a.y1(), a.y2());
    let (bx1, bx2, by1, by2) = (b.x1(), b.x2(), b.y1(), b.y2());

    // intersection edges: which box provides each edge
    let ix2_a = ax2 < bx2;
    let ix1_a = ax1 > bx1;
    let iy2_a = ay2 < by2;
    let iy1_a = ay1 > by1;
    let iw_raw = if ix2_a { ax2 } else { bx2 } - if ix1_a { ax1 } else { bx1 };
    let ih_raw = if iy2_a { ay2 } else { by2 } - if iy1_a { ay1 } else { by1 };
    let iw_pos = iw_raw > 0.0;
    let ih_pos = ih_raw > 0.0;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    // hull edges
    let cx2_a = ax2 >= bx2;
    let cx1_a = ax1 <= bx1;
    let cy2_a = ay2 >= by2;
    let cy1_a = ay1 <= by1;
    let cw = if cx2_a { ax2 } else { bx2 } - if cx1_a { ax1 } else { bx1 };
    let ch = if cy2_a { ay2 } else { by2 } - if cy1_a { ay1 } else { by1 };
    let hull = cw * ch;

    let area_a = a.w * a.h;
    let union = area_a + b.w * b.h - inter;
    let bits = [
        ix2_a, ix1_a, iy2_a, iy1_a, iw_pos, ih_pos, cx2_a, cx1_a, cy2_a, cy1_a,
    ];
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4], bits);
    }
    let g = inter / union - (hull - union) / hull;

    // G = I/U + U/C - 1, U = A_a + A_b - I
    let d_inter = (union + inter) / (union * union) - 1.0 / hull;
    let d_area_a = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    // partials w.r.t. a's corners
    let mut d_ax1 = 0.0;
    let mut d_ax2 = 0.0;
    let mut d_ay1 = 0.0;
    let mut d_ay2 = 0.0;
    if iw_pos && ih_pos {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if ix2_a {
            d_ax2 += d_iw;
        }
        if ix1_a {
            d_ax1 -= d_iw;
        }
        if iy2_a {
            d_ay2 += d_ih;
        }
        if iy1_a {
            d_ay1 -= d_ih;
        }
    }
    let d_cw = d_hull * ch;
    let d_ch = d_hull * cw;
    if cx2_a {
        d_ax2 += d_cw;
    }
    if cx1_a {
        d_ax1 -= d_cw;
    }
    if cy2_a {
        d_ay2 += d_ch;
    }
    if cy1_a {
        d_ay1 -= d_ch;
    }

    let grad = [
        d_ax1 + d_ax2,
        d_ay1 + d_ay2,
        0.5 * (d_ax2 - d_ax1) + d_area_a * a.h,
        0.5 * (d_ay2 - d_ay1) + d_area_a * a.w,
    ];
    (g, grad, bits)
}
