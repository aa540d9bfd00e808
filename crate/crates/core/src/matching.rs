//! Channel-wise template matching and its ablation variants.
//!
//! The raw functions here are unscaled; the learnable matching scale is
//! applied by the caller (see [`apply_scale`]).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{Grid3, Real};

/// How the template is compared against the feature map, and what the
/// heads get to see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchVariant {
    /// `[F_TM; F]`, the full model.
    Tm,
    /// `F_TM` alone.
    TmOnly,
    /// `[cosine; F]` with a single-channel cosine similarity map.
    TmCos,
    /// `[F_PM; F]`, matching against the average-pooled template.
    Pm,
    /// Features only, no matching.
    None,
}

impl MatchVariant {
    pub const ALL: [MatchVariant; 5] = [
        MatchVariant::Tm,
        MatchVariant::TmOnly,
        MatchVariant::TmCos,
        MatchVariant::Pm,
        MatchVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatchVariant::Tm => "tm",
            MatchVariant::TmOnly => "tm_only",
            MatchVariant::TmCos => "tm_cos",
            MatchVariant::Pm => "pm",
            MatchVariant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Channels of the matching output for features of depth `d`.
    pub fn match_depth(self, d: usize) -> usize {
        match self {
            MatchVariant::TmCos => 1,
            MatchVariant::None => 0,
            _ => d,
        }
    }

    /// Channels the heads receive for features of depth `d`.
    pub fn head_input_depth(self, d: usize) -> usize {
        match self {
            MatchVariant::TmOnly => d,
            MatchVariant::None => d,
            v => v.match_depth(d) + d,
        }
    }

    pub fn uses_features(self) -> bool {
        self != MatchVariant::TmOnly
    }
}

fn check_depths<T: Real>(f: &Grid3<T>, t: &Grid3<T>) -> Result<()> {
    if f.depth() != t.depth() {
        return config_err(format!(
            "template depth {} does not match feature depth {}",
            t.depth(),
            f.depth()
        ));
    }
    if t.height() == 0 || t.width() == 0 {
        return config_err("template must have at least one cell");
    }
    Ok(())
}

/// Visits every in-bounds `(output cell, feature cell, template cell)` triple
/// of the zero-padded correlation, template centered at `floor(t/2)`.
#[inline]
fn for_each_overlap(
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let (cy, cx) = ((th / 2) as isize, (tw / 2) as isize);
    for y in 0..h {
        for ty in 0..th {
            let yy = y as isize + ty as isize - cy;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for x in 0..w {
                for tx in 0..tw {
                    let xx = x as isize + tx as isize - cx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    f(y, x, yy as usize, xx as usize, ty, tx);
                }
            }
        }
    }
}

/// `F_TM(y, x, d) = 1/(t_w t_h) * sum F(y + y' - t_h/2, x + x' - t_w/2, d) * T(y', x', d)`
/// with zero padding, before the learnable scale.
pub fn template_match_raw<T: Real>(f: &Grid3<T>, t: &Grid3<T>) -> Result<Grid3<T>> {
    check_depths(f, t)?;
    let (h, w, d) = f.dims();
    let n = T::from_usize(t.height() * t.width()).unwrap_or_else(T::one);
    let mut out = Grid3::zeros(h, w, d);
    let fv = f.values();
    let tv = t.values();
    let ov = out.values_mut();
    let tw = t.width();
    for_each_overlap(h, w, t.height(), tw, |y, x, yy, xx, ty, tx| {
        let o = (y * w + x) * d;
        let a = (yy * w + xx) * d;
        let b = (ty * tw + tx) * d;
        for ((dst, &fa), &tb) in ov[o..o + d]
            .iter_mut()
            .zip(&fv[a..a + d])
            .zip(&tv[b..b + d])
        {
            *dst += fa * tb;
        }
    });
    ov.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Gradients of [`template_match_raw`] with respect to `f` and `t`.
pub fn template_match_backward<T: Real>(
    f: &Grid3<T>,
    t: &Grid3<T>,
    grad_out: &Grid3<T>,
) -> Result<(Grid3<T>, Grid3<T>)> {
    check_depths(f, t)?;
    if !grad_out.same_dims(f) {
        return config_err("matching gradient has the wrong shape");
    }
    let (h, w, d) = f.dims();
    let (th, tw) = (t.height(), t.width());
    let norm = T::one() / T::from_usize(th * tw).unwrap_or_else(T::one);
    let mut gf = Grid3::zeros(h, w, d);
    let mut gt = Grid3::zeros(th, tw, d);
    let (fv, tv, gv) = (f.values(), t.values(), grad_out.values());
    {
        let gfv = gf.values_mut();
        for_each_overlap(h, w, th, tw, |y, x, yy, xx, ty, tx| {
            let o = (y * w + x) * d;
            let a = (yy * w + xx) * d;
            let b = (ty * tw + tx) * d;
            for ((dst, &g), &tb) in gfv[a..a + d]
                .iter_mut()
                .zip(&gv[o..o + d])
                .zip(&tv[b..b + d])
            {
                *dst += g * tb;
            }
        });
    }
    {
        let gtv = gt.values_mut();
        for_each_overlap(h, w, th, tw, |y, x, yy, xx, ty, tx| {
            let o = (y * w + x) * d;
            let a = (yy * w + xx) * d;
            let b = (ty * tw + tx) * d;
            for ((dst, &g), &fa) in gtv[b..b + d]
                .iter_mut()
                .zip(&gv[o..o + d])
                .zip(&fv[a..a + d])
            {
                *dst += g * fa;
            }
        });
    }
    for v in gf.values_mut().iter_mut().chain(gt.values_mut()) {
        *v *= norm;
    }
    Ok((gf, gt))
}

/// Template matching including the learnable scale.
pub fn template_match<T: Real>(f: &Grid3<T>, t: &Grid3<T>, scale: T) -> Result<Grid3<T>> {
    Ok(apply_scale(template_match_raw(f, t)?, scale))
}

pub fn apply_scale<T: Real>(mut g: Grid3<T>, scale: T) -> Grid3<T> {
    if scale != T::one() {
        g.values_mut().iter_mut().for_each(|v| *v *= scale);
    }
    g
}

/// Spatial mean of the template, one value per channel.
pub fn prototype<T: Real>(t: &Grid3<T>) -> Vec<T> {
    let n = T::from_usize(t.height() * t.width()).unwrap_or_else(T::one);
    let mut proto = vec![T::zero(); t.depth()];
    for cell in t.values().chunks_exact(t.depth().max(1)) {
        for (p, &v) in proto.iter_mut().zip(cell) {
            *p += v;
        }
    }
    proto.iter_mut().for_each(|p| *p /= n);
    proto
}

/// `F_PM(y, x, d) = F(y, x, d) * mean(T)(d)`, before the learnable scale.
pub fn prototype_match_raw<T: Real>(f: &Grid3<T>, t: &Grid3<T>) -> Result<Grid3<T>> {
    check_depths(f, t)?;
    let proto = prototype(t);
    let mut out = f.clone();
    for cell in out.values_mut().chunks_exact_mut(f.depth().max(1)) {
        for (v, &p) in cell.iter_mut().zip(&proto) {
            *v *= p;
        }
    }
    Ok(out)
}

pub fn prototype_match<T: Real>(f: &Grid3<T>, t: &Grid3<T>, scale: T) -> Result<Grid3<T>> {
    Ok(apply_scale(prototype_match_raw(f, t)?, scale))
}

pub fn prototype_match_backward<T: Real>(
    f: &Grid3<T>,
    t: &Grid3<T>,
    grad_out: &Grid3<T>,
) -> Result<(Grid3<T>, Grid3<T>)> {
    check_depths(f, t)?;
    if !grad_out.same_dims(f) {
        return config_err("matching gradient has the wrong shape");
    }
    let d = f.depth();
    let proto = prototype(t);
    let mut gf = grad_out.clone();
    let mut gproto = vec![T::zero(); d];
    for ((gcell, fcell), gocell) in gf
        .values_mut()
        .chunks_exact_mut(d.max(1))
        .zip(f.values().chunks_exact(d.max(1)))
        .zip(grad_out.values().chunks_exact(d.max(1)))
    {
        for k in 0..d {
            gproto[k] += gocell[k] * fcell[k];
            gcell[k] *= proto[k];
        }
    }
    let n = T::from_usize(t.height() * t.width()).unwrap_or_else(T::one);
    let gt = Grid3::from_fn(t.height(), t.width(), d, |_, _, k| gproto[k] / n);
    Ok((gf, gt))
}

struct CosineStats<T> {
    dot: Vec<T>,
    win_sq: Vec<T>,
    t_norm: T,
}

fn cosine_stats<T: Real>(f: &Grid3<T>, t: &Grid3<T>) -> CosineStats<T> {
    let (h, w, d) = f.dims();
    let mut dot = vec![T::zero(); h * w];
    let mut win_sq = vec![T::zero(); h * w];
    let (fv, tv) = (f.values(), t.values());
    let tw = t.width();
    for_each_overlap(h, w, t.height(), tw, |y, x, yy, xx, ty, tx| {
        let a = (yy * w + xx) * d;
        let b = (ty * tw + tx) * d;
        let (mut s, mut q) = (T::zero(), T::zero());
        for (&fa, &tb) in fv[a..a + d].iter().zip(&tv[b..b + d]) {
            s += fa * tb;
            q += fa * fa;
        }
        dot[y * w + x] += s;
        win_sq[y * w + x] += q;
    });
    let t_norm = tv.iter().map(|&v| v * v).sum::<T>().sqrt();
    CosineStats {
        dot,
        win_sq,
        t_norm,
    }
}

/// Cosine similarity between the flattened template and the zero-padded
/// window of `f` under it; zero when either vector vanishes. Depth 1.
pub fn cosine_match_raw<T: Real>(f: &Grid3<T>, t: &Grid3<T>) -> Result<Grid3<T>> {
    check_depths(f, t)?;
    let st = cosine_stats(f, t);
    let (h, w) = (f.height(), f.width());
    let vals = (0..h * w)
        .map(|i| {
            let denom = st.win_sq[i].sqrt() * st.t_norm;
            if denom > T::zero() {
                (st.dot[i] / denom).max(-T::one()).min(T::one())
            } else {
                T::zero()
            }
        })
        .collect();
    Grid3::from_vec(h, w, 1, vals)
}

pub fn cosine_match<T: Real>(f: &Grid3<T>, t: &Grid3<T>, scale: T) -> Result<Grid3<T>> {
    Ok(apply_scale(cosine_match_raw(f, t)?, scale))
}

pub fn cosine_match_backward<T: Real>(
    f: &Grid3<T>,
    t: &Grid3<T>,
    grad_out: &Grid3<T>,
) -> Result<(Grid3<T>, Grid3<T>)> {
    check_depths(f, t)?;
    let (h, w, d) = f.dims();
    if grad_out.dims() != (h, w, 1) {
        return config_err("cosine gradient must be H x W x 1");
    }
    let st = cosine_stats(f, t);
    // per position: dc/dwin = a * t - b * win, dc/dt = a * win - c * t
    let mut coef_a = vec![T::zero(); h * w];
    let mut coef_b = vec![T::zero(); h * w];
    let mut coef_c = vec![T::zero(); h * w];
    for i in 0..h * w {
        let wn = st.win_sq[i].sqrt();
        let denom = wn * st.t_norm;
        if denom > T::zero() {
            let g = grad_out.values()[i];
            let c = st.dot[i] / denom;
            coef_a[i] = g / denom;
            coef_b[i] = g * c / st.win_sq[i];
            coef_c[i] = g * c / (st.t_norm * st.t_norm);
        }
    }
    let mut gf = Grid3::zeros(h, w, d);
    let mut gt = Grid3::zeros(t.height(), t.width(), d);
    let (fv, tv) = (f.values(), t.values());
    let tw = t.width();
    {
        let (gfv, gtv) = (gf.values_mut(), gt.values_mut());
        for_each_overlap(h, w, t.height(), tw, |y, x, yy, xx, ty, tx| {
            let i = y * w + x;
            let (ca, cb) = (coef_a[i], coef_b[i]);
            if ca == T::zero() && cb == T::zero() {
                return;
            }
            let a = (yy * w + xx) * d;
            let b = (ty * tw + tx) * d;
            for k in 0..d {
                gfv[a + k] += ca * tv[b + k] - cb * fv[a + k];
                gtv[b + k] += ca * fv[a + k];
            }
        });
        // the template norm covers every template cell, in bounds or not
        let cc: T = coef_c.iter().copied().sum();
        for (g, &v) in gtv.iter_mut().zip(tv) {
            *g -= cc * v;
        }
    }
    Ok((gf, gt))
}

/// Unscaled matching output for a variant (`None` for the features-only variant).
pub fn match_raw<T: Real>(
    variant: MatchVariant,
    f: &Grid3<T>,
    t: &Grid3<T>,
) -> Result<Option<Grid3<T>>> {
    Ok(match variant {
        MatchVariant::Tm | MatchVariant::TmOnly => Some(template_match_raw(f, t)?),
        MatchVariant::TmCos => Some(cosine_match_raw(f, t)?),
        MatchVariant::Pm => Some(prototype_match_raw(f, t)?),
        MatchVariant::None => None,
    })
}

/// Backward of [`match_raw`].
pub fn match_raw_backward<T: Real>(
    variant: MatchVariant,
    f: &Grid3<T>,
    t: &Grid3<T>,
    grad_out: &Grid3<T>,
) -> Result<(Grid3<T>, Grid3<T>)> {
    match variant {
        MatchVariant::Tm | MatchVariant::TmOnly => template_match_backward(f, t, grad_out),
        MatchVariant::TmCos => cosine_match_backward(f, t, grad_out),
        MatchVariant::Pm => prototype_match_backward(f, t, grad_out),
        MatchVariant::None => Ok((
            Grid3::zeros(f.height(), f.width(), f.depth()),
            Grid3::zeros(t.height(), t.width(), t.depth()),
        )),
    }
}

/// Head input for a variant: `[match; F]`, the match alone, or `F` alone.
pub fn build_head_input<T: Real>(
    f: &Grid3<T>,
    matched: Option<&Grid3<T>>,
    variant: MatchVariant,
) -> Result<Grid3<T>> {
    match (variant, matched) {
        (MatchVariant::None, _) => Ok(f.clone()),
        (MatchVariant::TmOnly, Some(m)) => {
            if m.height() != f.height() || m.width() != f.width() {
                return config_err("matching output and features differ in spatial size");
            }
            Ok(m.clone())
        }
        (_, Some(m)) => m.concat_depth(f),
        (v, None) => config_err(format!("variant {} needs a matching output", v.name())),
    }
}
