//! Box regressor and presence classifier (`conv3x3 -> LeakyReLU -> linear`),
//! plus exemplar-conditioned box decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYWH;
use crate::error::{arg_err, config_err, Result, TmrError};
use crate::numerics::{
    conv3x3_backward, conv3x3_forward, leaky_relu, leaky_relu_backward, linear_backward,
    linear_forward, sigmoid, Grid3, LayerParams, Real,
};

/// One `conv3x3 -> LeakyReLU -> linear` head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub conv: LayerParams<T>,
    pub linear: LayerParams<T>,
}

#[derive(Clone, Debug)]
pub struct HeadTape<T> {
    pub preact: Grid3<T>,
    pub hidden: Grid3<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = LayerParams::conv3x3(format!("{name}.conv"), c_in, hidden);
        conv.init_he(rng, 1.0);
        let mut linear = LayerParams::linear(format!("{name}.linear"), hidden, c_out);
        linear.init_he(rng, 0.1);
        Self { conv, linear }
    }

    pub fn c_in(&self) -> usize {
        self.conv.c_in()
    }

    pub fn forward(&self, input: &Grid3<T>, slope: T) -> Result<(Grid3<T>, HeadTape<T>)> {
        if input.depth() != self.conv.c_in() {
            return config_err(format!(
                "head {} expects depth {}, got {}",
                self.conv.name,
                self.conv.c_in(),
                input.depth()
            ));
        }
        let preact = conv3x3_forward(input, &self.conv)?;
        let hidden = leaky_relu(&preact, slope);
        let out = linear_forward(&hidden, &self.linear)?;
        Ok((out, HeadTape { preact, hidden }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &mut self,
        input: &Grid3<T>,
        tape: &HeadTape<T>,
        grad_out: &Grid3<T>,
        slope: T,
    ) -> Result<Grid3<T>> {
        let g_hidden = linear_backward(&tape.hidden, &mut self.linear, grad_out)?;
        let g_pre = leaky_relu_backward(&tape.preact, &g_hidden, slope)?;
        conv3x3_backward(input, &mut self.conv, &g_pre)
    }
}

/// Raw `(dx, dy, alpha_w, alpha_h)` per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionMap<T> {
    pub grid: Grid3<T>,
}

/// Sigmoid scores per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PresenceMap<T> {
    pub grid: Grid3<T>,
}

pub fn regress<T: Real>(
    f_p: &Grid3<T>,
    head: &HeadParams<T>,
    slope: T,
) -> Result<RegressionMap<T>> {
    if head.linear.c_out() != 4 {
        return config_err("regression head must output 4 channels");
    }
    Ok(RegressionMap {
        grid: head.forward(f_p, slope)?.0,
    })
}

pub fn presence<T: Real>(f_p: &Grid3<T>, head: &HeadParams<T>, slope: T) -> Result<PresenceMap<T>> {
    if head.linear.c_out() != 1 {
        return config_err("presence head must output 1 channel");
    }
    Ok(PresenceMap {
        grid: sigmoid(&head.forward(f_p, slope)?.0),
    })
}

/// Box parameterizations compared in the box-regression ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeVariant {
    /// Exemplar-sized box at the cell; regression ignored.
    None,
    /// Offsets and sizes in feature cells, no exemplar conditioning.
    Unconditioned,
    /// Sizes scale the exemplar, offsets in feature cells.
    ScaleOnly,
    /// Offsets and sizes both scale with the exemplar.
    Full,
}

impl DecodeVariant {
    pub const ALL: [DecodeVariant; 4] = [
        DecodeVariant::None,
        DecodeVariant::Unconditioned,
        DecodeVariant::ScaleOnly,
        DecodeVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecodeVariant::None => "none",
            DecodeVariant::Unconditioned => "unconditioned",
            DecodeVariant::ScaleOnly => "scale_only",
            DecodeVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Per-cell multipliers `(offset_x, offset_y, size_w, size_h)` in feature units.
    fn factors(self, s_w: f64, s_h: f64) -> (f64, f64, f64, f64) {
        match self {
            DecodeVariant::None | DecodeVariant::Full => (s_w, s_h, s_w, s_h),
            DecodeVariant::Unconditioned => (1.0, 1.0, 1.0, 1.0),
            DecodeVariant::ScaleOnly => (1.0, 1.0, s_w, s_h),
        }
    }
}

/// Decoded box per cell, row-major, image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMap {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BoxXYWH>,
}

impl BoxMap {
    pub fn get(&self, y: usize, x: usize) -> &BoxXYWH {
        &self.boxes[y * self.width + x]
    }
}

/// Turns regression outputs into boxes.
///
/// Everything is computed in feature units around the cell center
/// `(x + 0.5, y + 0.5)`, with the exemplar size `s = size / stride`, then
/// scaled by `stride` to pixels.
pub fn decode_boxes<T: Real>(
    reg: &RegressionMap<T>,
    exemplar: &BoxXYWH,
    stride: f64,
    variant: DecodeVariant,
) -> Result<BoxMap> {
    exemplar.validate()?;
    if !(stride > 0.0) {
        return arg_err(format!("stride must be positive, got {stride}"));
    }
    let (h, w, d) = reg.grid.dims();
    if d != 4 {
        return config_err(format!("regression map must have 4 channels, got {d}"));
    }
    let (s_w, s_h) = (exemplar.w / stride, exemplar.h / stride);
    let (ox, oy, sw, sh) = variant.factors(s_w, s_h);
    let mut boxes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let b = if variant == DecodeVariant::None {
                BoxXYWH::new_unchecked(cx, cy, s_w, s_h)
            } else {
                let r = reg.grid.cell(y, x);
                let r = [
                    r[0].to_f64_lossy(),
                    r[1].to_f64_lossy(),
                    r[2].to_f64_lossy(),
                    r[3].to_f64_lossy(),
                ];
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(TmrError::Numeric(format!(
                        "non-finite regression output {r:?} at cell (y={y}, x={x})"
                    )));
                }
                BoxXYWH::new_unchecked(
                    cx + ox * r[0],
                    cy + oy * r[1],
                    r[2].exp() * sw,
                    r[3].exp() * sh,
                )
            };
            let b = b.scaled(stride);
            if !(b.w.is_finite() && b.h.is_finite() && b.w > 0.0 && b.h > 0.0) {
                return Err(TmrError::Numeric(format!(
                    "decoded box {b:?} at cell (y={y}, x={x}) is degenerate"
                )));
            }
            boxes.push(b);
        }
    }
    Ok(BoxMap {
        height: h,
        width: w,
        boxes,
    })
}

/// Chains per-cell box gradients (pixels, `[cx, cy, w, h]`) back to the
/// regression channels. The exemplar size is a constant.
pub fn decode_backward<T: Real>(
    boxes: &BoxMap,
    grad_boxes: &[[f64; 4]],
    exemplar: &BoxXYWH,
    stride: f64,
    variant: DecodeVariant,
) -> Result<Grid3<T>> {
    if grad_boxes.len() != boxes.boxes.len() {
        return config_err("box gradient count does not match the box map");
    }
    let mut grad = Grid3::zeros(boxes.height, boxes.width, 4);
    if variant == DecodeVariant::None {
        return Ok(grad);
    }
    let (ox, oy, _, _) = variant.factors(exemplar.w / stride, exemplar.h / stride);
    for (i, (b, g)) in boxes.boxes.iter().zip(grad_boxes).enumerate() {
        let cell = &mut grad.values_mut()[i * 4..i * 4 + 4];
        cell[0] = T::lit(g[0] * stride * ox);
        cell[1] = T::lit(g[1] * stride * oy);
        // d(e^a * s * stride)/da is the width itself
        cell[2] = T::lit(g[2] * b.w);
        cell[3] = T::lit(g[3] * b.h);
    }
    Ok(grad)
}
