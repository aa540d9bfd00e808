//! Half and quarter box crops that strip object-edge cues from the labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::annotation::SampleAnnotation;
use crate::boxes::BoxXYWH;
use crate::error::{arg_err, Result, TmrError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgelessMode {
    L,
    R,
    T,
    B,
    TL,
    TR,
    BL,
    BR,
}

impl EdgelessMode {
    pub const ALL: [EdgelessMode; 8] = [
        Self::L,
        Self::R,
        Self::T,
        Self::B,
        Self::TL,
        Self::TR,
        Self::BL,
        Self::BR,
    ];

    /// Horizontal and vertical keep-side: -1 first half, +1 second half, 0 whole.
    fn sides(self) -> (i8, i8) {
        match self {
            Self::L => (-1, 0),
            Self::R => (1, 0),
            Self::T => (0, -1),
            Self::B => (0, 1),
            Self::TL => (-1, -1),
            Self::TR => (1, -1),
            Self::BL => (-1, 1),
            Self::BR => (1, 1),
        }
    }

    pub fn crop(self, b: &BoxXYWH) -> BoxXYWH {
        let (sx, sy) = self.sides();
        let half = |c: f64, len: f64, side: i8| match side {
            0 => (c, len),
            s => (c + f64::from(s) * len / 4.0, len / 2.0),
        };
        let (cx, w) = half(b.cx, b.w, sx);
        let (cy, h) = half(b.cy, b.h, sy);
        BoxXYWH::new_unchecked(cx, cy, w, h)
    }
}

impl fmt::Display for EdgelessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for EdgelessMode {
    type Err = TmrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| TmrError::Argument(format!("unknown edgeless mode {s:?}")))
    }
}

/// Replaces every exemplar and ground-truth box by its crop. A sample can
/// be transformed once.
pub fn edgeless_transform(ann: &SampleAnnotation, mode: EdgelessMode) -> Result<SampleAnnotation> {
    if let Some(prev) = ann.edgeless {
        return arg_err(format!(
            "{} already has edgeless mode {prev}; transforms do not compose",
            ann.image
        ));
    }
    let mut out = ann.clone();
    for p in &mut out.patterns {
        for b in p.exemplars.iter_mut().chain(p.boxes.iter_mut()) {
            *b = mode.crop(b);
        }
    }
    out.edgeless = Some(mode);
    Ok(out)
}
