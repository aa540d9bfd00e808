//! From head outputs to final detections: per-exemplar thresholding, union
//! over exemplars and scales, optional refinement, then greedy NMS.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{upsampled_dims, FeatureMap};
use crate::boxes::{iou, BoxXYWH};
use crate::error::{arg_err, Result};
use crate::head::{BoxMap, PresenceMap};
use crate::model::{ModelInput, TmrModel};
use crate::numerics::{linear_forward, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxXYWH,
    pub score: f64,
    pub exemplar_id: usize,
    pub scale_id: usize,
}

/// External box refiner applied to the candidate set before NMS.
pub type RefineHook = Arc<dyn Fn(Vec<Detection>) -> Vec<Detection> + Send + Sync>;

pub const DEFAULT_TAU: f64 = 0.4;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub tau: f64,
    pub nms_iou: f64,
    /// Feature resolutions (cells along the longer axis); empty means the
    /// model's own resolution.
    pub scales: Vec<usize>,
    #[serde(skip)]
    pub refine_hook: Option<RefineHook>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            nms_iou: DEFAULT_NMS_IOU,
            scales: Vec::new(),
            refine_hook: None,
        }
    }
}

impl fmt::Debug for InferConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InferConfig")
            .field("tau", &self.tau)
            .field("nms_iou", &self.nms_iou)
            .field("scales", &self.scales)
            .field("refine_hook", &self.refine_hook.is_some())
            .finish()
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return arg_err(format!("tau must lie in [0, 1), got {}", self.tau));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return arg_err(format!("nms_iou must lie in (0, 1], got {}", self.nms_iou));
        }
        if self.scales.contains(&0) {
            return arg_err("scales must be positive");
        }
        Ok(())
    }
}

/// One detection per cell scoring at least `tau`, in row-major order.
pub fn threshold_filter<T: Real>(
    pres: &PresenceMap<T>,
    boxes: &BoxMap,
    tau: f64,
    exemplar_id: usize,
    scale_id: usize,
) -> Vec<Detection> {
    pres.grid
        .values()
        .iter()
        .zip(&boxes.boxes)
        .filter_map(|(&s, b)| {
            let score = s.to_f64_lossy();
            (score >= tau).then_some(Detection {
                bbox: *b,
                score,
                exemplar_id,
                scale_id,
            })
        })
        .collect()
}

/// Greedy NMS: visit by descending score (ties keep input order) and drop
/// any box whose IoU with an already kept box reaches `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Thresholded candidates for one exemplar on one feature map (no NMS).
pub fn detect_one_exemplar<T: Real>(
    fm: &FeatureMap<T>,
    exemplar: &BoxXYWH,
    exemplar_id: usize,
    model: &TmrModel<T>,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let fwd = model.head_forward(fm, exemplar)?;
    Ok(threshold_filter(
        &fwd.presence(),
        &fwd.boxes,
        cfg.tau,
        exemplar_id,
        fm.scale_id,
    ))
}

/// Union of per-exemplar candidates on one feature map.
pub fn few_shot_candidates<T: Real>(
    fm: &FeatureMap<T>,
    exemplars: &[BoxXYWH],
    model: &TmrModel<T>,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    if exemplars.is_empty() {
        return arg_err("at least one exemplar is required");
    }
    let mut all = Vec::new();
    for (i, e) in exemplars.iter().enumerate() {
        all.extend(detect_one_exemplar(fm, e, i, model, cfg)?);
    }
    Ok(all)
}

fn finish(candidates: Vec<Detection>, cfg: &InferConfig) -> Vec<Detection> {
    let candidates = match &cfg.refine_hook {
        Some(hook) => hook(candidates),
        None => candidates,
    };
    nms(&candidates, cfg.nms_iou)
}

/// Few-shot detection on one projected feature map: union, then one NMS.
pub fn detect_few_shot<T: Real>(
    fm: &FeatureMap<T>,
    exemplars: &[BoxXYWH],
    model: &TmrModel<T>,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    Ok(finish(few_shot_candidates(fm, exemplars, model, cfg)?, cfg))
}

/// Projected feature maps for every configured scale, from native features.
pub fn scale_pyramid<T: Real>(
    model: &TmrModel<T>,
    native: &FeatureMap<T>,
    scales: &[usize],
) -> Result<Vec<FeatureMap<T>>> {
    if scales.is_empty() {
        return Ok(vec![model.project(native)?]);
    }
    let projected = FeatureMap {
        grid: linear_forward(&native.grid, &model.projection)?,
        ..native.clone()
    };
    scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (h, w) = upsampled_dims(native.height(), native.width(), Some(s));
            let mut fm = if (h, w) == (native.height(), native.width()) {
                projected.clone()
            } else {
                projected.resized(h, w)?
            };
            fm.scale_id = i;
            Ok(fm)
        })
        .collect()
}

/// Pre-NMS candidates across all exemplars and scales.
pub fn multi_scale_candidates<T: Real>(
    model: &TmrModel<T>,
    native: &FeatureMap<T>,
    exemplars: &[BoxXYWH],
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut all = Vec::new();
    for fm in scale_pyramid(model, native, &cfg.scales)? {
        all.extend(few_shot_candidates(&fm, exemplars, model, cfg)?);
    }
    Ok(all)
}

/// Multi-scale few-shot detection from native features.
pub fn detect_multi_scale<T: Real>(
    model: &TmrModel<T>,
    native: &FeatureMap<T>,
    exemplars: &[BoxXYWH],
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    Ok(finish(
        multi_scale_candidates(model, native, exemplars, cfg)?,
        cfg,
    ))
}

/// End-to-end detection; final boxes are clipped to the image.
pub fn detect<T: Real>(
    model: &TmrModel<T>,
    input: &ModelInput<T>,
    exemplars: &[BoxXYWH],
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let native = model.native_features(input)?.native;
    let (img_w, img_h) = native.image_extent();
    let dets = detect_multi_scale(model, &native, exemplars, cfg)?;
    Ok(dets
        .into_iter()
        .filter_map(|d| {
            d.bbox
                .clamp_to(img_w, img_h)
                .map(|bbox| Detection { bbox, ..d })
        })
        .collect())
}
