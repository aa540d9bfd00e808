//! Detection and counting metrics.
//!
//! Every (image, pattern) pair is one query. Predictions are matched to the
//! query's ground truth greedily by descending score, one GT per prediction,
//! at `IoU >= t`. AP pools all queries and uses 101-point interpolation;
//! counting errors compare the number of predicted and annotated boxes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::annotation::{PredictionSet, SampleAnnotation};
use crate::boxes::{iou, BoxXYWH};
use crate::error::{arg_err, Result};
use crate::infer::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub image: String,
    pub pattern: u32,
    pub gt: usize,
    pub predicted: usize,
    pub ap50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub mae: f64,
    pub rmse: f64,
    pub queries: Vec<QueryReport>,
}

/// Ground truth and score-sorted predictions of one query.
struct Query<'a> {
    gt: &'a [BoxXYWH],
    preds: Vec<(BoxXYWH, f64)>,
}

/// Greedy one-to-one matching; returns a TP flag per (sorted) prediction.
fn match_query(q: &Query<'_>, t: f64) -> Vec<bool> {
    let mut taken = vec![false; q.gt.len()];
    q.preds
        .iter()
        .map(|(b, _)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in q.gt.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(b, g);
                if v >= t && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(tp_sorted: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_sorted.len());
    let mut recall = Vec::with_capacity(tp_sorted.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_sorted.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < level);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

fn pooled_ap(queries: &[Query<'_>], t: f64) -> f64 {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for q in queries {
        scored.extend(q.preds.iter().map(|p| p.1).zip(match_query(q, t)));
    }
    // stable: equal scores keep query order, then within-query order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = scored.into_iter().map(|(_, f)| f).collect();
    interpolated_ap(&flags, queries.iter().map(|q| q.gt.len()).sum())
}

pub fn evaluate(preds: &[PredictionSet], gts: &[SampleAnnotation]) -> Result<EvalReport> {
    let mut images = BTreeSet::new();
    let mut keys: Vec<(String, u32)> = Vec::new();
    let mut gt_boxes: Vec<&[BoxXYWH]> = Vec::new();
    for s in gts {
        if !images.insert(s.image.as_str()) {
            return arg_err(format!("duplicate sample id {}", s.image));
        }
        let mut ids = BTreeSet::new();
        for p in &s.patterns {
            if !ids.insert(p.id) {
                return arg_err(format!("duplicate pattern {} in {}", p.id, s.image));
            }
            keys.push((s.image.clone(), p.id));
            gt_boxes.push(&p.boxes);
        }
    }
    let index: BTreeMap<(&str, u32), usize> = keys
        .iter()
        .enumerate()
        .map(|(i, (img, p))| ((img.as_str(), *p), i))
        .collect();
    let mut pred_of: Vec<Option<&PredictionSet>> = vec![None; keys.len()];
    for p in preds {
        let Some(&qi) = index.get(&(p.image.as_str(), p.pattern)) else {
            return arg_err(format!(
                "prediction for unknown query {} / pattern {}",
                p.image, p.pattern
            ));
        };
        if pred_of[qi].is_some() {
            return arg_err(format!(
                "duplicate predictions for {} / pattern {}",
                p.image, p.pattern
            ));
        }
        if p.boxes.iter().any(|(_, s)| !s.is_finite()) {
            return arg_err(format!(
                "non-finite score in {} / pattern {}",
                p.image, p.pattern
            ));
        }
        pred_of[qi] = Some(p);
    }
    let queries: Vec<Query<'_>> = gt_boxes
        .iter()
        .zip(&pred_of)
        .map(|(gt, p)| {
            let mut preds = p.map(|p| p.boxes.clone()).unwrap_or_default();
            preds.sort_by(|a, b| b.1.total_cmp(&a.1));
            Query { gt, preds }
        })
        .collect();

    let per_t: Vec<f64> = iou_thresholds()
        .iter()
        .map(|&t| pooled_ap(&queries, t))
        .collect();
    let n = queries.len().max(1) as f64;
    let (abs_sum, sq_sum) = queries.iter().fold((0.0, 0.0), |(a, s), q| {
        let e = q.preds.len() as f64 - q.gt.len() as f64;
        (a + e.abs(), s + e * e)
    });
    let reports = keys
        .iter()
        .zip(&queries)
        .map(|((image, pattern), q)| QueryReport {
            image: image.clone(),
            pattern: *pattern,
            gt: q.gt.len(),
            predicted: q.preds.len(),
            ap50: pooled_ap(std::slice::from_ref(q), 0.5),
        })
        .collect();
    Ok(EvalReport {
        ap: per_t.iter().sum::<f64>() / per_t.len() as f64,
        ap50: per_t[0],
        ap75: per_t[5],
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        queries: reports,
    })
}

/// Prediction record for one query from final detections.
pub fn prediction_set(image: &str, pattern: u32, dets: &[Detection]) -> PredictionSet {
    PredictionSet {
        image: image.to_string(),
        pattern,
        boxes: dets.iter().map(|d| (d.bbox, d.score)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::annotation::PatternAnnotation;

    fn sample(name: &str, boxes: Vec<BoxXYWH>) -> SampleAnnotation {
        SampleAnnotation {
            image: name.into(),
            width: 100,
            height: 100,
            patterns: vec![PatternAnnotation {
                id: 0,
                exemplars: vec![boxes[0]],
                boxes,
            }],
            edgeless: None,
        }
    }

    fn preds(name: &str, boxes: Vec<(BoxXYWH, f64)>) -> PredictionSet {
        PredictionSet {
            image: name.into(),
            pattern: 0,
            boxes,
        }
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gt = vec![
            BoxXYWH::new_unchecked(10.0, 10.0, 8.0, 8.0),
            BoxXYWH::new_unchecked(40.0, 40.0, 8.0, 8.0),
        ];
        let s = sample("a", gt.clone());
        let r = evaluate(
            &[preds("a", gt.iter().map(|b| (*b, 1.0)).collect())],
            &[s.clone()],
        )
        .unwrap();
        assert_eq!(
            (r.ap, r.ap50, r.ap75, r.mae, r.rmse),
            (1.0, 1.0, 1.0, 0.0, 0.0)
        );
        let r = evaluate(&[], &[s]).unwrap();
        assert_eq!((r.ap, r.mae), (0.0, 2.0));
    }

    #[test]
    fn iou_point_six_passes_three_thresholds() {
        // 10x10 GT against a 10x6 box sharing its top edge: IoU = 60 / 100
        let g = BoxXYWH::new_unchecked(5.0, 5.0, 10.0, 10.0);
        let p = BoxXYWH::from_corners(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&g, &p) - 0.6).abs() < 1e-12);
        let r = evaluate(&[preds("a", vec![(p, 0.9)])], &[sample("a", vec![g])]).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        assert!((r.ap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_unknown_queries_are_errors() {
        let g = vec![BoxXYWH::new_unchecked(5.0, 5.0, 4.0, 4.0)];
        assert!(evaluate(&[], &[sample("a", g.clone()), sample("a", g.clone())]).is_err());
        assert!(evaluate(&[preds("b", vec![])], &[sample("a", g.clone())]).is_err());
        assert!(evaluate(&[preds("a", vec![]), preds("a", vec![])], &[sample("a", g)]).is_err());
    }

    #[test]
    fn one_prediction_matches_one_gt() {
        let g = BoxXYWH::new_unchecked(5.0, 5.0, 4.0, 4.0);
        let r = evaluate(
            &[preds("a", vec![(g, 0.9), (g, 0.8)])],
            &[sample("a", vec![g])],
        )
        .unwrap();
        // precision 1 at recall 1 is reached by the first prediction
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.mae, 1.0);
        let r = evaluate(
            &[preds("a", vec![(g.translated(50.0, 0.0), 0.9), (g, 0.8)])],
            &[sample("a", vec![g])],
        )
        .unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        assert_eq!(interpolated_ap(&[true, true], 0), 0.0);
        // recall 0.5 at precision 1, then nothing: 51 of 101 levels
        assert!((interpolated_ap(&[true, false], 2) - 51.0 / 101.0).abs() < 1e-12);
    }
}
