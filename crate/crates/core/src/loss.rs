//! Training targets and the two losses: BCE on presence and `1 - gIoU` on
//! decoded boxes.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou_signature, giou_with_grad, BoxXYWH};
use crate::error::{arg_err, config_err, Result, TmrError};
use crate::head::{BoxMap, PresenceMap};
use crate::numerics::{Grid3, Real, SignatureHasher};

pub const DEFAULT_DELTA: f64 = 0.33;
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Presence: mean over all cells. Boxes: mean over positive cells.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub height: usize,
    pub width: usize,
    /// 1 on positive cells, 0 elsewhere.
    pub presence: Grid3<f64>,
    /// Assigned ground-truth box (pixels) per cell; zeros on negatives.
    pub box_target: Grid3<f64>,
    pub assignment: Vec<Option<usize>>,
}

impl TargetMaps {
    pub fn positives(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    pub fn target_box(&self, y: usize, x: usize) -> Option<BoxXYWH> {
        self.assignment[y * self.width + x].map(|_| {
            let c = self.box_target.cell(y, x);
            BoxXYWH::new_unchecked(c[0], c[1], c[2], c[3])
        })
    }
}

/// Normalized L1 distance from a cell center to a box center, both in feature units.
#[inline]
pub fn rhombus_distance(cell_x: usize, cell_y: usize, gt: &BoxXYWH) -> f64 {
    (gt.cx - (cell_x as f64 + 0.5)).abs() / gt.w + (gt.cy - (cell_y as f64 + 0.5)).abs() / gt.h
}

/// Marks every cell whose center lies inside some GT's rhombus
/// `|dx|/w + |dy|/h <= delta` and assigns it to the closest such GT (ties
/// to the lowest index). Boxes are in pixels, converted with `stride`.
pub fn extended_center_set(
    gt: &[BoxXYWH],
    stride: f64,
    height: usize,
    width: usize,
    delta: f64,
) -> Result<TargetMaps> {
    if !(delta > 0.0 && delta <= 0.5) {
        return arg_err(format!("delta must lie in (0, 0.5], got {delta}"));
    }
    if !(stride > 0.0) {
        return arg_err(format!("stride must be positive, got {stride}"));
    }
    let mut best = vec![f64::INFINITY; height * width];
    let mut assignment: Vec<Option<usize>> = vec![None; height * width];
    for (k, b) in gt.iter().enumerate() {
        b.validate()?;
        let f = b.scaled(1.0 / stride);
        // cells whose centers can satisfy the inequality at all
        let x_lo = (f.cx - delta * f.w - 0.5).floor().max(0.0) as usize;
        let x_hi = ((f.cx + delta * f.w - 0.5).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
        let y_lo = (f.cy - delta * f.h - 0.5).floor().max(0.0) as usize;
        let y_hi = ((f.cy + delta * f.h - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dist = rhombus_distance(x, y, &f);
                let i = y * width + x;
                if dist <= delta && dist < best[i] {
                    best[i] = dist;
                    assignment[i] = Some(k);
                }
            }
        }
    }
    let mut presence = Grid3::zeros(height, width, 1);
    let mut box_target = Grid3::zeros(height, width, 4);
    for (i, a) in assignment.iter().enumerate() {
        if let Some(k) = a {
            presence.values_mut()[i] = 1.0;
            box_target.values_mut()[i * 4..i * 4 + 4].copy_from_slice(&gt[*k].to_array());
        }
    }
    Ok(TargetMaps {
        height,
        width,
        presence,
        box_target,
        assignment,
    })
}

fn check_presence_shape<T: Real>(grid: &Grid3<T>, target: &TargetMaps) -> Result<()> {
    if grid.dims() != (target.height, target.width, 1) {
        return config_err(format!(
            "presence map {:?} does not match targets {}x{}",
            grid.dims(),
            target.height,
            target.width
        ));
    }
    Ok(())
}

fn reduction_scale(reduction: LossReduction, n: usize) -> f64 {
    match reduction {
        LossReduction::Mean if n > 0 => 1.0 / n as f64,
        _ => 1.0,
    }
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE on probabilities, clamped to `[eps, 1 - eps]`; returns the loss and
/// its gradient with respect to the probabilities (zero where clamped).
pub fn presence_loss<T: Real>(
    pred: &PresenceMap<T>,
    target: &TargetMaps,
    reduction: LossReduction,
) -> Result<(f64, Grid3<T>)> {
    check_presence_shape(&pred.grid, target)?;
    let scale = reduction_scale(reduction, target.height * target.width);
    let mut loss = 0.0;
    let mut clamped = 0usize;
    let mut grad = Grid3::zeros(target.height, target.width, 1);
    for ((&p, &y), g) in pred
        .grid
        .values()
        .iter()
        .zip(target.presence.values())
        .zip(grad.values_mut())
    {
        let p = p.to_f64_lossy();
        if !p.is_finite() {
            return Err(TmrError::Numeric(format!(
                "presence score {p} is not finite"
            )));
        }
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if pc != p {
            clamped += 1;
        } else {
            *g = T::lit(scale * (pc - y) / (pc * (1.0 - pc)));
        }
        loss += bce(pc, y);
    }
    if clamped > 0 {
        log::debug!(
            "clamped {clamped} presence scores to [{PROB_EPS}, {}]",
            1.0 - PROB_EPS
        );
    }
    Ok((loss * scale, grad))
}

/// BCE evaluated from logits; the gradient is `(sigmoid(z) - y)` times the
/// reduction factor. The loss value uses the same probability clamp as
/// [`presence_loss`]; the gradient does not saturate there so confidently
/// wrong cells keep learning.
pub fn presence_loss_logits<T: Real>(
    logits: &Grid3<T>,
    target: &TargetMaps,
    reduction: LossReduction,
) -> Result<(f64, Grid3<T>)> {
    check_presence_shape(logits, target)?;
    let scale = reduction_scale(reduction, target.height * target.width);
    let mut loss = 0.0;
    let mut grad = Grid3::zeros(target.height, target.width, 1);
    for ((&z, &y), g) in logits
        .values()
        .iter()
        .zip(target.presence.values())
        .zip(grad.values_mut())
    {
        let z = z.to_f64_lossy();
        if !z.is_finite() {
            return Err(TmrError::Numeric(format!(
                "presence logit {z} is not finite"
            )));
        }
        let p = crate::numerics::sigmoid_scalar(z);
        loss += bce(p.clamp(PROB_EPS, 1.0 - PROB_EPS), y);
        *g = T::lit(scale * (p - y));
    }
    Ok((loss * scale, grad))
}

/// Branch bits of [`presence_loss_logits`]: whether each probability is clamped.
pub fn presence_signature<T: Real>(logits: &Grid3<T>, sig: &mut SignatureHasher) {
    for &z in logits.values() {
        let p = crate::numerics::sigmoid_scalar(z.to_f64_lossy());
        sig.push(p < PROB_EPS || p > 1.0 - PROB_EPS);
    }
}

/// `1 - gIoU` between each positive cell's decoded box and its assigned GT.
/// Returns the loss and per-cell gradients with respect to the decoded boxes.
pub fn box_loss(
    decoded: &BoxMap,
    target: &TargetMaps,
    reduction: LossReduction,
) -> Result<(f64, Vec<[f64; 4]>)> {
    if decoded.height != target.height || decoded.width != target.width {
        return config_err("decoded boxes and targets differ in size");
    }
    let n_pos = target.positives();
    let mut grads = vec![[0.0; 4]; decoded.boxes.len()];
    if n_pos == 0 {
        log::warn!("no positive cells; box loss is zero");
        return Ok((0.0, grads));
    }
    let scale = reduction_scale(reduction, n_pos);
    let mut loss = 0.0;
    for (i, a) in target.assignment.iter().enumerate() {
        if a.is_none() {
            continue;
        }
        let (y, x) = (i / target.width, i % target.width);
        let gt = target.target_box(y, x).expect("positive cell has a target");
        let (g, dg) = giou_with_grad(&decoded.boxes[i], &gt);
        loss += 1.0 - g;
        grads[i] = [
            -dg[0] * scale,
            -dg[1] * scale,
            -dg[2] * scale,
            -dg[3] * scale,
        ];
    }
    Ok((loss * scale, grads))
}

pub fn box_loss_signature(decoded: &BoxMap, target: &TargetMaps, sig: &mut SignatureHasher) {
    for (i, a) in target.assignment.iter().enumerate() {
        if a.is_some() {
            let gt = target
                .target_box(i / target.width, i % target.width)
                .expect("positive cell has a target");
            giou_signature(&decoded.boxes[i], &gt, sig);
        }
    }
}

/// `L_P + L_B`, refusing non-finite components.
pub fn total_loss(lp: f64, lb: f64) -> Result<f64> {
    if !lp.is_finite() || !lb.is_finite() {
        return Err(TmrError::Numeric(format!(
            "non-finite loss component: presence {lp}, box {lb}"
        )));
    }
    Ok(lp + lb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centered_gt_marks_its_cell() {
        let gt = [BoxXYWH::new_unchecked(3.5 * 8.0, 2.5 * 8.0, 8.0, 8.0)];
        let t = extended_center_set(&gt, 8.0, 6, 6, 0.01).unwrap();
        assert_eq!(t.positives(), 1);
        assert_eq!(t.assignment[2 * 6 + 3], Some(0));
        assert_eq!(t.target_box(2, 3), Some(gt[0]));
    }

    #[test]
    fn six_cell_gt_gives_plus_shape() {
        let gt = [BoxXYWH::new_unchecked(5.5, 5.5, 6.0, 6.0)];
        let t = extended_center_set(&gt, 1.0, 11, 11, 0.33).unwrap();
        let pos: Vec<(usize, usize)> = (0..121)
            .filter(|i| t.assignment[*i].is_some())
            .map(|i| (i / 11, i % 11))
            .collect();
        assert_eq!(pos, vec![(4, 5), (5, 4), (5, 5), (5, 6), (6, 5)]);
    }

    #[test]
    fn boundary_is_inclusive() {
        // 33 / 100 rounds exactly like the literal 0.33
        let gt = [BoxXYWH::new_unchecked(0.5 + 33.0, 0.5, 100.0, 100.0)];
        let t = extended_center_set(&gt, 1.0, 1, 1, 0.33).unwrap();
        assert_eq!(t.positives(), 1);
        let gt = [BoxXYWH::new_unchecked(0.5 + 33.001, 0.5, 100.0, 100.0)];
        assert_eq!(
            extended_center_set(&gt, 1.0, 1, 1, 0.33)
                .unwrap()
                .positives(),
            0
        );
    }

    #[test]
    fn empty_gt_and_bad_delta() {
        assert_eq!(
            extended_center_set(&[], 4.0, 3, 3, 0.33)
                .unwrap()
                .positives(),
            0
        );
        assert!(extended_center_set(&[], 4.0, 3, 3, 0.0).is_err());
        assert!(extended_center_set(&[], 4.0, 3, 3, 0.6).is_err());
    }

    #[test]
    fn membership_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(0..6);
            let gt: Vec<BoxXYWH> = (0..n)
                .map(|_| {
                    BoxXYWH::new_unchecked(
                        rng.gen_range(-8.0..72.0),
                        rng.gen_range(-8.0..72.0),
                        rng.gen_range(2.0..40.0),
                        rng.gen_range(2.0..40.0),
                    )
                })
                .collect();
            let t = extended_center_set(&gt, 4.0, 16, 16, DEFAULT_DELTA).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let mut want = None;
                    let mut best = f64::INFINITY;
                    for (k, b) in gt.iter().enumerate() {
                        let d = rhombus_distance(x, y, &b.scaled(0.25));
                        if d <= DEFAULT_DELTA && d < best {
                            best = d;
                            want = Some(k);
                        }
                    }
                    assert_eq!(t.assignment[y * 16 + x], want);
                }
            }
        }
    }

    fn maps(h: usize, w: usize, probs: &[f64], labels: &[f64]) -> (PresenceMap<f64>, TargetMaps) {
        let mut t = extended_center_set(&[], 1.0, h, w, 0.33).unwrap();
        t.presence = Grid3::from_vec(h, w, 1, labels.to_vec()).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            if l > 0.5 {
                t.assignment[i] = Some(0);
            }
        }
        (
            PresenceMap {
                grid: Grid3::from_vec(h, w, 1, probs.to_vec()).unwrap(),
            },
            t,
        )
    }

    #[test]
    fn presence_loss_values() {
        let (p, t) = maps(1, 4, &[0.5; 4], &[1.0, 0.0, 0.0, 1.0]);
        let (l, _) = presence_loss(&p, &t, LossReduction::Mean).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = presence_loss(&p, &t, LossReduction::Sum).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
        let (p, t) = maps(1, 2, &[1.0 - PROB_EPS, PROB_EPS], &[1.0, 0.0]);
        assert!(presence_loss(&p, &t, LossReduction::Mean).unwrap().0 < 1e-6);
        // exact 0 / 1 are clamped, not infinite
        let (p, t) = maps(1, 2, &[0.0, 1.0], &[1.0, 0.0]);
        assert!(presence_loss(&p, &t, LossReduction::Mean)
            .unwrap()
            .0
            .is_finite());
    }

    #[test]
    fn presence_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (p, t) = maps(3, 4, &probs, &labels);
        let (_, g) = presence_loss(&p, &t, LossReduction::Mean).unwrap();
        let logits = p.grid.map(|v| (v / (1.0 - v)).ln());
        let (_, gz) = presence_loss_logits(&logits, &t, LossReduction::Mean).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let f = |v: f64| {
                let mut q = p.clone();
                q.grid.values_mut()[i] = v;
                presence_loss(&q, &t, LossReduction::Mean).unwrap().0
            };
            let fd = (f(probs[i] + h) - f(probs[i] - h)) / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            let fz = |v: f64| {
                let mut q = logits.clone();
                q.values_mut()[i] = v;
                presence_loss_logits(&q, &t, LossReduction::Mean).unwrap().0
            };
            let z = logits.values()[i];
            let fdz = (fz(z + h) - fz(z - h)) / (2.0 * h);
            assert!((fdz - gz.values()[i]).abs() < 1e-6 * (1.0 + fdz.abs()));
        }
    }

    #[test]
    fn box_loss_examples() {
        let gt = [BoxXYWH::new_unchecked(0.5, 0.5, 1.0, 1.0)];
        let t = extended_center_set(&gt, 1.0, 1, 1, 0.33).unwrap();
        let exact = BoxMap {
            height: 1,
            width: 1,
            boxes: vec![gt[0]],
        };
        assert_eq!(box_loss(&exact, &t, LossReduction::Mean).unwrap().0, 0.0);
        let side = BoxMap {
            height: 1,
            width: 1,
            boxes: vec![BoxXYWH::new_unchecked(1.5, 0.5, 1.0, 1.0)],
        };
        assert_eq!(box_loss(&side, &t, LossReduction::Mean).unwrap().0, 1.0);
        let none = extended_center_set(&[], 1.0, 1, 1, 0.33).unwrap();
        assert_eq!(box_loss(&side, &none, LossReduction::Mean).unwrap().0, 0.0);
    }

    #[test]
    fn negative_padding_leaves_mean_box_loss_and_dilutes_presence() {
        let gt = [BoxXYWH::new_unchecked(2.5, 2.5, 3.0, 3.0)];
        let small = extended_center_set(&gt, 1.0, 5, 5, 0.33).unwrap();
        let big = extended_center_set(&gt, 1.0, 10, 5, 0.33).unwrap();
        let boxes = |h: usize| BoxMap {
            height: h,
            width: 5,
            boxes: (0..h * 5)
                .map(|_| BoxXYWH::new_unchecked(2.0, 2.7, 2.5, 3.5))
                .collect(),
        };
        let a = box_loss(&boxes(5), &small, LossReduction::Mean).unwrap().0;
        let b = box_loss(&boxes(10), &big, LossReduction::Mean).unwrap().0;
        assert!((a - b).abs() < 1e-15);
        // padding with correctly-classified negatives at p = 0.5 adds ln 2 per cell
        let half = |h: usize| PresenceMap {
            grid: Grid3::filled(h, 5, 1, 0.5f64),
        };
        let ls = presence_loss(&half(5), &small, LossReduction::Sum)
            .unwrap()
            .0;
        let lb = presence_loss(&half(10), &big, LossReduction::Sum)
            .unwrap()
            .0;
        assert!((lb - ls - 25.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sums_and_rejects_nan() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.3, 0.7).unwrap(), 1.0);
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }
}
