//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmr_core::audit::{audit_gradients, AuditOptions};
use tmr_core::backbone::BackboneMode;
use tmr_core::boxes::{giou, iou, BoxXYWH};
use tmr_core::head::{decode_boxes, DecodeVariant, HeadParams, RegressionMap};
use tmr_core::infer::{multi_scale_candidates, nms, Detection, InferConfig};
use tmr_core::loss::{extended_center_set, presence_loss_logits, LossReduction, DEFAULT_DELTA};
use tmr_core::matching::{template_match_backward, template_match_raw, MatchVariant};
use tmr_core::model::{ModelConfig, ModelInput, TmrModel};
use tmr_core::numerics::{
    conv3x3_backward, conv3x3_forward, grad_check, linear_backward, linear_forward, Grid3,
    LayerParams, Probe, SignatureHasher,
};
use tmr_core::synthbench::{
    evaluate, generate_dataset, generate_splits, image_to_grid, iou_thresholds, EvalReport,
    PatternAnnotation, PredictionSet, Preset, Sample, SampleAnnotation,
};
use tmr_core::trainer::{
    decode_ablation, evaluate_model, run_ablation, AblationVariant, TrainConfig, Trainer,
};

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn rand_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Grid3<f64> {
    Grid3::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Grid3<f64>, b: &Grid3<f64>) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn random_params(rng: &mut ChaCha8Rng, mut p: LayerParams<f64>) -> LayerParams<f64> {
    p.weight
        .iter_mut()
        .chain(p.bias.iter_mut())
        .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    p
}

/// Max relative error of the parameter and input gradients of a layer under
/// the loss `<layer(x), r>`.
fn layer_check(
    seed: u64,
    params: LayerParams<f64>,
    input: Grid3<f64>,
    forward: fn(&Grid3<f64>, &LayerParams<f64>) -> tmr_core::Result<Grid3<f64>>,
    backward: fn(&Grid3<f64>, &mut LayerParams<f64>, &Grid3<f64>) -> tmr_core::Result<Grid3<f64>>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = forward(&input, &params).unwrap();
    let (h, w, d) = out.dims();
    let r = rand_grid(&mut rng, h, w, d);
    let mut p = params.clone();
    p.zero_grad();
    let d_in = backward(&input, &mut p, &r).unwrap();
    let grads = p.flat_grads();
    let mut probe = params.clone();
    let rep_p = grad_check(
        |v| {
            for (i, &x) in v.iter().enumerate() {
                *probe.value_mut(i) = x;
            }
            Ok(Probe::smooth(dot(&forward(&input, &probe).unwrap(), &r)))
        },
        &params.flat_values(),
        &grads,
        1e-5,
        None,
    )
    .unwrap();
    let (ih, iw, id) = input.dims();
    let rep_x = grad_check(
        |v| {
            let x = Grid3::from_vec(ih, iw, id, v.to_vec()).unwrap();
            Ok(Probe::smooth(dot(&forward(&x, &params).unwrap(), &r)))
        },
        input.values(),
        d_in.values(),
        1e-5,
        None,
    )
    .unwrap();
    rep_p.max_rel_err.max(rep_x.max_rel_err)
}

fn audit_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.backbone.mode = BackboneMode::Tiny { widths: vec![4, 6] };
    cfg.backbone.projection_out = 4;
    cfg.head_hidden = Some(6);
    cfg
}

#[test]
fn gradient_audit() {
    let start = Instant::now();
    let (mut layer_err, mut pipeline_err, mut loss_err, mut scale_err) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut pipeline_ok = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // projection and head linears
        let p = random_params(&mut rng, LayerParams::linear("linear", 5, 4));
        let x = rand_grid(&mut rng, 4, 5, 5);
        layer_err = layer_err.max(layer_check(seed, p, x, linear_forward, linear_backward));
        // head convolutions
        let p = random_params(&mut rng, LayerParams::conv3x3("conv", 3, 4));
        let x = rand_grid(&mut rng, 5, 6, 3);
        layer_err = layer_err.max(layer_check(seed, p, x, conv3x3_forward, conv3x3_backward));
        // conv3x3 -> LeakyReLU -> linear as used by both heads
        let head = HeadParams::<f64>::new("head", 4, 5, 4, &mut rng);
        let x = rand_grid(&mut rng, 5, 5, 4);
        let (out, tape) = head.forward(&x, 0.01).unwrap();
        let r = rand_grid(&mut rng, out.height(), out.width(), 4);
        let mut g = head.clone();
        g.backward(&x, &tape, &r, 0.01).unwrap();
        let grads: Vec<f64> = g
            .conv
            .flat_grads()
            .into_iter()
            .chain(g.linear.flat_grads())
            .collect();
        let point: Vec<f64> = head
            .conv
            .flat_values()
            .into_iter()
            .chain(head.linear.flat_values())
            .collect();
        let nc = head.conv.param_count();
        let mut probe = head.clone();
        let rep = grad_check(
            |v| {
                for (i, &val) in v.iter().enumerate() {
                    if i < nc {
                        *probe.conv.value_mut(i) = val;
                    } else {
                        *probe.linear.value_mut(i - nc) = val;
                    }
                }
                let (o, t) = probe.forward(&x, 0.01).unwrap();
                let mut sig = SignatureHasher::new();
                t.preact.values().iter().for_each(|z| sig.push(*z > 0.0));
                Ok(Probe {
                    value: dot(&o, &r),
                    signature: sig.finish(),
                })
            },
            &point,
            &grads,
            1e-5,
            None,
        )
        .unwrap();
        layer_err = layer_err.max(rep.max_rel_err);

        // template matching, both operands
        let f = rand_grid(&mut rng, 6, 7, 3);
        let t = rand_grid(&mut rng, 2, 3, 3);
        let r = rand_grid(&mut rng, 6, 7, 3);
        let (df, dt) = template_match_backward(&f, &t, &r).unwrap();
        let point: Vec<f64> = f.values().iter().chain(t.values()).copied().collect();
        let grads: Vec<f64> = df.values().iter().chain(dt.values()).copied().collect();
        let rep = grad_check(
            |v| {
                let fv = Grid3::from_vec(6, 7, 3, v[..126].to_vec()).unwrap();
                let tv = Grid3::from_vec(2, 3, 3, v[126..].to_vec()).unwrap();
                Ok(Probe::smooth(dot(
                    &template_match_raw(&fv, &tv).unwrap(),
                    &r,
                )))
            },
            &point,
            &grads,
            1e-5,
            None,
        )
        .unwrap();
        layer_err = layer_err.max(rep.max_rel_err);

        // presence loss on logits
        let gt = vec![
            BoxXYWH::new_unchecked(20.0, 18.0, 10.0, 12.0),
            BoxXYWH::new_unchecked(40.0, 30.0, 14.0, 8.0),
        ];
        let targets = extended_center_set(&gt, 8.0, 6, 7, DEFAULT_DELTA).unwrap();
        let logits = rand_grid(&mut rng, 6, 7, 1).map(|v| 3.0 * v);
        let (_, d_logits) = presence_loss_logits(&logits, &targets, LossReduction::Mean).unwrap();
        let rep = grad_check(
            |v| {
                let z = Grid3::from_vec(6, 7, 1, v.to_vec()).unwrap();
                Ok(Probe::smooth(
                    presence_loss_logits(&z, &targets, LossReduction::Mean)
                        .unwrap()
                        .0,
                ))
            },
            logits.values(),
            d_logits.values(),
            1e-5,
            None,
        )
        .unwrap();
        loss_err = loss_err.max(rep.max_rel_err);

        // full pipeline including decoding and gIoU
        let model = TmrModel::<f64>::new(audit_config(), seed).unwrap();
        let img = rand_grid(&mut rng, 32, 32, 3);
        let gt: Vec<BoxXYWH> = (0..3)
            .map(|_| {
                BoxXYWH::new_unchecked(
                    rng.gen_range(6.0..26.0),
                    rng.gen_range(6.0..26.0),
                    rng.gen_range(5.0..10.0),
                    rng.gen_range(5.0..10.0),
                )
            })
            .collect();
        let rep = audit_gradients(
            &model,
            &ModelInput::Image(img),
            &gt[0],
            &gt,
            AuditOptions {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        pipeline_ok &= rep.passes(1e-4);
        scale_err = rep
            .groups
            .iter()
            .filter(|g| g.name == "tm_scale")
            .map(|g| g.max_rel_err)
            .fold(scale_err, f64::max);
        pipeline_err = pipeline_err.max(rep.max_rel_err());
    }
    let elapsed = start.elapsed();
    let pass = layer_err < 1e-5
        && loss_err < 1e-5
        && pipeline_ok
        && pipeline_err < 1e-4
        && elapsed < Duration::from_secs(60);
    report(
        "gradient audit",
        pass,
        &format!("layers {layer_err:.2e}, tm scale {scale_err:.2e}, presence loss {loss_err:.2e}, pipeline {pipeline_err:.2e}, 10 seeds in {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn naive_template_match(f: &Grid3<f64>, t: &Grid3<f64>) -> Grid3<f64> {
    let (h, w, d) = f.dims();
    let (th, tw, _) = t.dims();
    let mut out = Grid3::zeros(h, w, d);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..d {
                let mut s = 0.0;
                for ty in 0..th as isize {
                    for tx in 0..tw as isize {
                        let (fy, fx) = (y + ty - th as isize / 2, x + tx - tw as isize / 2);
                        if fy >= 0 && fy < h as isize && fx >= 0 && fx < w as isize {
                            s += f.get(fy as usize, fx as usize, c)
                                * t.get(ty as usize, tx as usize, c);
                        }
                    }
                }
                out.set(y as usize, x as usize, c, s / (th * tw) as f64);
            }
        }
    }
    out
}

#[test]
fn template_matching_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_err = 0.0f64;
    let mut even = 0;
    for _ in 0..100 {
        let (h, w, d) = (
            rng.gen_range(3..12),
            rng.gen_range(3..12),
            rng.gen_range(1..5),
        );
        let (th, tw) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        even += (th % 2 == 0 || tw % 2 == 0) as usize;
        let f = rand_grid(&mut rng, h, w, d);
        let t = rand_grid(&mut rng, th, tw, d);
        let got = template_match_raw(&f, &t).unwrap();
        let want = naive_template_match(&f, &t);
        for (a, b) in got.values().iter().zip(want.values()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    // shift equivariance on the interior
    let mut shift_ok = true;
    for _ in 0..20 {
        let big = rand_grid(&mut rng, 20, 20, 2);
        let (th, tw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let t = rand_grid(&mut rng, th, tw, 2);
        let (sy, sx) = (rng.gen_range(0..4), rng.gen_range(0..4));
        let crop =
            |oy: usize, ox: usize| Grid3::from_fn(12, 12, 2, |y, x, c| big.get(y + oy, x + ox, c));
        let a = template_match_raw(&crop(0, 0), &t).unwrap();
        let b = template_match_raw(&crop(sy, sx), &t).unwrap();
        for y in th..12 - th - sy {
            for x in tw..12 - tw - sx {
                for c in 0..2 {
                    shift_ok &= b.get(y, x, c) == a.get(y + sy, x + sx, c);
                }
            }
        }
    }
    let pass = max_err < 1e-6 && shift_ok && even > 0;
    report(
        "template matching oracle",
        pass,
        &format!("100 pairs ({even} with an even side), max abs err {max_err:.2e}, interior shift equivariance exact: {shift_ok}"),
    );
    assert!(pass);
}

#[test]
fn decode_identities() {
    let stride = 8.0;
    let zeros = RegressionMap {
        grid: Grid3::<f64>::zeros(6, 7, 4),
    };
    let ex = BoxXYWH::new_unchecked(30.0, 22.0, 13.0, 9.0);
    let full = decode_boxes(&zeros, &ex, stride, DecodeVariant::Full).unwrap();
    let plain = decode_boxes(&zeros, &ex, stride, DecodeVariant::None).unwrap();
    let mut ok = true;
    for y in 0..6 {
        for x in 0..7 {
            let b = full.get(y, x);
            let p = plain.get(y, x);
            let c = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            ok &= (b.cx - c.0).abs() < 1e-9 && (b.cy - c.1).abs() < 1e-9;
            ok &= (b.w - ex.w).abs() < 1e-9 && (b.h - ex.h).abs() < 1e-9;
            ok &=
                (b.cx - p.cx).abs() < 1e-9 && (b.w - p.w).abs() < 1e-9 && (b.h - p.h).abs() < 1e-9;
        }
    }
    let ex2 = BoxXYWH::new_unchecked(ex.cx, ex.cy, 2.0 * ex.w, 2.0 * ex.h);
    let z2 = decode_boxes(&zeros, &ex2, stride, DecodeVariant::Full).unwrap();
    let delta = RegressionMap {
        grid: Grid3::from_fn(6, 7, 4, |_, _, c| [0.3, -0.2, 0.1, -0.15][c]),
    };
    let d1 = decode_boxes(&delta, &ex, stride, DecodeVariant::Full).unwrap();
    let d2 = decode_boxes(&delta, &ex2, stride, DecodeVariant::Full).unwrap();
    for y in 0..6 {
        for x in 0..7 {
            let c = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            let (a, b) = (d1.get(y, x), d2.get(y, x));
            ok &= (z2.get(y, x).w - 2.0 * full.get(y, x).w).abs() < 1e-9;
            ok &= (z2.get(y, x).h - 2.0 * full.get(y, x).h).abs() < 1e-9;
            ok &= ((b.cx - c.0) - 2.0 * (a.cx - c.0)).abs() < 1e-9;
            ok &= ((b.cy - c.1) - 2.0 * (a.cy - c.1)).abs() < 1e-9;
            ok &= (b.w - 2.0 * a.w).abs() < 1e-9 && (b.h - 2.0 * a.h).abs() < 1e-9;
        }
    }
    report("decode identities", ok, "zero regression reproduces the exemplar; doubling the exemplar doubles sizes and displacements");
    assert!(ok);
}

#[test]
fn giou_suite() {
    let a = BoxXYWH::new_unchecked(3.0, 4.0, 2.0, 5.0);
    let mut ok = (giou(&a, &a) - 1.0).abs() < 1e-12;
    let u1 = BoxXYWH::from_corners(0.0, 0.0, 1.0, 1.0);
    let u2 = BoxXYWH::from_corners(1.0, 0.0, 2.0, 1.0);
    ok &= giou(&u1, &u2).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rand_box = |rng: &mut ChaCha8Rng| {
        BoxXYWH::new_unchecked(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(0.1..8.0),
            rng.gen_range(0.1..8.0),
        )
    };
    for _ in 0..1000 {
        let (p, q) = (rand_box(&mut rng), rand_box(&mut rng));
        let g = giou(&p, &q);
        ok &= (g - giou(&q, &p)).abs() < 1e-12;
        ok &= g > -1.0 && g <= 1.0;
        // nested: shrink p inside itself
        let inner =
            BoxXYWH::new_unchecked(p.cx + 0.1 * p.w, p.cy - 0.1 * p.h, 0.5 * p.w, 0.6 * p.h);
        ok &= (giou(&p, &inner) - iou(&p, &inner)).abs() < 1e-12;
    }
    report(
        "gIoU suite",
        ok,
        "identity, edge adjacency, nesting, symmetry and range on 1000 random pairs",
    );
    assert!(ok);
}

#[test]
fn extended_center_set_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let mut positives = 0;
    for _ in 0..1000 {
        let stride = [4.0, 8.0, 16.0][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let gt: Vec<BoxXYWH> = (0..rng.gen_range(1..6))
            .map(|_| {
                BoxXYWH::new_unchecked(
                    rng.gen_range(0.0..w as f64 * stride),
                    rng.gen_range(0.0..h as f64 * stride),
                    rng.gen_range(2.0..6.0 * stride),
                    rng.gen_range(2.0..6.0 * stride),
                )
            })
            .collect();
        let t = extended_center_set(&gt, stride, h, w, DEFAULT_DELTA).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                let inside = gt
                    .iter()
                    .any(|b| (b.cx - px).abs() / b.w + (b.cy - py).abs() / b.h <= DEFAULT_DELTA);
                ok &= inside == t.assignment[y * w + x].is_some();
                positives += inside as usize;
            }
        }
    }
    // boundary cells: |dx|/w = 33/100 = delta exactly
    let b1 = BoxXYWH::new_unchecked(33.5, 0.5, 100.0, 1.0);
    let t = extended_center_set(&[b1], 1.0, 1, 80, DEFAULT_DELTA).unwrap();
    let boundary =
        t.assignment[0].is_some() && t.assignment[66].is_some() && t.assignment[67].is_none();
    let b2 = BoxXYWH::new_unchecked(0.5, 33.5, 1.0, 100.0);
    let t = extended_center_set(&[b2], 1.0, 80, 1, DEFAULT_DELTA).unwrap();
    let boundary = boundary && t.assignment[0].is_some() && t.assignment[66].is_some();
    let pass = ok && boundary;
    report(
        "extended center set suite",
        pass,
        &format!("1000 layouts match brute force ({positives} positive cells), boundary cells included: {boundary}"),
    );
    assert!(pass);
}

fn brute_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.map_or(true, |b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && iou(&dets[i].bbox, &dets[b].bbox) >= t {
                alive[i] = false;
            }
        }
    }
    out
}

#[test]
fn nms_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    for _ in 0..100 {
        let dets: Vec<Detection> = (0..200)
            .map(|_| Detection {
                bbox: BoxXYWH::new_unchecked(
                    rng.gen_range(0.0..120.0),
                    rng.gen_range(0.0..120.0),
                    rng.gen_range(4.0..30.0),
                    rng.gen_range(4.0..30.0),
                ),
                score: (rng.gen_range(0.0..1.0f64) * 50.0).round() / 50.0,
                exemplar_id: 0,
                scale_id: 0,
            })
            .collect();
        ok &= nms(&dets, 0.5) == brute_nms(&dets, 0.5);
    }
    report(
        "NMS oracle",
        ok,
        "greedy NMS equals brute force on 100 sets of 200 boxes",
    );
    assert!(ok);
}

/// Independent AP: for every prefix of the ranked list, recompute the
/// matching from scratch, then take the best precision at each recall level.
fn brute_force_ap(preds: &[PredictionSet], gts: &[SampleAnnotation], t: f64) -> f64 {
    let mut queries: Vec<(&str, u32, &[BoxXYWH])> = Vec::new();
    for s in gts {
        for p in &s.patterns {
            queries.push((&s.image, p.id, &p.boxes));
        }
    }
    let mut ranked: Vec<(usize, BoxXYWH, f64)> = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        if let Some(ps) = preds.iter().find(|p| p.image == q.0 && p.pattern == q.1) {
            let mut local = ps.boxes.clone();
            local.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked.extend(local.into_iter().map(|(b, s)| (qi, b, s)));
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let total: usize = queries.iter().map(|q| q.2.len()).sum();
    let mut curve = Vec::new();
    for k in 1..=ranked.len() {
        let mut tp = 0;
        for (qi, q) in queries.iter().enumerate() {
            let mut used = vec![false; q.2.len()];
            for (_, b, _) in ranked[..k].iter().filter(|r| r.0 == qi) {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in q.2.iter().enumerate() {
                    let v = iou(b, g);
                    if !used[j] && v >= t && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / k as f64, tp as f64 / total as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            curve
                .iter()
                .filter(|c| c.1 >= level)
                .map(|c| c.0)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

#[test]
fn metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err = 0.0f64;
    for case in 0..50 {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for i in 0..rng.gen_range(1..4) {
            let image = format!("{case}-{i}.png");
            let mut patterns = Vec::new();
            for pid in 0..rng.gen_range(1..3u32) {
                let boxes: Vec<BoxXYWH> = (0..rng.gen_range(1..5))
                    .map(|_| {
                        BoxXYWH::new_unchecked(
                            rng.gen_range(10.0..90.0),
                            rng.gen_range(10.0..90.0),
                            rng.gen_range(5.0..20.0),
                            rng.gen_range(5.0..20.0),
                        )
                    })
                    .collect();
                let scored: Vec<(BoxXYWH, f64)> = (0..rng.gen_range(0..7))
                    .map(|_| {
                        let g = boxes[rng.gen_range(0..boxes.len())];
                        let b = BoxXYWH::new_unchecked(
                            g.cx + rng.gen_range(-3.0..3.0),
                            g.cy + rng.gen_range(-3.0..3.0),
                            g.w * rng.gen_range(0.7..1.3),
                            g.h * rng.gen_range(0.7..1.3),
                        );
                        (b, (rng.gen_range(0.0..1.0f64) * 10.0).round() / 10.0)
                    })
                    .collect();
                preds.push(PredictionSet {
                    image: image.clone(),
                    pattern: pid,
                    boxes: scored,
                });
                patterns.push(PatternAnnotation {
                    id: pid,
                    exemplars: vec![boxes[0]],
                    boxes,
                });
            }
            gts.push(SampleAnnotation {
                image,
                width: 100,
                height: 100,
                patterns,
                edgeless: None,
            });
        }
        let r = evaluate(&preds, &gts).unwrap();
        let per_t: Vec<f64> = iou_thresholds()
            .iter()
            .map(|&t| brute_force_ap(&preds, &gts, t))
            .collect();
        let ap = per_t.iter().sum::<f64>() / 10.0;
        max_err = max_err
            .max((r.ap - ap).abs())
            .max((r.ap50 - per_t[0]).abs())
            .max((r.ap75 - per_t[5]).abs());
    }
    let g = BoxXYWH::new_unchecked(5.0, 5.0, 10.0, 10.0);
    let p = BoxXYWH::from_corners(0.0, 0.0, 10.0, 6.0);
    let one = evaluate(
        &[PredictionSet {
            image: "a".into(),
            pattern: 0,
            boxes: vec![(p, 0.9)],
        }],
        &[SampleAnnotation {
            image: "a".into(),
            width: 20,
            height: 20,
            patterns: vec![PatternAnnotation {
                id: 0,
                exemplars: vec![g],
                boxes: vec![g],
            }],
            edgeless: None,
        }],
    )
    .unwrap();
    let single = one.ap50 == 1.0 && one.ap75 == 0.0 && (one.ap - 0.3).abs() < 1e-12;
    let pass = max_err < 1e-6 && single;
    report(
        "metric oracle",
        pass,
        &format!(
            "50 random cases, max deviation {max_err:.2e}; IoU 0.6 case AP50 {} AP75 {} AP {:.3}",
            one.ap50, one.ap75, one.ap
        ),
    );
    assert!(pass);
}

pub const DESK_STEPS: usize = 400;
pub const DESK_BUDGET_SECS: f64 = 1800.0;

struct DeskRun {
    model: TmrModel<f32>,
    test: Vec<Sample>,
    report: EvalReport,
    seconds: f64,
    steps: usize,
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 20,
        cosine_decay: true,
        steps: DESK_STEPS,
        max_seconds: Some(DESK_BUDGET_SECS),
        ..Default::default()
    }
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (train, test) = generate_splits(Preset::LatticeEasy, 0, 400, 100).unwrap();
        let start = Instant::now();
        let mut trainer = Trainer::<f32>::new(desk_config()).unwrap();
        trainer.run(&train, None, None).unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let (report, _) = evaluate_model(&trainer.model, &test, &InferConfig::default()).unwrap();
        DeskRun {
            model: trainer.model,
            test,
            report,
            seconds,
            steps: trainer.step,
        }
    })
}

#[test]
fn desk_end_to_end() {
    let run = desk_run();
    let r = &run.report;
    let e2e = r.ap50 >= 0.70 && r.mae <= 2.0 && run.seconds <= DESK_BUDGET_SECS;
    report(
        "desk end-to-end (lattice-easy)",
        e2e,
        &format!(
            "{} steps in {:.0}s: AP {:.3} AP50 {:.3} AP75 {:.3} MAE {:.2} RMSE {:.2}",
            run.steps, run.seconds, r.ap, r.ap50, r.ap75, r.mae, r.rmse
        ),
    );

    // single-sample overfit
    let sample = generate_dataset(Preset::LatticeEasy, 99, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        steps: 500,
        lr: 1e-3,
        warmup_steps: 20,
        ..Default::default()
    };
    let mut trainer = Trainer::<f32>::new(cfg).unwrap();
    let log = trainer.run(&sample, None, None).unwrap();
    let first = log.entries[0].total;
    let last = log.entries.last().unwrap();
    let s = &sample[0];
    let pat = &s.annotation.patterns[0];
    let dets = tmr_core::infer::detect(
        &trainer.model,
        &ModelInput::Image(image_to_grid(&s.image)),
        &pat.exemplars,
        &InferConfig::default(),
    )
    .unwrap();
    let recovered = pat
        .boxes
        .iter()
        .filter(|g| dets.iter().any(|d| iou(&d.bbox, g) > 0.8))
        .count();
    let overfit = last.boxes < 0.05 && last.total < 0.1 * first && recovered == pat.boxes.len();
    report(
        "single-sample overfit",
        overfit,
        &format!(
            "L_B {:.4} after 500 steps, loss {:.4} -> {:.4}, {recovered}/{} boxes recovered at IoU > 0.8",
            last.boxes,
            first,
            last.total,
            pat.boxes.len()
        ),
    );
    assert!(e2e && overfit);
}

pub const ABLATION_STEPS: usize = 800;
pub const ABLATION_MARGIN: f64 = 0.03;

#[test]
fn ablation_direction() {
    let (train, test) = generate_splits(Preset::Bigram, 0, 400, 100).unwrap();
    let base = TrainConfig {
        lr: 1e-3,
        warmup_steps: 20,
        cosine_decay: true,
        steps: ABLATION_STEPS,
        ..Default::default()
    };
    let mut variants = vec![
        AblationVariant::new("features-only", MatchVariant::None, DecodeVariant::Full),
        AblationVariant::new("prototype", MatchVariant::Pm, DecodeVariant::Full),
    ];
    variants.extend(
        decode_ablation()
            .into_iter()
            .filter(|v| v.decode_variant != DecodeVariant::None),
    );
    let rows = run_ablation(&base, &variants, &train, &test, &InferConfig::default()).unwrap();
    let get = |name: &str| &rows.iter().find(|r| r.variant.name == name).unwrap().report;
    let (f, pm, tm) = (
        get("features-only"),
        get("prototype"),
        get(DecodeVariant::Full.name()),
    );
    let (b, c, d) = (
        get(DecodeVariant::Unconditioned.name()),
        get(DecodeVariant::ScaleOnly.name()),
        tm,
    );
    let matching = tm.ap - pm.ap >= ABLATION_MARGIN && pm.ap - f.ap >= ABLATION_MARGIN;
    let decoding = d.ap75 >= c.ap75 && c.ap75 - b.ap75 >= ABLATION_MARGIN;
    report(
        "ablation direction (matching)",
        matching,
        &format!(
            "AP template {:.3} > prototype {:.3} > features-only {:.3}",
            tm.ap, pm.ap, f.ap
        ),
    );
    report(
        "ablation direction (decoding)",
        decoding,
        &format!(
            "AP75 full {:.3} >= scale-only {:.3} > unconditioned {:.3}",
            d.ap75, c.ap75, b.ap75
        ),
    );
    assert!(matching && decoding);
}

#[test]
fn few_shot_monotonicity() {
    let run = desk_run();
    let infer = InferConfig {
        tau: 0.2,
        ..Default::default()
    };
    let mut superset = true;
    let mut recall_ok = true;
    let (mut r_multi, mut r_single_best) = (0.0, 0.0);
    let mut checked = 0;
    for s in run.test.iter().take(50) {
        let native = run
            .model
            .native_features(&ModelInput::Image(image_to_grid(&s.image)))
            .unwrap()
            .native;
        for p in &s.annotation.patterns {
            let recall = |c: &[Detection]| {
                p.boxes
                    .iter()
                    .filter(|g| c.iter().any(|d| iou(&d.bbox, g) >= 0.5))
                    .count() as f64
                    / p.boxes.len() as f64
            };
            let all = multi_scale_candidates(&run.model, &native, &p.exemplars, &infer).unwrap();
            let rk = recall(&all);
            let mut best = 0.0f64;
            for e in &p.exemplars {
                let one =
                    multi_scale_candidates(&run.model, &native, std::slice::from_ref(e), &infer)
                        .unwrap();
                superset &= one
                    .iter()
                    .all(|d| all.iter().any(|a| a.bbox == d.bbox && a.score == d.score));
                let r1 = recall(&one);
                recall_ok &= rk >= r1;
                best = best.max(r1);
            }
            r_multi += rk;
            r_single_best += best;
            checked += 1;
        }
    }
    let pass = superset && recall_ok && checked >= 50;
    report(
        "few-shot monotonicity",
        pass,
        &format!(
            "{checked} queries, mean candidate recall {:.3} with all exemplars vs {:.3} best single",
            r_multi / checked as f64,
            r_single_best / checked as f64
        ),
    );
    assert!(pass);
}

#[test]
fn determinism() {
    let a = generate_dataset(Preset::Mixed, 21, 6).unwrap();
    let b = generate_dataset(Preset::Mixed, 21, 6).unwrap();
    let data_same = a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.image.as_raw() == y.image.as_raw() && x.annotation == y.annotation);

    let mut cfg = TrainConfig {
        batch_size: 2,
        steps: 3,
        lr: 1e-3,
        ..Default::default()
    };
    cfg.model = audit_config();
    let l1 = Trainer::<f64>::new(cfg.clone())
        .unwrap()
        .run(&a, None, None)
        .unwrap();
    let l2 = Trainer::<f64>::new(cfg.clone())
        .unwrap()
        .run(&a, None, None)
        .unwrap();
    let logs_same = l1.losses() == l2.losses();

    let mut t = Trainer::<f32>::new(TrainConfig {
        model: audit_config(),
        ..cfg
    })
    .unwrap();
    t.run(&a, None, None).unwrap();
    let infer = InferConfig {
        tau: 0.05,
        ..Default::default()
    };
    let j1 = serde_json::to_string(&evaluate_model(&t.model, &a, &infer).unwrap().1).unwrap();
    let j2 = serde_json::to_string(&evaluate_model(&t.model, &a, &infer).unwrap().1).unwrap();
    let pass = data_same && logs_same && j1 == j2;
    report(
        "determinism",
        pass,
        &format!("datasets identical: {data_same}, f64 training logs identical: {logs_same}, detection JSON identical: {}", j1 == j2),
    );
    assert!(pass);
}
