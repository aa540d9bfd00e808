//! Full-pipeline gradient audit: analytic gradients of the training loss
//! against central differences, per parameter group, in double precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::BoxXYWH;
use crate::error::Result;
use crate::model::{ModelInput, TmrModel};
use crate::numerics::{grad_check, GradCheckReport};

pub const DEFAULT_AUDIT_STEP: f64 = 1e-4;
pub const DEFAULT_AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GroupAudit {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Frozen groups are not differentiated; their gradient must be zero.
    pub frozen: bool,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub loss: f64,
    pub groups: Vec<GroupAudit>,
}

impl AuditReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| !g.frozen)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Every live group checked at least one coordinate under `tol`, and
    /// every frozen group has an exactly zero gradient.
    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| {
            if g.frozen {
                g.max_abs_grad == 0.0
            } else {
                g.checked > 0 && g.max_rel_err < tol
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub step: f64,
    /// Coordinates sampled per parameter group (all if the group is smaller).
    pub coords_per_group: usize,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_AUDIT_STEP,
            coords_per_group: 48,
            seed: 0,
        }
    }
}

/// Compares analytic and numeric gradients of the loss for one sample.
pub fn audit_gradients(
    model: &TmrModel<f64>,
    input: &ModelInput<f64>,
    exemplar: &BoxXYWH,
    gt: &[BoxXYWH],
    opts: AuditOptions,
) -> Result<AuditReport> {
    let mut analytic = model.clone();
    analytic.zero_grad();
    let loss = analytic
        .accumulate_gradients(input, exemplar, gt, 1.0)?
        .total;
    let n_backbone = model.backbone.as_ref().map_or(0, |b| b.layers.len());
    let frozen_backbone = model.config.freeze_backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    for (gi, p) in analytic.params().into_iter().enumerate() {
        let grads = p.flat_grads();
        let max_abs_grad = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if frozen_backbone && gi < n_backbone {
            groups.push(GroupAudit {
                name: p.name.clone(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                checked: 0,
                skipped_kinks: 0,
                frozen: true,
                max_abs_grad,
            });
            continue;
        }
        let point = p.flat_values();
        let mut coords: Vec<usize> = (0..point.len()).collect();
        if coords.len() > opts.coords_per_group {
            coords.shuffle(&mut rng);
            coords.truncate(opts.coords_per_group);
            coords.sort_unstable();
        }
        let mut probe_model = model.clone();
        let report: GradCheckReport = grad_check(
            |values| {
                let target = &mut probe_model.params_mut()[gi];
                for (i, &v) in values.iter().enumerate() {
                    *target.value_mut(i) = v;
                }
                probe_model.loss_probe(input, exemplar, gt)
            },
            &point,
            &grads,
            opts.step,
            Some(&coords),
        )?;
        groups.push(GroupAudit {
            name: p.name.clone(),
            max_rel_err: report.max_rel_err,
            max_abs_err: report.max_abs_err,
            checked: report.checked,
            skipped_kinks: report.skipped_kinks,
            frozen: false,
            max_abs_grad,
        });
    }
    Ok(AuditReport { loss, groups })
}
