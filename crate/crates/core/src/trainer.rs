//! Training loop, model evaluation on annotated samples, and ablation runs.
//!
//! Each optimizer step accumulates `batch_size` draws. A draw picks a
//! sample, one of its patterns, and one of that pattern's boxes as the
//! exemplar; the pattern's boxes are the targets. The draws for step `s`
//! come from a stream seeded by `(seed, s)`, so a resumed run replays the
//! same batches as an uninterrupted one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYWH;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{arg_err, config_err, Result, TmrError};
use crate::head::DecodeVariant;
use crate::infer::{detect, InferConfig};
use crate::loss::LossReduction;
use crate::matching::MatchVariant;
use crate::model::{ModelConfig, ModelInput, TmrModel};
use crate::numerics::{optimizer_step, AdamWConfig, OptimState, Real};
use crate::synthbench::{
    derive_seed, evaluate, image_to_grid, prediction_set, EvalReport, PredictionSet, Sample,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.tmrc";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Logical batch, realized by gradient accumulation.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to zero at `steps`.
    pub cosine_decay: bool,
    pub model: ModelConfig,
    pub match_variant: Option<MatchVariant>,
    pub decode_variant: Option<DecodeVariant>,
    pub loss_reduction: Option<LossReduction>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Steps between evaluation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Wall-clock budget; training stops at the first step past it.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            warmup_steps: 0,
            cosine_decay: false,
            model: ModelConfig::desk(),
            match_variant: None,
            decode_variant: None,
            loss_reduction: None,
            checkpoint_every: 0,
            eval_every: 0,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return config_err("weight_decay must be non-negative");
        }
        self.model_config().validate()
    }

    /// Model config with the variant switches applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(v) = self.match_variant {
            m.match_variant = v;
        }
        if let Some(v) = self.decode_variant {
            m.decode_variant = v;
        }
        if let Some(r) = self.loss_reduction {
            m.loss_reduction = r;
        }
        m
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if self.cosine_decay && self.steps > 0 {
            let t = (step as f64 / self.steps as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub presence: f64,
    pub boxes: f64,
    pub total: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.total).collect()
    }
}

/// One draw: sample index, pattern index, exemplar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub sample: usize,
    pub pattern: usize,
    pub exemplar: BoxXYWH,
}

/// The draws of one optimizer step.
pub fn draws_for_step(samples: &[Sample], seed: u64, step: usize, batch: usize) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64));
    (0..batch)
        .map(|_| {
            let sample = rng.gen_range(0..samples.len());
            let pats = &samples[sample].annotation.patterns;
            let pattern = rng.gen_range(0..pats.len());
            let boxes = &pats[pattern].boxes;
            let exemplar = boxes[rng.gen_range(0..boxes.len())];
            Draw {
                sample,
                pattern,
                exemplar,
            }
        })
        .collect()
}

/// Where checkpoints and the JSONL log go.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: TmrModel<T>,
    pub optim: OptimState<T>,
    /// Number of optimizer steps taken so far.
    pub step: usize,
}

fn adamw(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TmrModel::new(config.model_config(), config.seed)?;
        if model.backbone.is_none() {
            return config_err("training from images needs the tiny backbone");
        }
        let optim = OptimState::new(adamw(&config));
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
        })
    }

    /// Continues from a checkpoint; its model config must match.
    pub fn resume(config: TrainConfig, ck: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.model.config != config.model_config() {
            return config_err("checkpoint model config differs from the training config");
        }
        let mut model: TmrModel<T> = ck.model.cast();
        let mut optim = OptimState::<T>::new(adamw(&config));
        if let Some(moments) = ck.moments {
            let moments = moments
                .into_iter()
                .map(|(m, v)| {
                    let c = |x: Vec<f32>| x.into_iter().map(|a| T::lit(f64::from(a))).collect();
                    (c(m), c(v))
                })
                .collect();
            optim.import_moments(ck.step, &model.trainable_params_mut(), moments)?;
        }
        Ok(Self {
            config,
            model,
            optim,
            step: ck.step as usize,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model.cast(), Some(&self.optim.cast()))
    }

    /// One optimizer step; returns the mean loss components.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<LogEntry> {
        if samples.is_empty() {
            return arg_err("training set is empty");
        }
        let batch = self.config.batch_size;
        let draws = draws_for_step(samples, self.config.seed, self.step, batch);
        let weight = 1.0 / batch as f64;
        let (mut lp, mut lb, mut total) = (0.0, 0.0, 0.0);
        self.model.zero_grad();
        for d in &draws {
            let s = &samples[d.sample];
            let input = ModelInput::Image(image_to_grid::<T>(&s.image));
            let gt = &s.annotation.patterns[d.pattern].boxes;
            let l = self
                .model
                .accumulate_gradients(&input, &d.exemplar, gt, weight)?;
            if !l.total.is_finite() {
                return Err(TmrError::Numeric(format!(
                    "non-finite loss at step {} (sample {}, pattern {})",
                    self.step, s.annotation.image, d.pattern
                )));
            }
            lp += l.presence * weight;
            lb += l.boxes * weight;
            total += l.total * weight;
        }
        let lr = self.config.lr_at(self.step);
        self.optim.config.lr = lr;
        optimizer_step(&mut self.model.trainable_params_mut(), &mut self.optim)?;
        self.step += 1;
        Ok(LogEntry {
            step: self.step,
            presence: lp,
            boxes: lb,
            total,
            lr,
            elapsed_ms: 0,
            eval: None,
        })
    }

    /// Trains until `config.steps` (or the time budget), logging every step.
    /// On a non-finite loss the last good model is checkpointed (when an
    /// output directory is given) and the error is returned.
    pub fn run(
        &mut self,
        train: &[Sample],
        eval: Option<(&[Sample], &InferConfig)>,
        out: Option<&RunOutput>,
    ) -> Result<TrainLog> {
        let start = Instant::now();
        let mut log = TrainLog::default();
        let mut sink = match out {
            Some(o) => {
                std::fs::create_dir_all(&o.dir)?;
                Some(BufWriter::new(
                    File::options()
                        .create(true)
                        .append(true)
                        .open(o.dir.join(LOG_FILE))?,
                ))
            }
            None => None,
        };
        while self.step < self.config.steps {
            if let Some(budget) = self.config.max_seconds {
                if start.elapsed().as_secs_f64() >= budget {
                    log::info!("time budget reached after {} steps", self.step);
                    break;
                }
            }
            let mut entry = match self.train_step(train) {
                Ok(e) => e,
                Err(e @ TmrError::Numeric(_)) => {
                    if let Some(o) = out {
                        self.model.zero_grad();
                        self.save(o.checkpoint_path())?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            entry.elapsed_ms = start.elapsed().as_millis() as u64;
            let every = self.config.eval_every;
            if let Some((eval_set, infer)) = eval {
                if every > 0 && (self.step % every == 0 || self.step == self.config.steps) {
                    entry.eval = Some(evaluate_model(&self.model, eval_set, infer)?.0);
                }
            }
            if let Some(w) = sink.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
                w.flush()?;
            }
            log.entries.push(entry);
            if let Some(o) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save(o.checkpoint_path())?;
                }
            }
        }
        if let Some(o) = out {
            self.save(o.checkpoint_path())?;
        }
        Ok(log)
    }
}

/// Detections for every (sample, pattern) query using the pattern's
/// exemplars, and the metrics against the annotations.
pub fn evaluate_model<T: Real>(
    model: &TmrModel<T>,
    samples: &[Sample],
    infer: &InferConfig,
) -> Result<(EvalReport, Vec<PredictionSet>)> {
    let mut preds = Vec::new();
    for s in samples {
        let input = ModelInput::Image(image_to_grid::<T>(&s.image));
        for p in &s.annotation.patterns {
            let exemplars = if p.exemplars.is_empty() {
                &p.boxes[..1]
            } else {
                &p.exemplars[..]
            };
            let dets = detect(model, &input, exemplars, infer)?;
            preds.push(prediction_set(&s.annotation.image, p.id, &dets));
        }
    }
    let gts: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    Ok((evaluate(&preds, &gts)?, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub match_variant: MatchVariant,
    pub decode_variant: DecodeVariant,
}

impl AblationVariant {
    pub fn new(name: &str, match_variant: MatchVariant, decode_variant: DecodeVariant) -> Self {
        Self {
            name: name.into(),
            match_variant,
            decode_variant,
        }
    }
}

/// Matching-feature rows, all with full decoding.
pub fn matching_ablation() -> Vec<AblationVariant> {
    [
        ("features-only", MatchVariant::None),
        ("template-only", MatchVariant::TmOnly),
        ("template-cosine", MatchVariant::TmCos),
        ("prototype", MatchVariant::Pm),
        ("template", MatchVariant::Tm),
    ]
    .into_iter()
    .map(|(n, v)| AblationVariant::new(n, v, DecodeVariant::Full))
    .collect()
}

/// Box-decoding rows, all with template matching.
pub fn decode_ablation() -> Vec<AblationVariant> {
    DecodeVariant::ALL
        .into_iter()
        .map(|d| AblationVariant::new(d.name(), MatchVariant::Tm, d))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub steps: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Trains and evaluates one model per variant with the same seed and data.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[AblationVariant],
    train: &[Sample],
    test: &[Sample],
    infer: &InferConfig,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                match_variant: Some(v.match_variant),
                decode_variant: Some(v.decode_variant),
                ..base.clone()
            };
            let mut trainer = Trainer::<f32>::new(cfg)?;
            let log = trainer.run(train, None, None)?;
            let (report, _) = evaluate_model(&trainer.model, test, infer)?;
            log::info!(
                "ablation {}: AP {:.4} AP50 {:.4} AP75 {:.4}",
                v.name,
                report.ap,
                report.ap50,
                report.ap75
            );
            Ok(AblationRow {
                variant: v.clone(),
                steps: trainer.step,
                final_loss: log.entries.last().map_or(f64::NAN, |e| e.total),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneMode;
    use crate::synthbench::{generate_dataset, Preset};

    fn tiny_config() -> TrainConfig {
        let mut model = ModelConfig::desk();
        model.backbone.mode = BackboneMode::Tiny {
            widths: vec![4, 8, 8],
        };
        model.backbone.projection_out = 8;
        model.head_hidden = Some(8);
        TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            steps: 3,
            model,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let data = generate_dataset(Preset::Bigram, 1, 2).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let log = t.run(&data, None, None).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(
            t.model,
            TmrModel::new(cfg.model_config(), cfg.seed).unwrap()
        );
    }

    #[test]
    fn draws_depend_only_on_seed_and_step() {
        let data = generate_dataset(Preset::Bigram, 1, 4).unwrap();
        assert_eq!(
            draws_for_step(&data, 5, 3, 8),
            draws_for_step(&data, 5, 3, 8)
        );
        assert_ne!(
            draws_for_step(&data, 5, 3, 8),
            draws_for_step(&data, 5, 4, 8)
        );
        for d in draws_for_step(&data, 5, 0, 32) {
            assert!(data[d.sample].annotation.patterns[d.pattern]
                .boxes
                .contains(&d.exemplar));
        }
    }

    #[test]
    fn resume_replays_the_same_losses() {
        let data = generate_dataset(Preset::Bigram, 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput {
            dir: dir.path().to_path_buf(),
        };
        let cfg = TrainConfig {
            steps: 4,
            ..tiny_config()
        };
        let full = Trainer::<f32>::new(cfg.clone())
            .unwrap()
            .run(&data, None, None)
            .unwrap();

        let mut first = Trainer::<f32>::new(TrainConfig {
            steps: 2,
            ..cfg.clone()
        })
        .unwrap();
        first.run(&data, None, Some(&out)).unwrap();
        let ck = crate::checkpoint::load_checkpoint(out.checkpoint_path()).unwrap();
        let mut second = Trainer::<f32>::resume(cfg, ck).unwrap();
        let rest = second.run(&data, None, None).unwrap();
        assert_eq!(full.losses()[2..], rest.losses()[..]);
    }

    #[test]
    fn config_validation_and_schedule() {
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let c = TrainConfig {
            warmup_steps: 4,
            cosine_decay: true,
            steps: 8,
            lr: 1.0,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.25);
        assert!((c.lr_at(4) - 0.5).abs() < 1e-12);
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(
            serde_json::from_str::<TrainConfig>(&json).unwrap(),
            TrainConfig::default()
        );
    }
}
