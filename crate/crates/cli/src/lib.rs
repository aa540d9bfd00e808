//! `tmr` command line: dataset generation, training, evaluation, detection,
//! the gradient audit, and the HTTP service.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, unreadable or
//! invalid inputs), 2 for internal failures.

pub mod config;
pub mod error;
pub mod service;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmr_core::audit::{audit_gradients, AuditOptions, AuditReport, DEFAULT_AUDIT_TOLERANCE};
use tmr_core::backbone::BackboneMode;
use tmr_core::boxes::BoxXYWH;
use tmr_core::checkpoint::load_checkpoint;
use tmr_core::infer::Detection;
use tmr_core::model::{ModelConfig, ModelInput, TmrModel};
use tmr_core::numerics::Grid3;
use tmr_core::synthbench::{
    edgeless_transform, evaluate, generate_dataset, load_dataset, read_json, save_dataset,
    write_json, EdgelessMode, PredictionSet, Preset, SampleAnnotation,
};
use tmr_core::trainer::{evaluate_model, RunOutput, Trainer};

use config::RunConfig;
use error::{CliError, CliResult};
use service::{DetectOptions, LoadedModel};

#[derive(Debug, Parser)]
#[command(name = "tmr", version, about = "Few-shot repeated-pattern detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PNG images plus JSON annotations).
    Generate {
        #[arg(long, default_value = "lattice-easy", value_parser = parse_preset)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Crop labels to one side of each box (L, R, T, B, TL, TR, BL, BR).
        #[arg(long)]
        edgeless: Option<EdgelessMode>,
    },
    /// Train a model; writes a checkpoint and a JSONL log to `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out dataset evaluated every `eval_every` steps.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Score predictions (`--pred` + `--gt`) or a model on a dataset (`--model` + `--data`).
    Eval {
        #[arg(long, requires = "gt", conflicts_with_all = ["model", "data"])]
        pred: Option<PathBuf>,
        /// Annotation list (JSON) or dataset directory.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Also write the model's predictions here.
        #[arg(long, requires = "model")]
        pred_out: Option<PathBuf>,
    },
    /// Detect instances of the pattern shown by the exemplars.
    Detect {
        #[arg(long)]
        image: PathBuf,
        /// Exemplar box `cx,cy,w,h` in pixels; repeat for few-shot.
        #[arg(long = "exemplar", required = true, value_parser = parse_box)]
        exemplars: Vec<BoxXYWH>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Feature-map resolutions (cells along the longer side), e.g. `32,64`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Use only the first exemplar.
        #[arg(long)]
        single: bool,
    },
    /// Run the HTTP detection service.
    Serve {
        /// Checkpoint to serve; repeat to offer several matching variants.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check analytic gradients of a small model against finite differences.
    Audit {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_AUDIT_TOLERANCE)]
        tol: f64,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).map_err(|e| e.to_string())
}

fn parse_box(s: &str) -> Result<BoxXYWH, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [cx, cy, w, h] = v[..] else {
        return Err(format!("expected cx,cy,w,h, got {s:?}"));
    };
    BoxXYWH::new(cx, cy, w, h).map_err(|e| e.to_string())
}

/// Output of `tmr detect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub image: String,
    pub model_version: String,
    pub detections: Vec<Detection>,
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command, writing its machine-readable output to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Generate {
            preset,
            seed,
            n,
            out: dir,
            edgeless,
        } => {
            let mut samples = generate_dataset(preset, seed, n)?;
            if let Some(mode) = edgeless {
                for s in &mut samples {
                    s.annotation = edgeless_transform(&s.annotation, mode)?;
                }
            }
            save_dataset(&dir, &samples)?;
            emit(
                out,
                &serde_json::json!({ "out": dir, "samples": samples.len() }),
            )
        }
        Command::Train {
            data,
            out: dir,
            config,
            eval_data,
            steps,
            lr,
            batch_size,
            seed,
            resume,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.seed = seed.unwrap_or(t.seed);
            t.validate()?;
            let train = load_dataset(&data)?;
            let eval = eval_data.as_deref().map(load_dataset).transpose()?;
            let run_out = RunOutput { dir };
            let mut trainer = if resume {
                Trainer::<f32>::resume(
                    cfg.train.clone(),
                    load_checkpoint(run_out.checkpoint_path())?,
                )?
            } else {
                Trainer::<f32>::new(cfg.train.clone())?
            };
            let log = trainer.run(
                &train,
                eval.as_deref().map(|e| (e, &cfg.infer)),
                Some(&run_out),
            )?;
            emit(
                out,
                &serde_json::json!({
                    "steps": trainer.step,
                    "final_loss": log.entries.last().map(|e| e.total),
                    "checkpoint": run_out.checkpoint_path(),
                }),
            )
        }
        Command::Eval {
            pred,
            gt,
            model,
            data,
            config,
            tau,
            pred_out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            cfg.infer.tau = tau.unwrap_or(cfg.infer.tau);
            cfg.infer.validate()?;
            match (pred, gt, model, data) {
                (Some(pred), Some(gt), None, None) => {
                    let preds: Vec<PredictionSet> = read_json(&pred)?;
                    emit(out, &evaluate(&preds, &load_annotations(&gt)?)?)
                }
                (None, None, Some(model), Some(data)) => {
                    let loaded = LoadedModel::load(&model)?;
                    let samples = load_dataset(&data)?;
                    let (report, preds) = evaluate_model(&loaded.model, &samples, &cfg.infer)?;
                    if let Some(p) = pred_out {
                        write_json(&p, &preds)?;
                    }
                    emit(out, &report)
                }
                _ => Err(CliError::user(
                    "eval needs either --pred and --gt, or --model and --data",
                )),
            }
        }
        Command::Detect {
            image,
            exemplars,
            model,
            config,
            tau,
            scales,
            single,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let mut opts = DetectOptions::from_infer(&cfg.infer);
            opts.tau = tau.unwrap_or(opts.tau);
            opts.scales = scales.unwrap_or(opts.scales);
            opts.aggregate = !single;
            let loaded = LoadedModel::load(&model)?;
            let bytes = std::fs::read(&image)
                .map_err(|e| CliError::user(format!("{}: {e}", image.display())))?;
            let img = service::decode_image(&bytes)?;
            let detections = service::run_detection(&loaded, &img, &exemplars, &opts)?;
            emit(
                out,
                &DetectOutput {
                    image: image.display().to_string(),
                    model_version: loaded.version,
                    detections,
                },
            )
        }
        Command::Serve {
            models,
            host,
            port,
            config,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let loaded = models
                .iter()
                .map(|p| LoadedModel::load(p))
                .collect::<CliResult<Vec<_>>>()?;
            let app = service::router(loaded, cfg.infer)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(app, &format!("{host}:{port}")))
        }
        Command::Audit { seeds, tol } => {
            let reports = (0..seeds).map(audit_once).collect::<CliResult<Vec<_>>>()?;
            let worst = reports
                .iter()
                .map(AuditReport::max_rel_err)
                .fold(0.0, f64::max);
            let passed = reports.iter().all(|r| r.passes(tol));
            emit(
                out,
                &serde_json::json!({ "seeds": seeds, "max_rel_err": worst, "passed": passed, "reports": reports }),
            )?;
            if passed {
                Ok(())
            } else {
                Err(CliError::Internal(format!(
                    "gradient audit failed: max relative error {worst:.3e}"
                )))
            }
        }
    }
}

fn emit<S: Serialize>(out: &mut dyn Write, value: &S) -> CliResult<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_annotations(path: &Path) -> CliResult<Vec<SampleAnnotation>> {
    if path.is_dir() {
        Ok(load_dataset(path)?
            .into_iter()
            .map(|s| s.annotation)
            .collect())
    } else {
        Ok(read_json(path)?)
    }
}

/// Audit of a narrow model on a random 32x32 image.
fn audit_once(seed: u64) -> CliResult<AuditReport> {
    let mut cfg = ModelConfig::desk();
    cfg.backbone.mode = BackboneMode::Tiny { widths: vec![4, 6] };
    cfg.backbone.projection_out = 4;
    cfg.head_hidden = Some(6);
    let model = TmrModel::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Grid3::from_fn(32, 32, 3, |_, _, _| rng.gen_range(-1.0..1.0));
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
    Ok(audit_gradients(
        &model,
        &ModelInput::Image(img),
        &gt[0],
        &gt,
        AuditOptions {
            seed,
            ..Default::default()
        },
    )?)
}
