//! Run configuration files. Top-level keys are the training options; an
//! optional `infer` table holds the inference options.
//!
//! ```toml
//! lr = 1e-3
//! steps = 400
//! warmup_steps = 20
//! cosine_decay = true
//!
//! [infer]
//! tau = 0.4
//! scales = [32, 64]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tmr_core::infer::InferConfig;
use tmr_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?
        };
        cfg.train.validate()?;
        cfg.infer.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
