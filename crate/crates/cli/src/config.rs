use std::path::Path;

use bcpt_core::eval::EvalConfig;
use bcpt_core::synth::SceneConfig;
use bcpt_core::trainer::TrainConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::ManifestBuilder;

/// Everything a command can be configured with, as one JSON document.
/// Each command reads the sections it needs and echoes the whole thing into
/// its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub fold_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            fold_seed: 0,
            n_train: 20,
            n_eval: 10,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, or the given file recorded as a manifest input.
    pub fn load(m: &mut ManifestBuilder, path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = m.read_input(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Eval seeds keep their count but start at `seed`.
    pub fn shift_eval_seeds(&mut self, seed: u64) {
        let n = self.eval.eval_seeds.len().max(1) as u64;
        self.eval.eval_seeds = (seed..seed + n).collect();
    }
}

/// Flags mirroring [`TrainConfig`] fields. Unset flags keep the config value.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// standard, bcpt or offline
    #[arg(long)]
    pub scheme: Option<String>,
    /// Number of background clusters
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the background mining loss
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Centre momentum
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable background mining (background becomes an extra class)
    #[arg(long)]
    pub no_bmc: bool,
    /// Disable guidance of the cluster centres
    #[arg(long)]
    pub no_ocg: bool,
    /// argmax or injective
    #[arg(long)]
    pub mapping: Option<String>,
    /// literal or normalized
    #[arg(long)]
    pub guided_update: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub batch_pixels: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = &self.scheme {
            cfg.scheme = v.clone();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if self.no_bmc {
            cfg.bmc_enabled = false;
        }
        if self.no_ocg {
            cfg.ocg_enabled = false;
        }
        if let Some(v) = &self.mapping {
            cfg.mapping = v.clone();
        }
        if let Some(v) = &self.guided_update {
            cfg.guided_update = v.clone();
        }
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.batch_pixels {
            cfg.batch_pixels = v;
        }
    }
}
