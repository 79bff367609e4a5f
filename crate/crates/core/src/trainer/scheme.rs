//! Pre-training schemes.
//!
//! A scheme decides how background pixels are supervised and how the
//! cluster centres evolve. All schemes share the same training loop; they are
//! selected by name through [`schemes`].

use super::{embedder::embed_features, TrainConfig, TrainState};
use crate::cluster::{kmeans, KMeansOptions};
use crate::error::Result;
use crate::registry::Registry;
use crate::seed::derive_seed;
use crate::synth::Scene;
use crate::Mat;

pub trait PretrainScheme: Send + Sync {
    fn name(&self) -> &'static str;

    /// Background is an extra projection column trained with cross-entropy.
    fn background_as_class(&self, cfg: &TrainConfig) -> bool;

    /// Guidance runs at the start of every iteration.
    fn guidance_active(&self, cfg: &TrainConfig) -> bool;

    /// Centres follow the per-batch momentum update.
    fn online_centres(&self, cfg: &TrainConfig) -> bool;

    fn on_epoch_start(&self, _state: &mut TrainState, _scenes: &[Scene], _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

/// Merged-background supervision: background is one more class.
#[derive(Clone, Copy, Debug, Default)]
pub struct Standard;

/// Online background clustering with optional guidance. With background
/// mining disabled it falls back to the merged-background objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bcpt;

/// Centres recomputed by k-means over all training background pixels at the
/// start of every epoch and frozen for the epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct OfflineCluster;

pub fn schemes() -> Registry<dyn PretrainScheme> {
    let mut reg: Registry<dyn PretrainScheme> = Registry::new("pre-training scheme");
    reg.register("standard", || Box::new(Standard))
        .register("bcpt", || Box::new(Bcpt))
        .register("offline", || Box::new(OfflineCluster));
    reg
}

impl PretrainScheme for Standard {
    fn name(&self) -> &'static str {
        "standard"
    }

    fn background_as_class(&self, _cfg: &TrainConfig) -> bool {
        true
    }

    fn guidance_active(&self, _cfg: &TrainConfig) -> bool {
        false
    }

    fn online_centres(&self, _cfg: &TrainConfig) -> bool {
        false
    }
}

impl PretrainScheme for Bcpt {
    fn name(&self) -> &'static str {
        "bcpt"
    }

    fn background_as_class(&self, cfg: &TrainConfig) -> bool {
        !cfg.bmc_enabled
    }

    fn guidance_active(&self, cfg: &TrainConfig) -> bool {
        cfg.ocg_enabled
    }

    fn online_centres(&self, cfg: &TrainConfig) -> bool {
        cfg.bmc_enabled
    }
}

impl PretrainScheme for OfflineCluster {
    fn name(&self) -> &'static str {
        "offline"
    }

    fn background_as_class(&self, _cfg: &TrainConfig) -> bool {
        false
    }

    fn guidance_active(&self, _cfg: &TrainConfig) -> bool {
        false
    }

    fn online_centres(&self, _cfg: &TrainConfig) -> bool {
        false
    }

    fn on_epoch_start(&self, state: &mut TrainState, scenes: &[Scene], cfg: &TrainConfig) -> Result<()> {
        let mut columns = Vec::new();
        for scene in scenes {
            let emb = embed_features(&state.params, &scene.features)?;
            for (p, label) in scene.train_labels.iter().enumerate() {
                if label.is_background() {
                    columns.push(emb.column(p).into_owned());
                }
            }
        }
        if columns.len() < cfg.k {
            return Ok(());
        }
        let points = Mat::from_columns(&columns);
        let res = kmeans(
            &points,
            cfg.k,
            derive_seed(cfg.seed, "offline", state.epoch),
            KMeansOptions::default(),
        )?;
        let centers = state.clusters.centers_mut();
        for (k, c) in res.centers.column_iter().enumerate() {
            let norm = c.norm();
            if norm > 0.0 {
                centers.set_column(k, &(c / norm));
            }
        }
        Ok(())
    }
}
