//! Pre-training loop.
//!
//! Each iteration runs, in order: guidance (when active), the embedder
//! forward pass, similarity and assignment of background pixels, the loss
//! with backpropagation through the embedder, an SGD-with-momentum update of
//! the embedder and projection vectors, and finally the momentum update of
//! the cluster centres from this batch's aggregates. Assignments are treated
//! as constants and the centres never receive gradient.

mod checkpoint;
pub mod embedder;
mod scheme;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embedder::{embed, embed_features, EmbedderParams, ForwardCache, Layer};
pub use scheme::{schemes, Bcpt, OfflineCluster, PretrainScheme, Standard};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::cluster::{aggregate, assign, ema_update, similarity, AssignmentMatrix, ClusterBank, EmbeddingBatch, PixelLabel};
use crate::error::{Error, Result};
use crate::guidance::{guidance_step, mapping_solvers, update_rules, GuidanceSettings};
use crate::losses::{objective, BackgroundObjective, LossReport, ProjectionBank, DEFAULT_ALPHA};
use crate::seed::{rng_for, Rng};
use crate::synth::{Fold, Scene};
use crate::Mat;

/// Cluster count used unless configured otherwise.
pub const DEFAULT_K: usize = 6;
/// Momentum of the centre updates.
pub const DEFAULT_MU: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Registered [`PretrainScheme`] name.
    pub scheme: String,
    pub k: usize,
    pub mu: f64,
    pub alpha: f64,
    /// Background mining with cluster centres.
    pub bmc_enabled: bool,
    /// Online clustering with guidance.
    pub ocg_enabled: bool,
    pub mapping: String,
    pub guided_update: String,
    pub guidance_stride: u64,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: u64,
    pub batch_pixels: usize,
    pub scenes_per_step: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Divide the summed loss by the number of pixels in the batch.
    pub normalize_loss: bool,
    pub projection_init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: "bcpt".into(),
            k: DEFAULT_K,
            mu: DEFAULT_MU,
            alpha: DEFAULT_ALPHA,
            bmc_enabled: true,
            ocg_enabled: true,
            mapping: "argmax".into(),
            guided_update: "literal".into(),
            guidance_stride: 1,
            lr: 2e-4,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            epochs: 100,
            batch_pixels: 256,
            scenes_per_step: 2,
            hidden_dim: 64,
            embed_dim: 16,
            normalize_loss: false,
            projection_init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn guidance_settings(&self) -> GuidanceSettings {
        GuidanceSettings {
            enabled: self.ocg_enabled,
            mapping: self.mapping.clone(),
            update_rule: self.guided_update.clone(),
            stride: self.guidance_stride,
        }
    }

    /// Checks the config against a fold with `n_base` base classes.
    pub fn validate(&self, n_base: usize) -> Result<()> {
        let scheme = schemes().create(&self.scheme)?;
        mapping_solvers().create(&self.mapping)?;
        update_rules().create(&self.guided_update)?;
        if self.k < 2 {
            return Err(Error::invalid(format!("K = {} but at least 2 centres are required", self.k)));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::invalid(format!("mu = {} outside (0, 1)", self.mu)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be finite and >= 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_pixels == 0 || self.scenes_per_step == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("batch_pixels, scenes_per_step and embed_dim must be positive"));
        }
        if scheme.guidance_active(self) {
            if self.guidance_stride == 0 {
                return Err(Error::invalid("guidance stride must be positive"));
            }
            if n_base < self.k - 1 {
                return Err(Error::invalid(format!(
                    "guidance needs K-1 = {} guidance vectors but there are only {n_base} base classes",
                    self.k - 1
                )));
            }
        }
        Ok(())
    }

    fn hidden_layers(&self) -> Vec<usize> {
        if self.hidden_dim == 0 {
            vec![]
        } else {
            vec![self.hidden_dim]
        }
    }
}

/// Everything that evolves during training, including the batch sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EmbedderParams,
    pub velocity: EmbedderParams,
    pub projections: ProjectionBank,
    pub projection_velocity: Mat,
    pub clusters: ClusterBank,
    pub iteration: u64,
    pub epoch: u64,
    pub rng: Rng,
}

impl TrainState {
    /// Fresh state. The projection bank carries an extra background column
    /// whenever the scheme trains background as a class.
    pub fn init(cfg: &TrainConfig, feature_dim: usize, n_base: usize) -> Result<Self> {
        cfg.validate(n_base)?;
        let scheme = schemes().create(&cfg.scheme)?;
        let params = EmbedderParams::init(
            feature_dim,
            &cfg.hidden_layers(),
            cfg.embed_dim,
            &mut rng_for(cfg.seed, "embedder", 0),
        )?;
        let columns = n_base + usize::from(scheme.background_as_class(cfg));
        let projections = ProjectionBank::random(
            cfg.embed_dim,
            columns,
            cfg.projection_init_scale,
            &mut rng_for(cfg.seed, "projections", 0),
        )?;
        let clusters = ClusterBank::random(cfg.embed_dim, cfg.k, cfg.mu, &mut rng_for(cfg.seed, "clusters", 0))?;
        Ok(Self {
            velocity: params.zeros_like(),
            params,
            projection_velocity: Mat::zeros(cfg.embed_dim, columns),
            projections,
            clusters,
            iteration: 0,
            epoch: 0,
            rng: rng_for(cfg.seed, "batches", 0),
        })
    }
}

/// Pixels gathered for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    pub features: Mat,
    pub labels: Vec<PixelLabel>,
    pub hidden_novel: Vec<Option<usize>>,
}

impl PixelBatch {
    pub fn from_scenes(scenes: &[&Scene], pixels: &[(usize, usize)]) -> Self {
        let f = scenes[0].features.nrows();
        let mut features = Mat::zeros(f, pixels.len());
        let mut labels = Vec::with_capacity(pixels.len());
        let mut hidden_novel = Vec::with_capacity(pixels.len());
        let hidden: Vec<Vec<Option<usize>>> = scenes.iter().map(|s| s.hidden_novel()).collect();
        for (col, &(s, p)) in pixels.iter().enumerate() {
            let scene = scenes[s];
            features.set_column(col, &scene.features.column(p));
            labels.push(scene.train_labels[p]);
            hidden_novel.push(hidden[s][p]);
        }
        Self {
            features,
            labels,
            hidden_novel,
        }
    }

    /// Every pixel of one scene.
    pub fn whole_scene(scene: &Scene) -> Self {
        Self {
            features: scene.features.clone(),
            labels: scene.train_labels.clone(),
            hidden_novel: scene.hidden_novel(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How background pixels are supervised for one gradient evaluation.
#[derive(Clone, Copy, Debug)]
pub enum BackgroundTargets<'a> {
    ExtraClass,
    /// Fixed assignment of the background pixels (in batch order).
    Clusters(&'a AssignmentMatrix),
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub report: LossReport,
    pub params: EmbedderParams,
    pub embeddings: EmbeddingBatch,
}

/// Loss and gradients with respect to the embedder parameters and the
/// projection vectors for fixed background targets.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradients(
    params: &EmbedderParams,
    projections: &ProjectionBank,
    clusters: &ClusterBank,
    batch: &PixelBatch,
    targets: BackgroundTargets<'_>,
    alpha: f64,
    normalize: bool,
) -> Result<Gradients> {
    let cache = params.forward(&batch.features)?;
    let embeddings = EmbeddingBatch::new(cache.output.clone(), batch.labels.clone(), batch.hidden_novel.clone())?;
    let bg = match targets {
        BackgroundTargets::ExtraClass => BackgroundObjective::ExtraClass,
        BackgroundTargets::Clusters(assignment) => BackgroundObjective::Clusters {
            bank: clusters,
            assignment,
            alpha,
        },
    };
    let mut report = objective(&embeddings, projections, bg)?;
    if normalize && !batch.is_empty() {
        report.scale(1.0 / batch.len() as f64);
    }
    let grads = params.backward(&cache, &report.grad_embeddings)?;
    Ok(Gradients {
        report,
        params: grads,
        embeddings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub iteration: u64,
    pub lr: f64,
    pub total: f64,
    pub base_loss: f64,
    pub bm_loss: f64,
    pub pixels: usize,
    pub background_pixels: usize,
    /// Pixels per centre when background was clustered this step.
    pub cluster_counts: Option<Vec<usize>>,
}

/// Runs iterations for one scheme and config.
pub struct Trainer {
    cfg: TrainConfig,
    scheme: Box<dyn PretrainScheme>,
    total_iterations: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, total_iterations: u64) -> Result<Self> {
        let scheme = schemes().create(&cfg.scheme)?;
        Ok(Self {
            cfg,
            scheme,
            total_iterations,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> &dyn PretrainScheme {
        self.scheme.as_ref()
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine => {
                let t = (iteration as f64 / self.total_iterations.max(1) as f64).min(1.0);
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// One iteration on `batch`.
    pub fn step(&self, state: &mut TrainState, batch: &PixelBatch) -> Result<StepOutcome> {
        let cfg = &self.cfg;
        let it = state.iteration;
        let diverged = |reason: String| Error::Diverged { iteration: it, reason };

        if self.scheme.guidance_active(cfg) {
            state.clusters = guidance_step(
                &state.clusters,
                &state.projections,
                &cfg.guidance_settings(),
                cfg.seed,
                it,
            )?;
        }

        let background_as_class = self.scheme.background_as_class(cfg);
        let mut clustered = None;
        if !background_as_class {
            let cache = state.params.forward(&batch.features)?;
            if cache.output.iter().any(|v| !v.is_finite()) {
                return Err(diverged("non-finite embedding".into()));
            }
            let emb = EmbeddingBatch::new(cache.output, batch.labels.clone(), batch.hidden_novel.clone())?;
            clustered = Some(match emb.background() {
                Some(bg) => {
                    let a = assign(&similarity(&state.clusters, &bg)?)?;
                    (Some(bg), a)
                }
                None => (None, AssignmentMatrix::from_indices(state.clusters.k(), vec![])?),
            });
        }

        let targets = match &clustered {
            None => BackgroundTargets::ExtraClass,
            Some((_, a)) => BackgroundTargets::Clusters(a),
        };
        let grads = objective_gradients(
            &state.params,
            &state.projections,
            &state.clusters,
            batch,
            targets,
            cfg.alpha,
            cfg.normalize_loss,
        )
        .map_err(|e| match e {
            Error::Structural(msg) if msg.contains("non-finite") => diverged(msg),
            other => other,
        })?;
        let report = &grads.report;
        if !report.total.is_finite() {
            return Err(diverged(format!("loss is {}", report.total)));
        }

        let lr = self.lr_at(it);
        let m = cfg.momentum;
        for ((layer, vel), g) in state
            .params
            .layers_mut()
            .iter_mut()
            .zip(state.velocity.layers_mut())
            .zip(grads.params.layers())
        {
            vel.weight = &vel.weight * m + &g.weight;
            vel.bias = &vel.bias * m + &g.bias;
            layer.weight -= &vel.weight * lr;
            layer.bias -= &vel.bias * lr;
        }
        state.projection_velocity = &state.projection_velocity * m + &report.grad_projections;
        *state.projections.weights_mut() -= &state.projection_velocity * lr;
        if !state.params.is_finite() || state.projections.weights().iter().any(|v| !v.is_finite()) {
            return Err(diverged("non-finite parameters after update".into()));
        }

        let mut cluster_counts = None;
        if let Some((bg, a)) = &clustered {
            if let Some(bg) = bg {
                let agg = aggregate(bg, a)?;
                if self.scheme.online_centres(cfg) {
                    state.clusters = ema_update(&state.clusters, &agg)?;
                }
                cluster_counts = Some(agg.counts);
            }
        }

        state.iteration += 1;
        Ok(StepOutcome {
            iteration: it,
            lr,
            total: report.total,
            base_loss: report.base_loss,
            bm_loss: report.bm_loss,
            pixels: batch.len(),
            background_pixels: batch.labels.iter().filter(|l| l.is_background()).count(),
            cluster_counts,
        })
    }

    /// One pass over the training scenes: shuffled, grouped
    /// `scenes_per_step` at a time, `batch_pixels` sampled uniformly without
    /// replacement from each group.
    pub fn run_epoch(&self, state: &mut TrainState, scenes: &[Scene]) -> Result<EpochLog> {
        self.scheme.on_epoch_start(state, scenes, &self.cfg)?;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut state.rng);

        let mut log = EpochLog {
            epoch: state.epoch,
            ..EpochLog::default()
        };
        let mut used = vec![false; state.clusters.k()];
        for group in order.chunks(self.cfg.scenes_per_step) {
            let chosen: Vec<&Scene> = group.iter().map(|&i| &scenes[i]).collect();
            let pool: Vec<(usize, usize)> = chosen
                .iter()
                .enumerate()
                .flat_map(|(s, scene)| (0..scene.pixels()).map(move |p| (s, p)))
                .collect();
            let amount = self.cfg.batch_pixels.min(pool.len());
            let mut picks = index::sample(&mut state.rng, pool.len(), amount).into_vec();
            picks.sort_unstable();
            let pixels: Vec<(usize, usize)> = picks.into_iter().map(|i| pool[i]).collect();
            let batch = PixelBatch::from_scenes(&chosen, &pixels);

            let out = self.step(state, &batch)?;
            log.iterations += 1;
            log.mean_total += out.total;
            log.mean_base += out.base_loss;
            log.mean_bm += out.bm_loss;
            log.lr = out.lr;
            if let Some(counts) = &out.cluster_counts {
                for (u, &c) in used.iter_mut().zip(counts) {
                    *u |= c > 0;
                }
            }
        }
        if log.iterations > 0 {
            let n = log.iterations as f64;
            log.mean_total /= n;
            log.mean_base /= n;
            log.mean_bm /= n;
        }
        log.clusters_used = used.iter().filter(|&&u| u).count();
        log.iteration = state.iteration;
        state.epoch += 1;
        Ok(log)
    }
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Iteration counter at the end of the epoch.
    pub iteration: u64,
    pub iterations: u64,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_base: f64,
    pub mean_bm: f64,
    /// Centres that received at least one pixel during the epoch.
    pub clusters_used: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn steps_per_epoch(fold: &Fold, cfg: &TrainConfig) -> u64 {
    fold.train_scenes.len().div_ceil(cfg.scenes_per_step.max(1)) as u64
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn pretrain(fold: &Fold, cfg: &TrainConfig) -> Result<PretrainOutput> {
    if fold.train_scenes.is_empty() {
        return Err(Error::EmptyInput("fold has no training scenes".into()));
    }
    let state = TrainState::init(cfg, fold.config.feature_dim, fold.base_class_ids.len())?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        feature_dim: fold.config.feature_dim,
        n_base: fold.base_class_ids.len(),
        state,
    };
    resume(fold, checkpoint, cfg.epochs)
}

/// Continues training a checkpoint for `epochs` more epochs.
pub fn resume(fold: &Fold, mut checkpoint: Checkpoint, epochs: u64) -> Result<PretrainOutput> {
    if fold.train_scenes.is_empty() {
        return Err(Error::EmptyInput("fold has no training scenes".into()));
    }
    if fold.config.feature_dim != checkpoint.feature_dim || fold.base_class_ids.len() != checkpoint.n_base {
        return Err(Error::structural("checkpoint was trained on a fold of a different shape"));
    }
    let cfg = checkpoint.config.clone();
    let total = cfg.epochs * steps_per_epoch(fold, &cfg);
    let trainer = Trainer::new(cfg, total)?;
    let mut log = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        log.push(trainer.run_epoch(&mut checkpoint.state, &fold.train_scenes)?);
    }
    Ok(PretrainOutput { checkpoint, log })
}
