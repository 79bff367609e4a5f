//! Side-by-side comparison of pre-trained checkpoints on an evaluation fold.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{binary_counts, cluster_quality, prototype_similarity, ClusterComposition, IouCounts, DEFAULT_TAU};
use crate::cluster::{kmeans, KMeansOptions, PixelLabel};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::synth::{Fold, TrueLabel};
use crate::trainer::{embed_features, Checkpoint};
use crate::Mat;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub tau_sweep: Vec<f64>,
    /// One evaluation per seed; the seed drives episode sampling and the
    /// clustering of background embeddings.
    pub eval_seeds: Vec<u64>,
    pub episodes_per_class: usize,
    /// Clusters used for the quality score; defaults to the number of hidden
    /// groups in the evaluation background.
    pub cluster_k: Option<usize>,
    /// Cluster unit-normalised embeddings.
    pub normalize_embeddings: bool,
    /// k-means runs per evaluation; the lowest-inertia run is scored.
    pub cluster_restarts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau_sweep: vec![0.5, 0.6, 0.7, 0.8],
            eval_seeds: vec![0, 1, 2, 3, 4],
            episodes_per_class: 8,
            cluster_k: None,
            normalize_embeddings: true,
            cluster_restarts: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |t: f64| (0.0..=1.0).contains(&t);
        if !in_unit(self.tau) || !self.tau_sweep.iter().all(|&t| in_unit(t)) {
            return Err(Error::invalid("thresholds must lie in [0, 1]"));
        }
        if self.eval_seeds.is_empty() || self.episodes_per_class == 0 {
            return Err(Error::invalid("need at least one eval seed and one episode per class"));
        }
        if self.cluster_k == Some(0) || self.cluster_restarts == 0 {
            return Err(Error::invalid("cluster_k and cluster_restarts must be positive"));
        }
        Ok(())
    }
}

/// A checkpoint with the name of its report column.
#[derive(Clone, Debug)]
pub struct NamedCheckpoint {
    pub label: String,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    /// Mean over novel classes of the episode-accumulated class IoU.
    pub mean_iou: f64,
    pub fb_iou: f64,
    pub nmi: f64,
    pub purity: f64,
    /// `fb_iou` at each threshold of the sweep.
    pub fb_iou_sweep: Vec<f64>,
}

impl EvalMetrics {
    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            mean_iou: f(self.mean_iou, other.mean_iou),
            fb_iou: f(self.fb_iou, other.fb_iou),
            nmi: f(self.nmi, other.nmi),
            purity: f(self.purity, other.purity),
            fb_iou_sweep: self
                .fb_iou_sweep
                .iter()
                .zip(&other.fb_iou_sweep)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn mean_of(all: &[&EvalMetrics]) -> Self {
        let n = all.len() as f64;
        let first = all[0].zip_with(all[0], |_, _| 0.0);
        let sum = all.iter().fold(first, |acc, m| acc.zip_with(m, |a, b| a + b));
        sum.zip_with(&sum, |a, _| a / n)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.mean_iou, self.fb_iou, self.nmi, self.purity]
            .into_iter()
            .chain(self.fb_iou_sweep.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedMetrics {
    pub eval_seed: u64,
    pub metrics: EvalMetrics,
    pub composition: Vec<ClusterComposition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportColumn {
    pub label: String,
    pub scheme: String,
    pub k: usize,
    pub bmc: bool,
    pub ocg: bool,
    pub train_seed: u64,
    pub checkpoint_digest: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: EvalMetrics,
    /// `mean` minus the first column's `mean`.
    pub delta: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub fold_seed: u64,
    pub eval_scenes: usize,
    pub novel_classes: Vec<usize>,
    pub config: EvalConfig,
    pub columns: Vec<ReportColumn>,
}

struct EmbeddedFold {
    scenes: Vec<Mat>,
}

fn embed_fold(ckpt: &Checkpoint, fold: &Fold) -> Result<EmbeddedFold> {
    let scenes = fold
        .eval_scenes
        .iter()
        .map(|s| embed_features(&ckpt.state.params, &s.features))
        .collect::<Result<_>>()?;
    Ok(EmbeddedFold { scenes })
}

fn class_mask(labels: &[TrueLabel], class: usize) -> Vec<bool> {
    labels.iter().map(|&l| l == TrueLabel::Class(class)).collect()
}

fn segmentation_metrics(
    fold: &Fold,
    emb: &EmbeddedFold,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut thresholds = vec![cfg.tau];
    thresholds.extend(&cfg.tau_sweep);
    let mut fg = vec![IouCounts::default(); thresholds.len()];
    let mut bg = vec![IouCounts::default(); thresholds.len()];
    let mut class_ious = Vec::new();

    for &class in &fold.novel_class_ids {
        let candidates: Vec<usize> = (0..fold.eval_scenes.len())
            .filter(|&i| fold.eval_scenes[i].contains_class(class))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let mut rng = rng_for(seed, "episode", class as u64);
        let mut class_fg = IouCounts::default();
        for _ in 0..cfg.episodes_per_class {
            let support = candidates[rng.random_range(0..candidates.len())];
            let query = if candidates.len() > 1 {
                let j = rng.random_range(0..candidates.len() - 1);
                let j = if candidates[j] >= support { j + 1 } else { j };
                candidates[j]
            } else {
                support
            };
            let support_mask = class_mask(&fold.eval_scenes[support].true_labels, class);
            let truth = class_mask(&fold.eval_scenes[query].true_labels, class);
            let sim = prototype_similarity(&emb.scenes[support], &support_mask, &emb.scenes[query])?;
            for (t, &tau) in thresholds.iter().enumerate() {
                let pred: Vec<bool> = sim.iter().map(|&s| s >= tau).collect();
                let (f, b) = binary_counts(&pred, &truth);
                if t == 0 {
                    class_fg.add(f);
                }
                fg[t].add(f);
                bg[t].add(b);
            }
        }
        class_ious.push(class_fg.iou().unwrap_or(1.0));
    }
    if class_ious.is_empty() {
        return Err(Error::invalid("no evaluation scene contains a novel class"));
    }
    let fb = |t: usize| {
        let parts: Vec<f64> = fg[t].iou().into_iter().chain(bg[t].iou()).collect();
        parts.iter().sum::<f64>() / parts.len() as f64
    };
    let mean_iou = class_ious.iter().sum::<f64>() / class_ious.len() as f64;
    Ok((mean_iou, fb(0), (1..thresholds.len()).map(fb).collect()))
}

fn clustering_metrics(
    fold: &Fold,
    emb: &EmbeddedFold,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(f64, f64, Vec<ClusterComposition>)> {
    let dim = emb.scenes[0].nrows();
    let mut columns = Vec::new();
    let mut hidden = Vec::new();
    for (scene, e) in fold.eval_scenes.iter().zip(&emb.scenes) {
        for (p, h) in scene.hidden_novel().into_iter().enumerate() {
            if scene.train_labels[p] == PixelLabel::Background {
                let mut v = e.column(p).clone_owned();
                if cfg.normalize_embeddings {
                    let n = v.norm();
                    if n > 0.0 {
                        v /= n;
                    }
                }
                columns.push(v);
                hidden.push(h);
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::invalid("evaluation scenes have no background pixels"));
    }
    let points = Mat::from_columns(&columns);
    debug_assert_eq!(points.nrows(), dim);
    let groups = {
        let mut g: Vec<_> = hidden.clone();
        g.sort();
        g.dedup();
        g.len()
    };
    let k = cfg.cluster_k.unwrap_or(groups).min(points.ncols());
    let opts = KMeansOptions {
        n_init: cfg.cluster_restarts,
        ..Default::default()
    };
    let km = kmeans(&points, k, derive_seed(seed, "cluster-eval", 0), opts)?;
    let q = cluster_quality(&km.labels, &hidden)?;
    Ok((q.nmi, q.purity, q.composition))
}

fn evaluate(fold: &Fold, ckpt: &Checkpoint, cfg: &EvalConfig) -> Result<Vec<SeedMetrics>> {
    let emb = embed_fold(ckpt, fold)?;
    cfg.eval_seeds
        .iter()
        .map(|&seed| {
            let (mean_iou, fb_iou, fb_iou_sweep) = segmentation_metrics(fold, &emb, cfg, seed)?;
            let (nmi, purity, composition) = clustering_metrics(fold, &emb, cfg, seed)?;
            Ok(SeedMetrics {
                eval_seed: seed,
                metrics: EvalMetrics {
                    mean_iou,
                    fb_iou,
                    nmi,
                    purity,
                    fb_iou_sweep,
                },
                composition,
            })
        })
        .collect()
}

/// Evaluates every checkpoint on the evaluation scenes of `fold`. Nothing is
/// returned unless every column succeeds.
pub fn compare_report(checkpoints: &[NamedCheckpoint], fold: &Fold, cfg: &EvalConfig) -> Result<Report> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::EmptyInput("no checkpoints to compare".into()));
    }
    if fold.eval_scenes.is_empty() {
        return Err(Error::EmptyInput("fold has no evaluation scenes".into()));
    }
    if fold.novel_class_ids.is_empty() {
        return Err(Error::invalid("fold has no novel classes"));
    }
    let dim = checkpoints[0].checkpoint.state.params.output_dim();
    for c in checkpoints {
        if c.checkpoint.state.params.output_dim() != dim {
            return Err(Error::structural(format!(
                "checkpoint '{}' has embedding dim {}, expected {dim}",
                c.label,
                c.checkpoint.state.params.output_dim()
            )));
        }
        if c.checkpoint.feature_dim != fold.config.feature_dim {
            return Err(Error::structural(format!(
                "checkpoint '{}' expects {} input features, fold has {}",
                c.label, c.checkpoint.feature_dim, fold.config.feature_dim
            )));
        }
    }

    let mut columns: Vec<ReportColumn> = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        let per_seed = evaluate(fold, &c.checkpoint, cfg)?;
        let mean = EvalMetrics::mean_of(&per_seed.iter().map(|s| &s.metrics).collect::<Vec<_>>());
        let delta = match columns.first() {
            Some(first) => mean.zip_with(&first.mean, |a, b| a - b),
            None => mean.zip_with(&mean, |_, _| 0.0),
        };
        let tc = &c.checkpoint.config;
        columns.push(ReportColumn {
            label: c.label.clone(),
            scheme: tc.scheme.clone(),
            k: tc.k,
            bmc: tc.bmc_enabled,
            ocg: tc.ocg_enabled,
            train_seed: tc.seed,
            checkpoint_digest: c.checkpoint.digest()?,
            per_seed,
            mean,
            delta,
        });
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        fold_seed: fold.seed,
        eval_scenes: fold.eval_scenes.len(),
        novel_classes: fold.novel_class_ids.clone(),
        config: cfg.clone(),
        columns,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "report",
            reason: e.to_string(),
        })
    }

    /// One row per column and eval seed, then one `mean` row per column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,scheme,k,bmc,ocg,train_seed,eval_seed,mean_iou,fb_iou,nmi,purity");
        for t in &self.config.tau_sweep {
            let _ = write!(out, ",fb_iou@{t}");
        }
        out.push('\n');
        let mut row = |c: &ReportColumn, seed: &str, m: &EvalMetrics| {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                csv_field(&c.label),
                csv_field(&c.scheme),
                c.k,
                c.bmc,
                c.ocg,
                c.train_seed,
                seed
            );
            for v in m.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for c in &self.columns {
            for s in &c.per_seed {
                row(c, &s.eval_seed.to_string(), &s.metrics);
            }
        }
        for c in &self.columns {
            row(c, "mean", &c.mean);
        }
        out
    }
}

/// Parses a report document and checks its internal consistency.
pub fn validate_report(json: &str) -> Result<Report> {
    let bad = |reason: String| Error::Format { what: "report", reason };
    let report: Report = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", report.schema_version)));
    }
    report.config.validate()?;
    if report.columns.is_empty() {
        return Err(bad("report has no columns".into()));
    }
    let sweep = report.config.tau_sweep.len();
    let first_mean = &report.columns[0].mean;
    for c in &report.columns {
        if c.per_seed.len() != report.config.eval_seeds.len() {
            return Err(bad(format!("column '{}' has {} seeds", c.label, c.per_seed.len())));
        }
        let all = c.per_seed.iter().map(|s| &s.metrics).chain([&c.mean]);
        for m in all {
            if m.fb_iou_sweep.len() != sweep {
                return Err(bad(format!("column '{}' has a malformed threshold sweep", c.label)));
            }
            if !m.values().all(|v| (0.0..=1.0).contains(&v)) {
                return Err(bad(format!("column '{}' has a metric outside [0, 1]", c.label)));
            }
        }
        let mean = EvalMetrics::mean_of(&c.per_seed.iter().map(|s| &s.metrics).collect::<Vec<_>>());
        let delta = c.mean.zip_with(first_mean, |a, b| a - b);
        let close = |a: &EvalMetrics, b: &EvalMetrics| a.values().zip(b.values()).all(|(x, y)| (x - y).abs() <= 1e-9);
        if !close(&mean, &c.mean) || !close(&delta, &c.delta) {
            return Err(bad(format!("column '{}' means or deltas are inconsistent", c.label)));
        }
    }
    Ok(report)
}
