//! Synthetic segmentation scenes with hidden novel classes.
//!
//! Every class (and every background mode) owns a fixed signature vector in
//! feature space; a pixel's feature is its signature plus Gaussian noise.
//! Foreground signatures (base and novel) lie in the half-space
//! `x₀ > 0` and background modes in `x₀ < 0`, so foregrounds resemble each
//! other more than they resemble background. Training labels mark novel
//! pixels as background.
//!
//! Class ids: base classes are `0..n_base`, novel classes follow as
//! `n_base..n_base + n_novel`.

mod container;

pub use container::{decode_fold, encode_fold, read_fold, write_fold, FOLD_MAGIC, FOLD_VERSION};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::PixelLabel;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng as SeededRng};
use crate::Mat;

/// Largest canvas accepted.
pub const MAX_PIXELS: usize = 16_384;
const SIGNATURE_ATTEMPTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Inclusive range of foreground blobs per scene.
    pub blob_count_range: (usize, usize),
    pub noise_sigma: f64,
    /// Distinct background signatures.
    pub background_modes: usize,
    pub foreground_norm: f64,
    pub background_norm: f64,
    /// Shared component along the first axis: positive for foreground
    /// signatures, negative for background ones.
    pub foreground_tilt: f64,
    /// Upper bound on the pairwise cosine of any two signatures.
    pub max_signature_cosine: f64,
    /// Seed of the signature bank.
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            feature_dim: 8,
            n_base: 3,
            n_novel: 2,
            blob_count_range: (3, 5),
            noise_sigma: 0.3,
            background_modes: 3,
            foreground_norm: 2.0,
            background_norm: 1.0,
            foreground_tilt: 0.5,
            max_signature_cosine: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_count_range;
        if self.height == 0 || self.width == 0 || self.feature_dim < 2 {
            return Err(Error::invalid("height, width must be >= 1 and feature_dim >= 2"));
        }
        if self.height * self.width > MAX_PIXELS {
            return Err(Error::invalid(format!(
                "{}x{} canvas exceeds {MAX_PIXELS} pixels",
                self.height, self.width
            )));
        }
        if self.n_base == 0 || self.background_modes == 0 || lo == 0 || hi < lo {
            return Err(Error::invalid("class, mode and blob counts must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if !(self.foreground_tilt >= 0.0 && self.foreground_tilt.is_finite()) {
            return Err(Error::invalid("foreground_tilt must be finite and >= 0"));
        }
        if !(self.foreground_norm > 0.0 && self.background_norm > 0.0) {
            return Err(Error::invalid("signature norms must be positive"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_novel(&self, class: usize) -> bool {
        class >= self.n_base && class < self.n_classes()
    }
}

/// Ground-truth label of a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrueLabel {
    Background,
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureBank {
    /// `F×(n_classes)` class signatures.
    pub classes: Mat,
    /// `F×background_modes` background signatures.
    pub background: Mat,
}

impl SignatureBank {
    /// All signatures, classes first.
    pub fn all(&self) -> Mat {
        let mut m = Mat::zeros(self.classes.nrows(), self.classes.ncols() + self.background.ncols());
        m.columns_mut(0, self.classes.ncols()).copy_from(&self.classes);
        m.columns_mut(self.classes.ncols(), self.background.ncols())
            .copy_from(&self.background);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `F×(H·W)`; pixel `y·W + x` is column `y·W + x`.
    pub features: Mat,
    pub train_labels: Vec<PixelLabel>,
    pub true_labels: Vec<TrueLabel>,
}

impl Scene {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Novel id of every pixel whose training label hides it.
    pub fn hidden_novel(&self) -> Vec<Option<usize>> {
        self.train_labels
            .iter()
            .zip(&self.true_labels)
            .map(|(train, truth)| match (train, truth) {
                (PixelLabel::Background, TrueLabel::Class(c)) => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.true_labels.contains(&TrueLabel::Class(class))
    }
}

/// Rebuilds the true label map from the training labels and the hidden map.
pub fn reconstruct_truth(train: &[PixelLabel], hidden: &[Option<usize>]) -> Vec<TrueLabel> {
    train
        .iter()
        .zip(hidden)
        .map(|(label, h)| match (label, h) {
            (PixelLabel::Base(c), _) => TrueLabel::Class(*c),
            (PixelLabel::Background, Some(n)) => TrueLabel::Class(*n),
            (PixelLabel::Background, None) => TrueLabel::Background,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub config: SceneConfig,
    pub seed: u64,
    pub train_scenes: Vec<Scene>,
    pub eval_scenes: Vec<Scene>,
    pub base_class_ids: Vec<usize>,
    pub novel_class_ids: Vec<usize>,
}

fn cosine(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    a.dot(&b) / (a.norm() * b.norm())
}

/// Signatures are a pure function of the config: `n_classes` foreground
/// directions with positive first coordinate and `background_modes`
/// directions with negative first coordinate, resampled until every pair has
/// cosine below `max_signature_cosine`.
pub fn signature_bank(cfg: &SceneConfig) -> Result<SignatureBank> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let n_fg = cfg.n_classes();
    let total = n_fg + cfg.background_modes;
    let mut rng = rng_for(cfg.seed, "signatures", 0);
    // tilt towards ±e₀; cosine with e₀ is tilt/√(1+tilt²)
    let tilt = cfg.foreground_tilt;
    let mut sigs = Mat::zeros(f, total);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < total {
        attempts += 1;
        if attempts > SIGNATURE_ATTEMPTS {
            return Err(Error::invalid(format!(
                "cannot place {total} signatures in {f} dimensions with cosine < {}",
                cfg.max_signature_cosine
            )));
        }
        let mut u: Vec<f64> = (0..f - 1).map(|_| rng.sample(StandardNormal)).collect();
        let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if un < 1e-9 {
            continue;
        }
        u.iter_mut().for_each(|v| *v /= un);
        let (sign, norm) = if placed < n_fg {
            (1.0, cfg.foreground_norm)
        } else {
            (-1.0, cfg.background_norm)
        };
        let scale = norm / (1.0 + tilt * tilt).sqrt();
        let mut col = vec![sign * tilt * scale];
        col.extend(u.iter().map(|v| v * scale));
        let cand = nalgebra::DVector::from_vec(col);
        let ok = (0..placed).all(|j| cosine(cand.as_view(), sigs.column(j)) < cfg.max_signature_cosine);
        if ok {
            sigs.set_column(placed, &cand);
            placed += 1;
        }
    }
    Ok(SignatureBank {
        classes: sigs.columns(0, n_fg).into_owned(),
        background: sigs.columns(n_fg, cfg.background_modes).into_owned(),
    })
}

pub fn generate_scene(cfg: &SceneConfig, rng: &mut SeededRng) -> Result<Scene> {
    let sigs = signature_bank(cfg)?;
    render_scene(cfg, &sigs, rng, None)
}

enum Shape {
    Ellipse,
    Rectangle,
}

struct Blob {
    class: usize,
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Blob {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        match self.shape {
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

fn random_blob(cfg: &SceneConfig, class: usize, rng: &mut SeededRng) -> Blob {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    loop {
        let ry = rng.random_range((h / 8.0).max(0.5)..=(h / 4.0).max(0.5));
        let rx = rng.random_range((w / 8.0).max(0.5)..=(w / 4.0).max(0.5));
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        // keep the blob centre on a pixel inside the canvas
        if cy.round() >= h || cx.round() >= w {
            continue;
        }
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse
        } else {
            Shape::Rectangle
        };
        return Blob {
            class,
            shape,
            cy: cy.round(),
            cx: cx.round(),
            ry,
            rx,
        };
    }
}

/// `force_class`, when given, is painted last so it is always visible.
fn render_scene(
    cfg: &SceneConfig,
    sigs: &SignatureBank,
    rng: &mut SeededRng,
    force_class: Option<usize>,
) -> Result<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;

    // background: Voronoi cells of one anchor per mode
    let anchors: Vec<(f64, f64)> = (0..cfg.background_modes)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let mut mode = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (m, &(ay, ax)) in anchors.iter().enumerate() {
                let d = (y as f64 - ay).powi(2) + (x as f64 - ax).powi(2);
                if d < best_d {
                    best = m;
                    best_d = d;
                }
            }
            mode[y * w + x] = best;
        }
    }

    let (lo, hi) = cfg.blob_count_range;
    let count = rng.random_range(lo..=hi);
    let mut blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let class = rng.random_range(0..cfg.n_classes());
            random_blob(cfg, class, rng)
        })
        .collect();
    if let Some(c) = force_class {
        blobs.push(random_blob(cfg, c, rng));
    }

    let mut truth = vec![TrueLabel::Background; n];
    for blob in &blobs {
        for y in 0..h {
            for x in 0..w {
                if blob.covers(y, x) {
                    truth[y * w + x] = TrueLabel::Class(blob.class);
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut features = Mat::zeros(cfg.feature_dim, n);
    for p in 0..n {
        let sig = match truth[p] {
            TrueLabel::Class(c) => sigs.classes.column(c),
            TrueLabel::Background => sigs.background.column(mode[p]),
        };
        for f in 0..cfg.feature_dim {
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            features[(f, p)] = sig[f] + eps;
        }
    }

    let train_labels = truth
        .iter()
        .map(|t| match *t {
            TrueLabel::Class(c) if c < cfg.n_base => PixelLabel::Base(c),
            _ => PixelLabel::Background,
        })
        .collect();

    Ok(Scene {
        height: h,
        width: w,
        features,
        train_labels,
        true_labels: truth,
    })
}

/// Training scenes hide novel classes in the background; every evaluation
/// scene contains at least one novel region (when there are novel classes).
pub fn make_fold(cfg: &SceneConfig, n_train: usize, n_eval: usize, seed: u64) -> Result<Fold> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::invalid("a fold needs at least one training and one evaluation scene"));
    }
    let sigs = signature_bank(cfg)?;
    let novel: Vec<usize> = (cfg.n_base..cfg.n_classes()).collect();

    let train_scenes = (0..n_train)
        .map(|i| render_scene(cfg, &sigs, &mut rng_for(seed, "train-scene", i as u64), None))
        .collect::<Result<Vec<_>>>()?;
    let eval_scenes = (0..n_eval)
        .map(|i| {
            let mut rng = rng_for(seed, "eval-scene", i as u64);
            let force = if novel.is_empty() {
                None
            } else {
                Some(novel[i % novel.len()])
            };
            render_scene(cfg, &sigs, &mut rng, force)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Fold {
        config: cfg.clone(),
        seed,
        train_scenes,
        eval_scenes,
        base_class_ids: (0..cfg.n_base).collect(),
        novel_class_ids: novel,
    })
}
