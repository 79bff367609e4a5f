//! Online clustering of background pixel embeddings.
//!
//! One iteration computes `S = Pᵀ·I_bg`, turns each column of `S` into a
//! one-hot assignment, aggregates the embeddings per centre and moves every
//! centre that received pixels towards the normalised aggregate:
//!
//! ```text
//! p ← μ·p/‖p‖ + (1−μ)·p̂/‖p̂‖
//! ```

mod kmeans;

pub use kmeans::{inertia_of, kmeans, offline_kmeans, KMeansOptions, KMeansResult};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

/// Training-time label of a pixel. Novel classes never appear here: they are
/// folded into `Background`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelLabel {
    Base(usize),
    Background,
}

impl PixelLabel {
    pub fn is_background(self) -> bool {
        matches!(self, PixelLabel::Background)
    }
}

/// `D×N` per-pixel embeddings with their training labels and the hidden
/// novel-class ids (evaluation only).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    data: Mat,
    labels: Vec<PixelLabel>,
    hidden_novel: Vec<Option<usize>>,
}

impl EmbeddingBatch {
    pub fn new(
        data: Mat,
        labels: Vec<PixelLabel>,
        hidden_novel: Vec<Option<usize>>,
    ) -> Result<Self> {
        let (d, n) = data.shape();
        if d == 0 || n == 0 {
            return Err(Error::EmptyInput(format!("embedding batch is {d}x{n}")));
        }
        if labels.len() != n || hidden_novel.len() != n {
            return Err(Error::structural(format!(
                "{n} embeddings but {} labels and {} hidden ids",
                labels.len(),
                hidden_novel.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("non-finite embedding value"));
        }
        for (label, hidden) in labels.iter().zip(&hidden_novel) {
            if hidden.is_some() && !label.is_background() {
                return Err(Error::structural(
                    "hidden novel id on a pixel not labelled background",
                ));
            }
        }
        Ok(Self {
            data,
            labels,
            hidden_novel,
        })
    }

    /// A batch in which every pixel is background and nothing is hidden.
    pub fn background_only(data: Mat) -> Result<Self> {
        let n = data.ncols();
        Self::new(data, vec![PixelLabel::Background; n], vec![None; n])
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn labels(&self) -> &[PixelLabel] {
        &self.labels
    }

    pub fn hidden_novel(&self) -> &[Option<usize>] {
        &self.hidden_novel
    }

    pub fn background_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&n| self.labels[n].is_background())
            .collect()
    }

    /// The background-labelled columns as their own batch, or `None` when
    /// there are none.
    pub fn background(&self) -> Option<EmbeddingBatch> {
        let idx = self.background_indices();
        if idx.is_empty() {
            return None;
        }
        let data = self.data.select_columns(idx.iter());
        Some(EmbeddingBatch {
            data,
            labels: vec![PixelLabel::Background; idx.len()],
            hidden_novel: idx.iter().map(|&n| self.hidden_novel[n]).collect(),
        })
    }

    fn require_background(&self) -> Result<()> {
        if self.labels.iter().any(|l| !l.is_background()) {
            return Err(Error::structural(
                "expected a batch restricted to background pixels",
            ));
        }
        Ok(())
    }
}

/// The `K` background cluster centres (columns) and the momentum `μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBank {
    centers: Mat,
    mu: f64,
}

impl ClusterBank {
    pub fn new(centers: Mat, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::invalid(format!("momentum {mu} outside (0, 1)")));
        }
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(Error::EmptyInput("cluster bank has no centres".into()));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("non-finite cluster centre"));
        }
        Ok(Self { centers, mu })
    }

    /// `k` centres drawn uniformly from the unit sphere in `dim` dimensions.
    pub fn random<R: Rng + ?Sized>(dim: usize, k: usize, mu: f64, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 centres, got {k}")));
        }
        let mut centers = Mat::zeros(dim, k);
        for mut col in centers.column_iter_mut() {
            loop {
                for v in col.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = col.norm();
                if norm > 1e-12 {
                    col /= norm;
                    break;
                }
            }
        }
        Self::new(centers, mu)
    }

    pub fn k(&self) -> usize {
        self.centers.ncols()
    }

    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn centers(&self) -> &Mat {
        &self.centers
    }

    pub(crate) fn centers_mut(&mut self) -> &mut Mat {
        &mut self.centers
    }
}

/// `K×N` raw inner products between centres and pixel embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Mat,
}

impl SimilarityMatrix {
    pub fn from_values(values: Mat) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyInput("empty similarity matrix".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }
}

/// One-hot assignment of `N` pixels to `K` centres, stored as the row index
/// of the single `1` in each column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    k: usize,
    rows: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn from_indices(k: usize, rows: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::structural(format!("assignment row {bad} >= K = {k}")));
        }
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Centre index of each pixel.
    pub fn indices(&self) -> &[usize] {
        &self.rows
    }

    /// The binary `K×N` matrix.
    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.k, self.rows.len());
        for (n, &k) in self.rows.iter().enumerate() {
            m[(k, n)] = 1.0;
        }
        m
    }
}

/// Per-centre sums `P̂ = I_bg·Aᵀ` and member counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResult {
    pub sums: Mat,
    pub counts: Vec<usize>,
}

pub fn similarity(bank: &ClusterBank, bg: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    bg.require_background()?;
    if bg.is_empty() {
        return Err(Error::EmptyInput("no background pixels".into()));
    }
    if bank.dim() != bg.dim() {
        return Err(Error::structural(format!(
            "centre dim {} != embedding dim {}",
            bank.dim(),
            bg.dim()
        )));
    }
    let mut values = Mat::zeros(bank.k(), bg.len());
    for (n, pixel) in bg.data().column_iter().enumerate() {
        for (k, center) in bank.centers().column_iter().enumerate() {
            values[(k, n)] = center.dot(&pixel);
        }
    }
    Ok(SimilarityMatrix { values })
}

/// Row index of the largest entry of each column; ties go to the lowest
/// index.
pub fn assign(sim: &SimilarityMatrix) -> Result<AssignmentMatrix> {
    let values = sim.values();
    let mut rows = Vec::with_capacity(values.ncols());
    for col in values.column_iter() {
        rows.push(argmax(col.iter().copied())?);
    }
    AssignmentMatrix::from_indices(values.nrows(), rows)
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_nan() {
            return Err(Error::structural("NaN similarity"));
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::EmptyInput("argmax of an empty column".into()))
}

pub fn aggregate(bg: &EmbeddingBatch, a: &AssignmentMatrix) -> Result<AggregateResult> {
    bg.require_background()?;
    if a.len() != bg.len() {
        return Err(Error::structural(format!(
            "assignment covers {} pixels, batch has {}",
            a.len(),
            bg.len()
        )));
    }
    let mut sums = Mat::zeros(bg.dim(), a.k());
    let mut counts = vec![0usize; a.k()];
    for (pixel, &k) in bg.data().column_iter().zip(a.indices()) {
        let mut col = sums.column_mut(k);
        for (s, &v) in col.iter_mut().zip(pixel.iter()) {
            *s += v;
        }
        counts[k] += 1;
    }
    Ok(AggregateResult { sums, counts })
}

/// Momentum update of every centre that received at least one pixel.
/// Centres with a zero count, or whose aggregate is the zero vector, are left
/// untouched.
pub fn ema_update(bank: &ClusterBank, agg: &AggregateResult) -> Result<ClusterBank> {
    if agg.sums.shape() != bank.centers().shape() || agg.counts.len() != bank.k() {
        return Err(Error::structural(format!(
            "aggregate {:?} does not match bank {:?}",
            agg.sums.shape(),
            bank.centers().shape()
        )));
    }
    let mu = bank.mu();
    let mut out = bank.clone();
    for k in 0..bank.k() {
        if agg.counts[k] == 0 {
            continue;
        }
        let p = bank.centers().column(k);
        let p_hat = agg.sums.column(k);
        let p_norm = p.norm();
        if p_norm == 0.0 {
            return Err(Error::NumericalDegeneracy(format!(
                "centre {k} has zero norm but {} assigned pixels",
                agg.counts[k]
            )));
        }
        let hat_norm = p_hat.norm();
        if hat_norm == 0.0 {
            continue;
        }
        let updated = p * (mu / p_norm) + p_hat * ((1.0 - mu) / hat_norm);
        out.centers_mut().set_column(k, &updated);
    }
    Ok(out)
}
