//! Training objectives and their analytic gradients.
//!
//! Both objectives are softmax cross-entropies over raw inner products: base
//! pixels against the projection vectors `W`, background pixels against the
//! cluster centres `P` with the assigned centre as target. Centres are
//! statistics maintained by momentum updates, so no gradient is produced for
//! them.

use nalgebra::DVectorView;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cluster::{AssignmentMatrix, ClusterBank, EmbeddingBatch, PixelLabel};
use crate::error::{Error, Result};
use crate::{Mat, Vector};

/// Weight used for the background-mining term in the combined objective.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `D×C` projection vectors, one column per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    weights: Mat,
}

impl ProjectionBank {
    pub fn new(weights: Mat) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("projection bank needs D >= 1 and C >= 1"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("non-finite projection weight"));
        }
        Ok(Self { weights })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let weights = Mat::from_fn(dim, classes, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        Self::new(weights)
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Mat {
        &mut self.weights
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub base_loss: f64,
    pub bm_loss: f64,
    pub total: f64,
    pub alpha: f64,
    /// `D×N`, one column per pixel of the batch.
    pub grad_embeddings: Mat,
    /// `D×C`, same layout as the projection bank.
    pub grad_projections: Mat,
}

impl LossReport {
    /// Multiplies the loss and every gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.base_loss *= factor;
        self.bm_loss *= factor;
        self.total *= factor;
        self.grad_embeddings *= factor;
        self.grad_projections *= factor;
    }
}

/// `-log softmax(z)[target]` and `∂/∂z = softmax(z) - onehot(target)`.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum.ln();
    let value = log_norm - logits[target];
    let mut dz: Vec<f64> = logits.iter().map(|z| (z - log_norm).exp()).collect();
    dz[target] -= 1.0;
    (value.max(0.0), dz)
}

fn logits(x: DVectorView<'_, f64>, columns: &Mat) -> Vec<f64> {
    columns.column_iter().map(|c| c.dot(&x)).collect()
}

/// `Σ_k dz_k · columns[:, k]`.
fn combine(columns: &Mat, dz: &[f64]) -> Vector {
    let mut g = Vector::zeros(columns.nrows());
    for (col, &w) in columns.column_iter().zip(dz) {
        g.axpy(w, &col, 1.0);
    }
    g
}

/// Background-mining loss of one pixel against its assigned centre.
pub fn bm_loss(i: DVectorView<'_, f64>, bank: &ClusterBank, target: usize) -> Result<(f64, Vector)> {
    if target >= bank.k() {
        return Err(Error::invalid(format!("target centre {target} >= K = {}", bank.k())));
    }
    if i.len() != bank.dim() {
        return Err(Error::structural(format!("embedding dim {} != centre dim {}", i.len(), bank.dim())));
    }
    let z = logits(i, bank.centers());
    let (value, dz) = cross_entropy_from_logits(&z, target);
    Ok((value, combine(bank.centers(), &dz)))
}

/// Cross-entropy of one pixel against the projection vectors, with the
/// gradient for the pixel and for every projection vector.
pub fn base_loss(j: DVectorView<'_, f64>, bank: &ProjectionBank, class: usize) -> Result<(f64, Vector, Mat)> {
    let mut grad_w = Mat::zeros(bank.dim(), bank.classes());
    let (value, grad_j) = base_loss_accumulate(j, bank, class, &mut grad_w)?;
    Ok((value, grad_j, grad_w))
}

fn base_loss_accumulate(
    j: DVectorView<'_, f64>,
    bank: &ProjectionBank,
    class: usize,
    grad_w: &mut Mat,
) -> Result<(f64, Vector)> {
    if class >= bank.classes() {
        return Err(Error::invalid(format!("class {class} >= C = {}", bank.classes())));
    }
    if j.len() != bank.dim() {
        return Err(Error::structural(format!("embedding dim {} != projection dim {}", j.len(), bank.dim())));
    }
    let z = logits(j, bank.weights());
    let (value, dz) = cross_entropy_from_logits(&z, class);
    for (c, &w) in dz.iter().enumerate() {
        grad_w.column_mut(c).axpy(w, &j, 1.0);
    }
    Ok((value, combine(bank.weights(), &dz)))
}

/// How background pixels enter the objective.
#[derive(Clone, Copy, Debug)]
pub enum BackgroundObjective<'a> {
    /// Background is the last column of the projection bank and is trained
    /// with plain cross-entropy like any base class.
    ExtraClass,
    /// Background pixels are trained against their assigned cluster centre,
    /// weighted by `alpha`.
    Clusters {
        bank: &'a ClusterBank,
        assignment: &'a AssignmentMatrix,
        alpha: f64,
    },
}

/// Combined objective `Σ base + α·Σ bm` over one batch (plain sums).
pub fn total_loss(
    batch: &EmbeddingBatch,
    cbank: &ClusterBank,
    pbank: &ProjectionBank,
    assignment: &AssignmentMatrix,
    alpha: f64,
) -> Result<LossReport> {
    objective(
        batch,
        pbank,
        BackgroundObjective::Clusters {
            bank: cbank,
            assignment,
            alpha,
        },
    )
}

/// Merged-background cross-entropy: every pixel is a class, background
/// included.
pub fn standard_loss(batch: &EmbeddingBatch, pbank: &ProjectionBank) -> Result<LossReport> {
    objective(batch, pbank, BackgroundObjective::ExtraClass)
}

pub fn objective(
    batch: &EmbeddingBatch,
    pbank: &ProjectionBank,
    background: BackgroundObjective<'_>,
) -> Result<LossReport> {
    let n_bg = batch.labels().iter().filter(|l| l.is_background()).count();
    let (base_classes, alpha) = match background {
        BackgroundObjective::ExtraClass => {
            if pbank.classes() < 2 {
                return Err(Error::structural("extra-class objective needs a background column"));
            }
            (pbank.classes() - 1, 0.0)
        }
        BackgroundObjective::Clusters { assignment, alpha, bank } => {
            if assignment.len() != n_bg {
                return Err(Error::structural(format!(
                    "assignment covers {} pixels but batch has {n_bg} background pixels",
                    assignment.len()
                )));
            }
            if assignment.k() != bank.k() {
                return Err(Error::structural("assignment K differs from cluster bank K"));
            }
            (pbank.classes(), alpha)
        }
    };

    let mut grad_e = Mat::zeros(batch.dim(), batch.len());
    let mut grad_w = Mat::zeros(pbank.dim(), pbank.classes());
    let mut base_sum = 0.0;
    let mut bm_sum = 0.0;
    let mut bg_seen = 0;

    for (n, label) in batch.labels().iter().enumerate() {
        let x = batch.data().column(n);
        match (*label, background) {
            (PixelLabel::Base(c), _) => {
                if c >= base_classes {
                    return Err(Error::structural(format!("base label {c} >= {base_classes} classes")));
                }
                let (v, g) = base_loss_accumulate(x, pbank, c, &mut grad_w)?;
                base_sum += v;
                grad_e.set_column(n, &g);
            }
            (PixelLabel::Background, BackgroundObjective::ExtraClass) => {
                let (v, g) = base_loss_accumulate(x, pbank, base_classes, &mut grad_w)?;
                base_sum += v;
                grad_e.set_column(n, &g);
            }
            (PixelLabel::Background, BackgroundObjective::Clusters { bank, assignment, alpha }) => {
                let target = assignment.indices()[bg_seen];
                bg_seen += 1;
                let (v, g) = bm_loss(x, bank, target)?;
                bm_sum += v;
                grad_e.set_column(n, &(g * alpha));
            }
        }
    }

    Ok(LossReport {
        base_loss: base_sum,
        bm_loss: bm_sum,
        total: base_sum + alpha * bm_sum,
        alpha,
        grad_embeddings: grad_e,
        grad_projections: grad_w,
    })
}
