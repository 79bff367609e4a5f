//! Steering the background centres with base-class projection vectors.
//!
//! At the start of an iteration the `C` projection vectors are distilled into
//! `K−1` guidance vectors with k-means, each guidance vector is mapped to one
//! centre by maximising `Tr(Mᵀ·Gᵀ·P)`, and every centre that received guidance
//! moves towards the normalised sum of its guidance vectors. Since there are
//! fewer guidance vectors than centres, at least one centre is left alone.

mod mapping;
mod update;

pub use mapping::{mapping_score, mapping_solvers, ArgmaxMapping, InjectiveMapping, MappingSolver};
pub use update::{guided_update, update_rules, GuidedUpdateRule, LiteralUpdate, NormalizedUpdate};

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, ClusterBank, KMeansOptions};
use crate::error::{Error, Result};
use crate::losses::ProjectionBank;
use crate::seed::derive_seed;
use crate::Mat;

/// `D×(K−1)` guidance vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBank {
    vectors: Mat,
}

impl GuidanceBank {
    pub fn new(vectors: Mat) -> Result<Self> {
        if vectors.ncols() == 0 || vectors.nrows() == 0 {
            return Err(Error::EmptyInput("no guidance vectors".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("non-finite guidance vector"));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }
}

/// Binary `(K−1)×K` matrix with exactly one `1` per row, stored as the
/// selected column of each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceMapping {
    k: usize,
    rows: Vec<usize>,
}

impl GuidanceMapping {
    pub fn from_indices(k: usize, rows: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&c| c >= k) {
            return Err(Error::structural(format!("mapping column {bad} >= K = {k}")));
        }
        Ok(Self { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Centre selected by each guidance vector.
    pub fn targets(&self) -> &[usize] {
        &self.rows
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.rows.len(), self.k);
        for (i, &k) in self.rows.iter().enumerate() {
            m[(i, k)] = 1.0;
        }
        m
    }

    /// Centres that receive no guidance vector.
    pub fn unassigned(&self) -> Vec<usize> {
        (0..self.k).filter(|k| !self.rows.contains(k)).collect()
    }
}

/// k-means over the projection columns; the centroids become the guidance
/// vectors.
pub fn distill_guidance(pbank: &ProjectionBank, k_minus_1: usize, seed: u64) -> Result<GuidanceBank> {
    if k_minus_1 == 0 {
        return Err(Error::invalid("need at least one guidance vector"));
    }
    if pbank.classes() < k_minus_1 {
        return Err(Error::invalid(format!(
            "{} projection vectors cannot form {k_minus_1} guidance vectors",
            pbank.classes()
        )));
    }
    let res = kmeans(pbank.weights(), k_minus_1, seed, KMeansOptions::default())?;
    GuidanceBank::new(res.centers)
}

/// The literal maximiser of the mapping objective under the row-sum
/// constraint.
pub fn solve_mapping(g: &GuidanceBank, cbank: &ClusterBank) -> Result<GuidanceMapping> {
    ArgmaxMapping.solve(g, cbank)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSettings {
    pub enabled: bool,
    /// Registered [`MappingSolver`] name.
    pub mapping: String,
    /// Registered [`GuidedUpdateRule`] name.
    pub update_rule: String,
    /// Run guidance every `stride` iterations.
    pub stride: u64,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            mapping: "argmax".into(),
            update_rule: "literal".into(),
            stride: 1,
        }
    }
}

/// distil → map → update. Returns the bank unchanged when guidance is
/// disabled or `iteration` is off-stride. The k-means seed is derived from
/// `(seed, iteration)`.
pub fn guidance_step(
    cbank: &ClusterBank,
    pbank: &ProjectionBank,
    settings: &GuidanceSettings,
    seed: u64,
    iteration: u64,
) -> Result<ClusterBank> {
    if !settings.enabled || settings.stride == 0 || iteration % settings.stride != 0 {
        return Ok(cbank.clone());
    }
    if pbank.dim() != cbank.dim() {
        return Err(Error::structural("projection and centre dimensions differ"));
    }
    let solver = mapping_solvers().create(&settings.mapping)?;
    let rule = update_rules().create(&settings.update_rule)?;
    let g = distill_guidance(pbank, cbank.k() - 1, derive_seed(seed, "guidance", iteration))?;
    let m = solver.solve(&g, cbank)?;
    rule.update(cbank, &g, &m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pbank(cols: &[&[f64]]) -> ProjectionBank {
        let d = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        ProjectionBank::new(Mat::from_column_slice(d, cols.len(), &flat)).unwrap()
    }

    fn sorted_columns(m: &Mat) -> Vec<Vec<f64>> {
        let mut cols: Vec<Vec<f64>> = m.column_iter().map(|c| c.iter().copied().collect()).collect();
        cols.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cols
    }

    #[test]
    fn distill_two_groups() {
        let w = pbank(&[&[1.0, 0.0], &[1.1, 0.0], &[0.0, 1.0], &[0.0, 1.1]]);
        let g = distill_guidance(&w, 2, 3).unwrap();
        let cols = sorted_columns(g.vectors());
        assert!((cols[0][0] - 0.0).abs() < 1e-12 && (cols[0][1] - 1.05).abs() < 1e-12);
        assert!((cols[1][0] - 1.05).abs() < 1e-12 && (cols[1][1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn distill_singletons_and_identical() {
        let w = pbank(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.3, 0.3]]);
        let g = distill_guidance(&w, 3, 11).unwrap();
        assert_eq!(sorted_columns(g.vectors()), sorted_columns(w.weights()));

        let same = pbank(&[&[0.4, -0.2], &[0.4, -0.2], &[0.4, -0.2]]);
        let g = distill_guidance(&same, 1, 0).unwrap();
        let c = g.vectors().column(0);
        assert!((c[0] - 0.4).abs() < 1e-15 && (c[1] + 0.2).abs() < 1e-15);

        assert!(matches!(distill_guidance(&w, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn disabled_guidance_is_identity() {
        let cb = ClusterBank::new(Mat::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0.9).unwrap();
        let w = pbank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let settings = GuidanceSettings {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(guidance_step(&cb, &w, &settings, 1, 0).unwrap(), cb);
        let strided = GuidanceSettings {
            stride: 3,
            ..Default::default()
        };
        assert_eq!(guidance_step(&cb, &w, &strided, 1, 1).unwrap(), cb);
        assert_ne!(guidance_step(&cb, &w, &strided, 1, 3).unwrap(), cb);
    }

    #[test]
    fn aligned_centre_moves_other_untouched() {
        // K = 2, C = 2: one guidance vector, the mean of the two projections.
        let cb = ClusterBank::new(Mat::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0.9).unwrap();
        let w = pbank(&[&[2.0, 0.0], &[1.0, 0.5]]);
        let out = guidance_step(&cb, &w, &GuidanceSettings::default(), 5, 0).unwrap();

        // oracle: g = (1.5, 0.25), most similar to p_0
        let g: [f64; 2] = [1.5, 0.25];
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let expect = [0.9 + 0.1 * g[0] / norm, 0.1 * g[1] / norm];
        assert!((out.centers()[(0, 0)] - expect[0]).abs() < 1e-12);
        assert!((out.centers()[(1, 0)] - expect[1]).abs() < 1e-12);
        assert_eq!(out.centers().column(1), cb.centers().column(1));

        let again = guidance_step(&cb, &w, &GuidanceSettings::default(), 5, 0).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn unknown_strategy_names_fail() {
        let cb = ClusterBank::new(Mat::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0.9).unwrap();
        let w = pbank(&[&[2.0, 0.0], &[1.0, 0.5]]);
        let settings = GuidanceSettings {
            mapping: "greedy".into(),
            ..Default::default()
        };
        assert!(matches!(guidance_step(&cb, &w, &settings, 0, 0), Err(Error::UnknownStrategy { .. })));
    }
}
