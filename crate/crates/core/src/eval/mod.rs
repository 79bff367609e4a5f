//! Segmentation and clustering metrics, and the non-parametric prototype
//! segmentation used to compare pre-trained embedders.

mod report;

pub use report::{compare_report, validate_report, EvalConfig, EvalMetrics, NamedCheckpoint, Report, ReportColumn, SeedMetrics, REPORT_SCHEMA_VERSION};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

/// Default threshold on the min-max normalised similarity map.
pub const DEFAULT_TAU: f64 = 0.7;

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub per_class: BTreeMap<usize, f64>,
    /// Unweighted mean over the evaluated (non-background) classes.
    pub mean_iou: f64,
    pub foreground_iou: Option<f64>,
    pub background_iou: Option<f64>,
    pub fb_iou: f64,
}

fn counts_for(pred: &[usize], truth: &[usize], is_member: impl Fn(usize) -> bool) -> IouCounts {
    let mut c = IouCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (is_member(p), is_member(t));
        c.intersection += u64::from(a && b);
        c.union += u64::from(a || b);
    }
    c
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class IoU over `classes` (the background label is skipped), their
/// mean, and the foreground/background IoU where foreground is any label
/// other than `background`. Classes absent from both maps are excluded.
/// With nothing to evaluate, a mean defaults to 1.
pub fn iou_metrics(pred: &[usize], truth: &[usize], classes: &[usize], background: usize) -> Result<SegmentationResult> {
    if pred.len() != truth.len() {
        return Err(Error::structural(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("empty label maps".into()));
    }
    let mut per_class = BTreeMap::new();
    for &c in classes.iter().filter(|&&c| c != background) {
        if let Some(iou) = counts_for(pred, truth, |l| l == c).iou() {
            per_class.insert(c, iou);
        }
    }
    let foreground_iou = counts_for(pred, truth, |l| l != background).iou();
    let background_iou = counts_for(pred, truth, |l| l == background).iou();
    Ok(SegmentationResult {
        mean_iou: mean(per_class.values().copied()).unwrap_or(1.0),
        fb_iou: mean(foreground_iou.into_iter().chain(background_iou)).unwrap_or(1.0),
        per_class,
        foreground_iou,
        background_iou,
    })
}

/// Foreground and background counts of a binary prediction.
pub fn binary_counts(pred: &[bool], truth: &[bool]) -> (IouCounts, IouCounts) {
    let mut fg = IouCounts::default();
    let mut bg = IouCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        fg.intersection += u64::from(p && t);
        fg.union += u64::from(p || t);
        bg.intersection += u64::from(!p && !t);
        bg.union += u64::from(!p || !t);
    }
    (fg, bg)
}

/// Cosine similarity of every query column to the mean of the masked
/// support columns, min-max normalised to `[0, 1]`. A constant map
/// normalises to all ones; zero-norm query pixels have cosine 0.
pub fn prototype_similarity(support: &Mat, support_mask: &[bool], query: &Mat) -> Result<Vec<f64>> {
    if support.ncols() != support_mask.len() {
        return Err(Error::structural("support mask length differs from support pixel count"));
    }
    if support.nrows() != query.nrows() {
        return Err(Error::structural(format!(
            "support dim {} != query dim {}",
            support.nrows(),
            query.nrows()
        )));
    }
    if query.ncols() == 0 {
        return Err(Error::EmptyInput("empty query".into()));
    }
    let members: Vec<usize> = (0..support_mask.len()).filter(|&i| support_mask[i]).collect();
    if members.is_empty() {
        return Err(Error::invalid("support foreground is empty"));
    }
    let mut proto = nalgebra::DVector::zeros(support.nrows());
    for &i in &members {
        proto += support.column(i);
    }
    proto /= members.len() as f64;
    let pn = proto.norm();
    if pn == 0.0 {
        return Err(Error::NumericalDegeneracy("support prototype is the zero vector".into()));
    }

    let cos: Vec<f64> = query
        .column_iter()
        .map(|q| {
            let qn = q.norm();
            if qn == 0.0 {
                0.0
            } else {
                q.dot(&proto) / (qn * pn)
            }
        })
        .collect();
    let lo = cos.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![1.0; cos.len()]);
    }
    Ok(cos.iter().map(|c| (c - lo) / (hi - lo)).collect())
}

/// Foreground iff the normalised similarity to the support prototype is at
/// least `tau`.
pub fn prototype_segment(support: &Mat, support_mask: &[bool], query: &Mat, tau: f64) -> Result<Vec<bool>> {
    Ok(prototype_similarity(support, support_mask, query)?
        .into_iter()
        .map(|s| s >= tau)
        .collect())
}

/// Name of a hidden group: a novel class or actual background.
pub fn group_name(hidden: Option<usize>) -> String {
    match hidden {
        Some(c) => format!("novel:{c}"),
        None => "background".into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    pub cluster: usize,
    pub size: usize,
    pub groups: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub nmi: f64,
    pub purity: f64,
    pub composition: Vec<ClusterComposition>,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information (arithmetic-mean normalisation) and purity
/// of a clustering against the hidden partition. Two single-group partitions
/// score NMI 1; if exactly one side has a single group the NMI is 0.
pub fn cluster_quality(assignments: &[usize], hidden: &[Option<usize>]) -> Result<ClusterQuality> {
    if assignments.len() != hidden.len() {
        return Err(Error::structural("assignment and hidden label lengths differ"));
    }
    if assignments.is_empty() {
        return Err(Error::invalid("cluster quality of an empty partition"));
    }
    let n = assignments.len() as f64;
    let mut joint: BTreeMap<(usize, Option<usize>), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_group: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for (&a, &h) in assignments.iter().zip(hidden) {
        *joint.entry((a, h)).or_default() += 1;
        *by_cluster.entry(a).or_default() += 1;
        *by_group.entry(h).or_default() += 1;
    }

    let h_cluster = entropy(by_cluster.values().copied(), n);
    let h_group = entropy(by_group.values().copied(), n);
    let nmi = if by_cluster.len() == 1 && by_group.len() == 1 {
        1.0
    } else if by_cluster.len() == 1 || by_group.len() == 1 {
        0.0
    } else {
        let mi: f64 = joint
            .iter()
            .map(|(&(a, h), &c)| {
                let pij = c as f64 / n;
                let pi = by_cluster[&a] as f64 / n;
                let pj = by_group[&h] as f64 / n;
                pij * (pij / (pi * pj)).ln()
            })
            .sum();
        (mi / (0.5 * (h_cluster + h_group))).clamp(0.0, 1.0)
    };

    let mut composition = Vec::with_capacity(by_cluster.len());
    let mut majority = 0usize;
    for (&cluster, &size) in &by_cluster {
        let groups: BTreeMap<String, usize> = joint
            .iter()
            .filter(|((a, _), _)| *a == cluster)
            .map(|((_, h), &c)| (group_name(*h), c))
            .collect();
        majority += groups.values().copied().max().unwrap_or(0);
        composition.push(ClusterComposition { cluster, size, groups });
    }

    Ok(ClusterQuality {
        nmi,
        purity: majority as f64 / n,
        composition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let truth = [0, 1, 1, 2, 0, 2];
        let r = iou_metrics(&truth, &truth, &[1, 2], 0).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.fb_iou, 1.0);
    }

    #[test]
    fn all_background_prediction() {
        let truth = [1, 1, 0, 0];
        let pred = [0, 0, 0, 0];
        let r = iou_metrics(&pred, &truth, &[1], 0).unwrap();
        assert_eq!(r.foreground_iou, Some(0.0));
        assert_eq!(r.background_iou, Some(0.5));
        assert_eq!(r.fb_iou, 0.25);
        assert_eq!(r.mean_iou, 0.0);
    }

    #[test]
    fn crafted_four_by_four() {
        // truth           pred
        // 0 0 1 1         0 1 1 1
        // 0 0 1 1         0 0 1 0
        // 2 2 0 0         2 0 0 0
        // 2 2 0 0         2 2 2 0
        let truth = [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0];
        let pred = [0, 1, 1, 1, 0, 0, 1, 0, 2, 0, 0, 0, 2, 2, 2, 0];
        let r = iou_metrics(&pred, &truth, &[0, 1, 2, 3], 0).unwrap();
        // class 1: inter {2,3,6} = 3, union {1,2,3,6,7} = 5
        // class 2: inter {8,12,13} = 3, union {8,9,12,13,14} = 5
        assert_eq!(r.per_class[&1], 0.6);
        assert_eq!(r.per_class[&2], 0.6);
        assert!(!r.per_class.contains_key(&3));
        assert_eq!(r.mean_iou, 0.6);
        // fg: truth fg {2,3,6,7,8,9,12,13}, pred fg {1,2,3,6,8,12,13,14}
        // inter 6, union 10; bg: inter {0,4,5,10,11,15} = 6, union 10
        assert_eq!(r.foreground_iou, Some(0.6));
        assert_eq!(r.background_iou, Some(0.6));
        assert!((r.fb_iou - 0.6).abs() < 1e-15);
    }

    #[test]
    fn iou_shape_mismatch() {
        assert!(matches!(iou_metrics(&[0, 1], &[0], &[1], 0), Err(Error::Structural(_))));
    }

    #[test]
    fn prototype_examples() {
        // prototype (1, 0); queries aligned, orthogonal, and intermediate
        let support = Mat::from_column_slice(2, 2, &[1.0, 0.0, 5.0, 5.0]);
        let mask = [true, false];
        let s = 0.5f64.sqrt();
        let query = Mat::from_column_slice(2, 6, &[
            1.0, 0.0, // cos 1
            0.0, 1.0, // cos 0
            s, s, // cos 0.7071
            2.0, 0.0, // cos 1
            0.8, 0.6, // cos 0.8
            0.3, 0.954_0, // cos ~0.3
        ]);
        let sim = prototype_similarity(&support, &mask, &query).unwrap();
        assert_eq!(sim[0], 1.0);
        assert_eq!(sim[1], 0.0);
        let mask_out = prototype_segment(&support, &mask, &query, 0.7).unwrap();
        // oracle: cosines, min 0, max 1, threshold 0.7
        let cos = [1.0, 0.0, s, 1.0, 0.8, 0.3 / (0.09f64 + 0.954 * 0.954).sqrt()];
        let oracle: Vec<bool> = cos.iter().map(|&c| c >= 0.7).collect();
        assert_eq!(mask_out, oracle);
        assert_eq!(mask_out, vec![true, false, true, true, true, false]);
    }

    #[test]
    fn prototype_errors() {
        let support = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        let query = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(prototype_segment(&support, &[false], &query, 0.7), Err(Error::InvalidArgument(_))));
        assert!(prototype_segment(&support, &[true], &Mat::zeros(3, 1), 0.7).is_err());
        // single pixel identical to the prototype
        assert_eq!(prototype_segment(&support, &[true], &query, 0.7).unwrap(), vec![true]);
    }

    #[test]
    fn cluster_quality_examples() {
        let hidden = [None, None, Some(3), Some(3), Some(4)];
        let perfect = [0, 0, 1, 1, 2];
        let q = cluster_quality(&perfect, &hidden).unwrap();
        assert!((q.nmi - 1.0).abs() < 1e-12);
        assert_eq!(q.purity, 1.0);

        let single = [0; 5];
        let q = cluster_quality(&single, &hidden).unwrap();
        assert_eq!(q.purity, 0.4);
        assert_eq!(q.nmi, 0.0);
        assert_eq!(q.composition[0].groups["background"], 2);

        assert!(matches!(cluster_quality(&[], &[]), Err(Error::InvalidArgument(_))));
        assert!(cluster_quality(&[0], &[]).is_err());
    }
}
