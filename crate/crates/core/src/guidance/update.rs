use super::{GuidanceBank, GuidanceMapping};
use crate::cluster::ClusterBank;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::Vector;

/// Moves centres towards the guidance vectors assigned to them.
pub trait GuidedUpdateRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn update(&self, cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping) -> Result<ClusterBank>;
}

/// `p ← μ·p + (1−μ)·ĝ/‖ĝ‖` with the current centre taken as is.
#[derive(Clone, Copy, Debug, Default)]
pub struct LiteralUpdate;

/// `p ← μ·p/‖p‖ + (1−μ)·ĝ/‖ĝ‖`, the same form as the per-batch update.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormalizedUpdate;

pub fn update_rules() -> Registry<dyn GuidedUpdateRule> {
    let mut reg: Registry<dyn GuidedUpdateRule> = Registry::new("guided update rule");
    reg.register("literal", || Box::new(LiteralUpdate))
        .register("normalized", || Box::new(NormalizedUpdate));
    reg
}

pub fn guided_update(cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping) -> Result<ClusterBank> {
    LiteralUpdate.update(cbank, g, m)
}

/// Sum of assigned guidance vectors per centre, `None` for centres without
/// any.
fn assigned_sums(cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping) -> Result<Vec<Option<(Vector, f64)>>> {
    if m.targets().len() != g.len() || m.k() != cbank.k() {
        return Err(Error::structural(format!(
            "mapping {}x{} does not match {} guidance vectors and {} centres",
            m.targets().len(),
            m.k(),
            g.len(),
            cbank.k()
        )));
    }
    if g.dim() != cbank.dim() {
        return Err(Error::structural("guidance and centre dimensions differ"));
    }
    let mut sums: Vec<Option<(Vector, f64)>> = vec![None; cbank.k()];
    for (i, &k) in m.targets().iter().enumerate() {
        let gi = g.vectors().column(i);
        let entry = sums[k].get_or_insert_with(|| (Vector::zeros(g.dim()), 0.0));
        entry.0 += gi;
        entry.1 += gi.norm();
    }
    Ok(sums)
}

fn apply(cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping, normalize_centre: bool) -> Result<ClusterBank> {
    let mu = cbank.mu();
    let mut out = cbank.clone();
    for (k, entry) in assigned_sums(cbank, g, m)?.into_iter().enumerate() {
        let Some((g_hat, scale)) = entry else { continue };
        let norm = g_hat.norm();
        if norm == 0.0 || norm <= 1e-12 * scale {
            return Err(Error::NumericalDegeneracy(format!(
                "guidance assigned to centre {k} sums to zero"
            )));
        }
        let p = cbank.centers().column(k);
        let p_term = if normalize_centre {
            let pn = p.norm();
            if pn == 0.0 {
                return Err(Error::NumericalDegeneracy(format!("centre {k} has zero norm")));
            }
            p * (mu / pn)
        } else {
            p * mu
        };
        let updated = p_term + g_hat * ((1.0 - mu) / norm);
        out.centers_mut().set_column(k, &updated);
    }
    Ok(out)
}

impl GuidedUpdateRule for LiteralUpdate {
    fn name(&self) -> &'static str {
        "literal"
    }

    fn update(&self, cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping) -> Result<ClusterBank> {
        apply(cbank, g, m, false)
    }
}

impl GuidedUpdateRule for NormalizedUpdate {
    fn name(&self) -> &'static str {
        "normalized"
    }

    fn update(&self, cbank: &ClusterBank, g: &GuidanceBank, m: &GuidanceMapping) -> Result<ClusterBank> {
        apply(cbank, g, m, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn bank(cols: &[&[f64]], mu: f64) -> ClusterBank {
        let d = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        ClusterBank::new(Mat::from_column_slice(d, cols.len(), &flat), mu).unwrap()
    }

    fn guides(cols: &[&[f64]]) -> GuidanceBank {
        let d = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        GuidanceBank::new(Mat::from_column_slice(d, cols.len(), &flat)).unwrap()
    }

    #[test]
    fn single_guidance_vector() {
        let cb = bank(&[&[0.0, 1.0], &[1.0, 0.0]], 0.999);
        let g = guides(&[&[2.0, 0.0]]);
        let m = GuidanceMapping::from_indices(2, vec![0]).unwrap();
        let out = guided_update(&cb, &g, &m).unwrap();
        assert!((out.centers()[(0, 0)] - 0.001).abs() < 1e-15);
        assert!((out.centers()[(1, 0)] - 0.999).abs() < 1e-15);
        assert_eq!(out.centers().column(1), cb.centers().column(1));
    }

    #[test]
    fn two_guidance_vectors_on_one_centre() {
        let cb = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]], 0.9);
        let g = guides(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = GuidanceMapping::from_indices(3, vec![0, 0]).unwrap();
        let out = guided_update(&cb, &g, &m).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((out.centers()[(0, 0)] - (0.9 + 0.1 * r)).abs() < 1e-12);
        assert!((out.centers()[(1, 0)] - 0.1 * r).abs() < 1e-12);
        assert_eq!(out.centers().column(1), cb.centers().column(1));
        assert_eq!(out.centers().column(2), cb.centers().column(2));
    }

    #[test]
    fn literal_and_normalized_differ_on_non_unit_centres() {
        let cb = bank(&[&[2.0, 0.0], &[0.0, 1.0]], 0.5);
        let g = guides(&[&[0.0, 3.0]]);
        let m = GuidanceMapping::from_indices(2, vec![0]).unwrap();
        let lit = LiteralUpdate.update(&cb, &g, &m).unwrap();
        let nrm = NormalizedUpdate.update(&cb, &g, &m).unwrap();
        assert_eq!(lit.centers().column(0).as_slice(), &[1.0, 0.5]);
        assert_eq!(nrm.centers().column(0).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn cancelling_guidance_is_degenerate() {
        let cb = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]], 0.9);
        let g = guides(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let m = GuidanceMapping::from_indices(3, vec![1, 1]).unwrap();
        assert!(matches!(guided_update(&cb, &g, &m), Err(Error::NumericalDegeneracy(_))));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let cb = bank(&[&[1.0, 0.0], &[0.0, 1.0]], 0.9);
        let g = guides(&[&[1.0, 0.0]]);
        let m = GuidanceMapping::from_indices(3, vec![0]).unwrap();
        assert!(matches!(guided_update(&cb, &g, &m), Err(Error::Structural(_))));
    }
}
