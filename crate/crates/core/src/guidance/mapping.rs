use super::{GuidanceBank, GuidanceMapping};
use crate::cluster::{argmax, ClusterBank};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::Mat;

/// Chooses the centre each guidance vector is assigned to.
pub trait MappingSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, g: &GuidanceBank, cbank: &ClusterBank) -> Result<GuidanceMapping>;
}

/// Every guidance vector independently picks its most similar centre (ties
/// to the lowest index). Several vectors may share a centre.
#[derive(Clone, Copy, Debug, Default)]
pub struct ArgmaxMapping;

/// Each centre receives at most one guidance vector; solved exactly as a
/// rectangular linear assignment problem.
#[derive(Clone, Copy, Debug, Default)]
pub struct InjectiveMapping;

pub fn mapping_solvers() -> Registry<dyn MappingSolver> {
    let mut reg: Registry<dyn MappingSolver> = Registry::new("mapping solver");
    reg.register("argmax", || Box::new(ArgmaxMapping))
        .register("injective", || Box::new(InjectiveMapping));
    reg
}

/// `S[i][k] = ⟨g_i, p_k⟩`, `(K−1)×K`.
fn scores(g: &GuidanceBank, cbank: &ClusterBank) -> Result<Mat> {
    if g.dim() != cbank.dim() {
        return Err(Error::structural(format!(
            "guidance dim {} != centre dim {}",
            g.dim(),
            cbank.dim()
        )));
    }
    let mut s = Mat::zeros(g.len(), cbank.k());
    for (i, gi) in g.vectors().column_iter().enumerate() {
        for (k, pk) in cbank.centers().column_iter().enumerate() {
            s[(i, k)] = gi.dot(&pk);
        }
    }
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::structural("NaN guidance similarity"));
    }
    Ok(s)
}

/// `Tr(Mᵀ·Gᵀ·P)`.
pub fn mapping_score(g: &GuidanceBank, cbank: &ClusterBank, m: &GuidanceMapping) -> Result<f64> {
    let s = scores(g, cbank)?;
    Ok(m.targets().iter().enumerate().map(|(i, &k)| s[(i, k)]).sum())
}

impl MappingSolver for ArgmaxMapping {
    fn name(&self) -> &'static str {
        "argmax"
    }

    fn solve(&self, g: &GuidanceBank, cbank: &ClusterBank) -> Result<GuidanceMapping> {
        let s = scores(g, cbank)?;
        let rows = s
            .row_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect::<Result<Vec<_>>>()?;
        GuidanceMapping::from_indices(cbank.k(), rows)
    }
}

impl MappingSolver for InjectiveMapping {
    fn name(&self) -> &'static str {
        "injective"
    }

    fn solve(&self, g: &GuidanceBank, cbank: &ClusterBank) -> Result<GuidanceMapping> {
        let s = scores(g, cbank)?;
        if s.nrows() > s.ncols() {
            return Err(Error::invalid("more guidance vectors than centres"));
        }
        let rows = hungarian_max(&s);
        GuidanceMapping::from_indices(cbank.k(), rows)
    }
}

/// Maximum-weight assignment of every row of `w` (rows ≤ cols) to a distinct
/// column. Shortest augmenting path form of the Hungarian method, O(n²m).
fn hungarian_max(w: &Mat) -> Vec<usize> {
    let (n, m) = w.shape();
    let cost = |i: usize, j: usize| -w[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut rows = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    rows
}
