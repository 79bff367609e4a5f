//! Lloyd's k-means with k-means++ seeding.
//!
//! Used as the per-epoch offline clustering baseline and to distil base-class
//! projection vectors into guidance vectors.

use rand::Rng;

use super::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Rng as SeededRng};
use crate::Mat;
use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once the relative inertia decrease falls below this.
    pub tol: f64,
    /// Independently seeded runs; the one with the lowest final inertia is
    /// returned (the earliest on ties).
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `D×k` centroids.
    pub centers: Mat,
    /// Nearest-centroid index of every point.
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the returned run, starting
    /// with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// k-means over the columns of a background-only batch.
pub fn offline_kmeans(bg: &EmbeddingBatch, k: usize, seed: u64) -> Result<KMeansResult> {
    bg.require_background()?;
    kmeans(bg.data(), k, seed, KMeansOptions::default())
}

/// k-means over the columns of `points`.
pub fn kmeans(points: &Mat, k: usize, seed: u64, opts: KMeansOptions) -> Result<KMeansResult> {
    let n = points.ncols();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::structural("non-finite point"));
    }
    if opts.n_init == 0 {
        return Err(Error::invalid("n_init must be positive"));
    }
    let mut best = lloyd(points, k, seed, &opts);
    for run in 1..opts.n_init {
        let res = lloyd(points, k, derive_seed(seed, "kmeans-init", run as u64), &opts);
        if res.inertia < best.inertia {
            best = res;
        }
    }
    Ok(best)
}

fn lloyd(points: &Mat, k: usize, seed: u64, opts: &KMeansOptions) -> KMeansResult {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut centers = plus_plus_seeding(points, k, &mut rng);
    let (mut labels, mut inertia) = assign_nearest(points, &centers);
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        update_means(points, &labels, &mut centers);
        let (new_labels, new_inertia) = assign_nearest(points, &centers);
        history.push(new_inertia);
        let prev = inertia;
        labels = new_labels;
        inertia = new_inertia;
        if prev <= 0.0 || (prev - new_inertia) <= opts.tol * prev {
            converged = true;
            break;
        }
    }

    KMeansResult {
        centers,
        labels,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    }
}

fn sq_dist(points: &Mat, n: usize, centers: &Mat, k: usize) -> f64 {
    points
        .column(n)
        .iter()
        .zip(centers.column(k).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn plus_plus_seeding(points: &Mat, k: usize, rng: &mut SeededRng) -> Mat {
    let n = points.ncols();
    let mut centers = Mat::zeros(points.nrows(), k);
    let first = rng.random_range(0..n);
    centers.set_column(0, &points.column(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();

    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just past the final sum
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..n)
        };
        centers.set_column(c, &points.column(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn assign_nearest(points: &Mat, centers: &Mat) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.ncols());
    let mut inertia = 0.0;
    for n in 0..points.ncols() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..centers.ncols() {
            let d = sq_dist(points, n, centers, k);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        labels.push(best);
        inertia += best_d;
    }
    (labels, inertia)
}

/// Empty clusters keep their previous centroid.
fn update_means(points: &Mat, labels: &[usize], centers: &mut Mat) {
    let k = centers.ncols();
    let mut sums = Mat::zeros(points.nrows(), k);
    let mut counts = vec![0usize; k];
    for (n, &l) in labels.iter().enumerate() {
        let mut col = sums.column_mut(l);
        col += points.column(n);
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mean = sums.column(c) / counts[c] as f64;
            centers.set_column(c, &mean);
        }
    }
}

/// Sum of squared distances of each point to its labelled centroid.
pub fn inertia_of(points: &Mat, centers: &Mat, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(n, &k)| sq_dist(points, n, centers, k))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_single_cluster() {
        let pts = Mat::from_fn(3, 5, |r, _| r as f64 + 0.5);
        let res = kmeans(&pts, 1, 1, KMeansOptions::default()).unwrap();
        assert_eq!(res.centers.column(0), pts.column(0));
        assert_eq!(res.inertia, 0.0);
        assert_eq!(res.labels, vec![0; 5]);
    }

    #[test]
    fn identical_points_more_clusters_than_distinct_values() {
        let pts = Mat::from_element(2, 4, 1.0);
        let res = kmeans(&pts, 3, 9, KMeansOptions::default()).unwrap();
        assert_eq!(res.inertia, 0.0);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let pts = Mat::zeros(2, 3);
        assert!(matches!(
            kmeans(&pts, 4, 0, KMeansOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(kmeans(&pts, 0, 0, KMeansOptions::default()).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let pts = Mat::from_fn(2, 40, |r, c| ((c * 7 + r * 3) % 11) as f64 * 0.37);
        let a = kmeans(&pts, 3, 42, KMeansOptions::default()).unwrap();
        let b = kmeans(&pts, 3, 42, KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restarts_never_do_worse_than_the_first_run() {
        let pts = Mat::from_fn(2, 12, |r, c| ((c * 5 + r * 7) % 9) as f64 - 4.0);
        let one = kmeans(&pts, 3, 8, KMeansOptions { n_init: 1, ..Default::default() }).unwrap();
        let many = kmeans(&pts, 3, 8, KMeansOptions::default()).unwrap();
        assert!(many.inertia <= one.inertia);
        assert!(kmeans(&pts, 3, 8, KMeansOptions { n_init: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn reported_inertia_matches_labels() {
        let pts = Mat::from_fn(3, 30, |r, c| ((c * 13 + r * 5) % 17) as f64 * 0.1);
        let res = kmeans(&pts, 4, 5, KMeansOptions::default()).unwrap();
        let again = inertia_of(&pts, &res.centers, &res.labels);
        assert!((again - res.inertia).abs() <= 1e-12 * res.inertia.max(1.0));
        assert_eq!(*res.inertia_history.last().unwrap(), res.inertia);
    }
}
