use bcpt_core::cluster::{aggregate, assign, ema_update, kmeans, similarity, ClusterBank, EmbeddingBatch, KMeansOptions, PixelLabel};
use bcpt_core::eval::{cluster_quality, iou_metrics, prototype_segment};
use bcpt_core::guidance::{mapping_score, mapping_solvers, update_rules, GuidanceBank, GuidanceMapping};
use bcpt_core::losses::{base_loss, bm_loss, ProjectionBank};
use bcpt_core::synth::{make_fold, reconstruct_truth, SceneConfig};
use bcpt_core::Mat;
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

fn unit_bank(dim: usize, k: usize, mu: f64) -> impl Strategy<Value = ClusterBank> {
    mat(dim, k)
        .prop_filter("non-degenerate centres", |m| m.column_iter().all(|c| c.norm() > 1e-3))
        .prop_map(move |mut m| {
            for mut c in m.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            ClusterBank::new(m, mu).unwrap()
        })
}

/// `(centres, pixels)` with matching dimension.
fn bank_and_pixels() -> impl Strategy<Value = (ClusterBank, Mat)> {
    (1usize..6, 2usize..6, 1usize..20)
        .prop_flat_map(|(d, k, n)| (unit_bank(d, k, 0.9), mat(d, n)))
}

/// All maps from `rows` items into `0..k`, optionally injective.
fn enumerate_maps(rows: usize, k: usize, injective: bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let total = k.pow(rows as u32);
    for code in 0..total {
        let mut c = code;
        let m: Vec<usize> = (0..rows)
            .map(|_| {
                let v = c % k;
                c /= k;
                v
            })
            .collect();
        let distinct = {
            let mut s = m.clone();
            s.sort_unstable();
            s.dedup();
            s.len() == m.len()
        };
        if !injective || distinct {
            out.push(m);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn assignment_is_one_hot_and_scale_invariant((bank, pixels) in bank_and_pixels(), scales in prop::collection::vec(0.01f64..100.0, 20)) {
        let bg = EmbeddingBatch::background_only(pixels.clone()).unwrap();
        let a = assign(&similarity(&bank, &bg).unwrap()).unwrap();
        let dense = a.to_dense();
        prop_assert_eq!(dense.shape(), (bank.k(), pixels.ncols()));
        for col in dense.column_iter() {
            prop_assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), bank.k() - 1);
        }
        let mut scaled = pixels.clone();
        for (n, mut c) in scaled.column_iter_mut().enumerate() {
            c *= scales[n];
        }
        let b = assign(&similarity(&bank, &EmbeddingBatch::background_only(scaled).unwrap()).unwrap()).unwrap();
        // a positive factor can only flip exact ties through rounding; compare scores instead
        for n in 0..pixels.ncols() {
            let x = pixels.column(n);
            let (ka, kb) = (a.indices()[n], b.indices()[n]);
            prop_assert!((bank.centers().column(ka).dot(&x) - bank.centers().column(kb).dot(&x)).abs() <= 1e-12);
        }
        // reassigning with the same bank is stable
        prop_assert_eq!(&a, &assign(&similarity(&bank, &bg).unwrap()).unwrap());
    }

    #[test]
    fn aggregate_matches_matrix_product((bank, pixels) in bank_and_pixels()) {
        let bg = EmbeddingBatch::background_only(pixels.clone()).unwrap();
        let a = assign(&similarity(&bank, &bg).unwrap()).unwrap();
        let agg = aggregate(&bg, &a).unwrap();
        // left-to-right per-pixel summation, compared exactly
        let mut oracle = Mat::zeros(pixels.nrows(), bank.k());
        for (n, &k) in a.indices().iter().enumerate() {
            for r in 0..pixels.nrows() {
                oracle[(r, k)] += pixels[(r, n)];
            }
        }
        prop_assert_eq!(&agg.sums, &oracle);
        prop_assert!((&agg.sums - &pixels * a.to_dense().transpose()).abs().max() <= 1e-12);
        prop_assert_eq!(agg.counts.iter().sum::<usize>(), pixels.ncols());
    }

    #[test]
    fn ema_keeps_norms_bounded_and_skips_empty((bank, pixels) in bank_and_pixels(), mu in 0.5f64..0.9999) {
        let bank = ClusterBank::new(bank.centers().clone(), mu).unwrap();
        let bg = EmbeddingBatch::background_only(pixels).unwrap();
        let a = assign(&similarity(&bank, &bg).unwrap()).unwrap();
        let agg = aggregate(&bg, &a).unwrap();
        let next = ema_update(&bank, &agg).unwrap();
        for k in 0..bank.k() {
            let old = bank.centers().column(k);
            let new = next.centers().column(k);
            prop_assert!(new.norm() <= 1.0 + 1e-12);
            let s = agg.sums.column(k);
            if agg.counts[k] == 0 || s.norm() == 0.0 {
                prop_assert_eq!(old, new);
            } else {
                let oracle = old / old.norm() * mu + s / s.norm() * (1.0 - mu);
                prop_assert!((new - oracle).abs().max() <= 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(points in (1usize..4, 3usize..30).prop_flat_map(|(d, n)| mat(d, n)), k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(points.ncols());
        let r = kmeans(&points, k, seed, KMeansOptions::default()).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert_eq!(r.labels.len(), points.ncols());
        prop_assert!(r.labels.iter().all(|&l| l < k));
    }

    #[test]
    fn mapping_is_one_hot_optimal_and_leaves_a_centre_free(
        (bank, g) in (1usize..5, 2usize..5).prop_flat_map(|(d, k)| (unit_bank(d, k, 0.9), mat(d, k - 1)))
    ) {
        let g = GuidanceBank::new(g).unwrap();
        let k = bank.k();
        for (name, injective) in [("argmax", false), ("injective", true)] {
            let m = mapping_solvers().create(name).unwrap().solve(&g, &bank).unwrap();
            let dense = m.to_dense();
            prop_assert_eq!(dense.shape(), (k - 1, k));
            for row in dense.row_iter() {
                prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            }
            prop_assert!(!m.unassigned().is_empty());
            let best = enumerate_maps(k - 1, k, injective)
                .into_iter()
                .map(|rows| mapping_score(&g, &bank, &GuidanceMapping::from_indices(k, rows).unwrap()).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let got = mapping_score(&g, &bank, &m).unwrap();
            prop_assert!((got - best).abs() <= 1e-12 * best.abs().max(1.0), "{}: {} vs {}", name, got, best);
        }
    }

    #[test]
    fn guided_update_leaves_unassigned_centres(
        (bank, g) in (1usize..5, 2usize..5).prop_flat_map(|(d, k)| (unit_bank(d, k, 0.99), mat(d, k - 1)))
    ) {
        let g = GuidanceBank::new(g).unwrap();
        let m = mapping_solvers().create("argmax").unwrap().solve(&g, &bank).unwrap();
        for rule in ["literal", "normalized"] {
            let next = match update_rules().create(rule).unwrap().update(&bank, &g, &m) {
                Ok(b) => b,
                Err(_) => continue, // cancelling guidance vectors
            };
            for k in m.unassigned() {
                prop_assert_eq!(bank.centers().column(k), next.centers().column(k));
            }
            for k in 0..bank.k() {
                prop_assert!(next.centers().column(k).norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn losses_positive_for_finite_inputs(i in mat(3, 1), (bank, w) in (unit_bank(3, 3, 0.9), mat(3, 3)), t in 0usize..3) {
        let (l, _) = bm_loss(i.column(0), &bank, t).unwrap();
        prop_assert!(l >= 0.0);
        let (b, _, _) = base_loss(i.column(0), &ProjectionBank::new(w).unwrap(), t).unwrap();
        prop_assert!(b >= 0.0);
    }

    #[test]
    fn iou_matches_count_oracle(pred in prop::collection::vec(0usize..4, 64), truth in prop::collection::vec(0usize..4, 64)) {
        let r = iou_metrics(&pred, &truth, &[0, 1, 2, 3], 0).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for c in 1..4 {
            let inter = pred.iter().zip(&truth).filter(|(p, t)| **p == c && **t == c).count();
            let union = pred.iter().zip(&truth).filter(|(p, t)| **p == c || **t == c).count();
            if union == 0 {
                prop_assert!(!r.per_class.contains_key(&c));
            } else {
                let iou = inter as f64 / union as f64;
                prop_assert_eq!(r.per_class[&c], iou);
                sum += iou;
                n += 1;
            }
        }
        if n > 0 {
            prop_assert!((r.mean_iou - sum / n as f64).abs() < 1e-15);
        }
        prop_assert!((0.0..=1.0).contains(&r.fb_iou));
    }

    #[test]
    fn prototype_segment_ignores_query_scale(support in mat(4, 6), query in mat(4, 10), scale in 0.01f64..100.0, tau in 0.0f64..1.0) {
        let mask = [true, true, false, true, false, false];
        let mut proto = nalgebra::DVector::zeros(4);
        for (i, &m) in mask.iter().enumerate() {
            if m { proto += support.column(i); }
        }
        prop_assume!(proto.norm() > 1e-6);
        let a = prototype_segment(&support, &mask, &query, tau);
        let b = prototype_segment(&support, &mask, &(&query * scale), tau);
        let (a, b) = (a.unwrap(), b.unwrap());
        // equal up to pixels sitting on the threshold after rounding
        let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        prop_assert!(differing <= 1);
    }

    #[test]
    fn cluster_quality_permutation_invariant(assign in prop::collection::vec(0usize..4, 1..60), hidden_raw in prop::collection::vec(0usize..3, 60), perm in Just([2usize, 0, 3, 1])) {
        let hidden: Vec<Option<usize>> = hidden_raw[..assign.len()].iter().map(|&h| if h == 0 { None } else { Some(h + 10) }).collect();
        let q = cluster_quality(&assign, &hidden).unwrap();
        let relabelled: Vec<usize> = assign.iter().map(|&a| perm[a]).collect();
        let r = cluster_quality(&relabelled, &hidden).unwrap();
        prop_assert!((q.nmi - r.nmi).abs() < 1e-12);
        prop_assert_eq!(q.purity, r.purity);
        let groups = { let mut g = hidden.clone(); g.sort(); g.dedup(); g.len() };
        prop_assert!(q.purity >= 1.0 / groups as f64 - 1e-12);
        prop_assert!((0.0..=1.0).contains(&q.nmi));
    }

    #[test]
    fn relabelling_is_lossless(seed in any::<u64>(), n_novel in 0usize..3) {
        let cfg = SceneConfig { height: 10, width: 10, n_novel, ..Default::default() };
        let fold = make_fold(&cfg, 2, 1, seed).unwrap();
        for s in fold.train_scenes.iter().chain(&fold.eval_scenes) {
            prop_assert_eq!(&reconstruct_truth(&s.train_labels, &s.hidden_novel()), &s.true_labels);
            for (t, l) in s.train_labels.iter().zip(&s.true_labels) {
                if let bcpt_core::synth::TrueLabel::Class(c) = l {
                    if cfg.is_novel(*c) {
                        prop_assert_eq!(*t, PixelLabel::Background);
                    } else {
                        prop_assert_eq!(*t, PixelLabel::Base(*c));
                    }
                }
            }
        }
    }
}

#[test]
fn random_clustering_has_low_nmi() {
    use rand::{Rng, SeedableRng};
    let mut total = 0.0;
    for draw in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(draw);
        let hidden: Vec<Option<usize>> = (0..200).map(|i| if i % 2 == 0 { None } else { Some(7) }).collect();
        let assign: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        total += cluster_quality(&assign, &hidden).unwrap().nmi;
    }
    assert!(total / 100.0 < 0.1);
}
