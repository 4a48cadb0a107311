use ndarray::{Array1, Array3};
use proptest::prelude::*;

use pnpt::backbone::{MultiScaleFeatureSet, Provenance};
use pnpt::evaluation::{auroc, auroc_pairwise};
use pnpt::pool::{compute_global_coding, GlobalCoding, Metric, NormalityPool};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        // few distinct values so ties are common
        (
            prop::collection::vec(-4i32..4, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both labels", |(_, l)| {
                l.iter().any(|&x| x) && l.iter().any(|&x| !x)
            })
            .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 * 0.25).collect(), l))
    })
}

fn pool_of(codings: &[Vec<f32>]) -> NormalityPool {
    NormalityPool {
        classes: (0..codings.len()).map(|k| format!("c{k:03}")).collect(),
        prototype_features: codings
            .iter()
            .map(|_| MultiScaleFeatureSet::new(vec![Array3::zeros((1, 1, 1))], Provenance::Prior))
            .collect(),
        prototype_codings: codings
            .iter()
            .map(|c| GlobalCoding {
                vector: Array1::from(c.clone()),
            })
            .collect(),
        sample_counts: vec![1; codings.len()],
        metric: Metric::Euclidean,
        normalize_codings: false,
        backbone_fingerprint: String::new(),
    }
}

/// Brute force in f64, first minimum wins.
fn oracle_nearest(codings: &[Vec<f32>], q: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codings.iter().enumerate() {
        let d: f64 = c
            .iter()
            .zip(q)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn codings(classes: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-10.0f32..10.0, dim), classes)
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_count((s, l) in scores_and_labels()) {
        let fast = auroc(&s, &l).unwrap();
        let slow = auroc_pairwise(&s, &l).unwrap();
        prop_assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn auroc_ignores_monotone_transforms((s, l) in scores_and_labels(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let base = auroc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| x * scale + shift).collect();
        let cubed: Vec<f64> = s.iter().map(|x| x.powi(3)).collect();
        prop_assert_eq!(auroc(&affine, &l).unwrap(), base);
        prop_assert_eq!(auroc(&cubed, &l).unwrap(), base);
        // reversing the order mirrors the value
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn retrieval_agrees_with_brute_force(c in codings(7, 12), q in prop::collection::vec(-10.0f32..10.0, 12), pick in 0usize..7) {
        let pool = pool_of(&c);
        prop_assert_eq!(pool.nearest(&GlobalCoding { vector: Array1::from(q.clone()) }), oracle_nearest(&c, &q));
        // a stored prototype always retrieves itself
        prop_assert_eq!(pool.nearest(&pool.prototype_codings[pick]), oracle_nearest(&c, &c[pick]));
    }

    #[test]
    fn retrieval_follows_pool_order(c in codings(6, 8), q in prop::collection::vec(-10.0f32..10.0, 8), rot in 1usize..6) {
        let mut shuffled = c.clone();
        shuffled.rotate_left(rot);
        let query = GlobalCoding { vector: Array1::from(q) };
        let a = pool_of(&c).nearest(&query);
        let b = pool_of(&shuffled).nearest(&query);
        prop_assert_eq!(c[a].clone(), shuffled[b].clone());
    }

    #[test]
    fn duplicate_prototypes_resolve_to_the_first(c in codings(5, 6), dup in 0usize..5) {
        let mut with_dup = c.clone();
        with_dup.push(c[dup].clone());
        let pool = pool_of(&with_dup);
        let q = GlobalCoding { vector: Array1::from(c[dup].clone()) };
        prop_assert!(pool.nearest(&q) < 5);
    }

    #[test]
    fn coding_is_the_channel_mean(vals in prop::collection::vec(-3.0f32..3.0, 2 * 3 * 3 + 4 * 2 * 2)) {
        let a = Array3::from_shape_vec((2, 3, 3), vals[..18].to_vec()).unwrap();
        let b = Array3::from_shape_vec((4, 2, 2), vals[18..].to_vec()).unwrap();
        let f = MultiScaleFeatureSet::new(vec![a.clone(), b.clone()], Provenance::Prior);
        let g = compute_global_coding(&f);
        prop_assert_eq!(g.len(), 6);
        for (i, ch) in a.outer_iter().chain(b.outer_iter()).enumerate() {
            let m = ch.iter().map(|&x| x as f64).sum::<f64>() / ch.len() as f64;
            prop_assert!((g.vector[i] as f64 - m).abs() < 1e-5);
        }
    }
}
