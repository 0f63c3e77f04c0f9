mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fairforest::data::{generate_synthetic, Instance, OnlineStandardizer, SyntheticConfig};
use fairforest::forest::{build_mask, leaf_probabilities, node_outputs, ForestShape, ObliqueForest};
use fairforest::gradients::{gradient_norm, huber, huber_grad_coeff, node_grad, total_gradient, ForestGradient};
use fairforest::learner::{run_stream, Learner, LearnerConfig, MetricsTracker};

fn forest_from(seed: u64, height: usize, trees: usize, dim: usize, classes: usize) -> ObliqueForest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ObliqueForest::random(ForestShape::new(height, trees, dim, classes).unwrap(), &mut rng).unwrap()
}

fn gradient_from(values: &[f64], shape: ForestShape) -> ForestGradient {
    let mut g = ForestGradient::zeros(shape);
    let mut it = values.iter().cycle();
    for block in g.blocks_mut() {
        for v in block.iter_mut() {
            *v = *it.next().unwrap();
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn leaf_probabilities_form_a_distribution(
        seed in any::<u64>(),
        height in 1usize..=6,
        x in prop::collection::vec(-20.0f64..20.0, 3),
        scale in 0.1f64..50.0,
    ) {
        let mut forest = forest_from(seed, height, 1, 3, 2);
        forest.trees_mut()[0].weights.mapv_inplace(|w| w * scale);
        let outputs = node_outputs(&forest.trees()[0], &x).unwrap();
        let p = leaf_probabilities(&outputs, forest.mask()).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_columns_hold_one_signed_entry_per_level(height in 1usize..=10) {
        let mask = build_mask(height).unwrap();
        for leaf in 0..mask.cols() {
            let nonzero: Vec<usize> = (0..mask.rows()).filter(|i| mask.entry(*i, leaf) != 0).collect();
            prop_assert_eq!(nonzero.len(), height);
            prop_assert_eq!(nonzero[0], 0);
            let walk: Vec<usize> = common::path(height, leaf).iter().map(|s| s.0).collect();
            prop_assert_eq!(nonzero, walk);
        }
    }

    #[test]
    fn huber_coefficient_is_bounded_and_odd(f in -1.0f64..1.0, delta in 1e-4f64..0.5) {
        let c = huber_grad_coeff(f, delta);
        prop_assert!(c.abs() <= delta);
        if f.abs() >= delta || f.abs() < delta / 2.0 {
            prop_assert_eq!(huber_grad_coeff(-f, delta), -c);
        }
        prop_assert!(huber(f, delta) >= 0.0);
    }

    #[test]
    fn huber_branches_agree_at_threshold(delta in 1e-4f64..1.0) {
        let eps = 1e-13;
        prop_assert!((huber(delta - eps, delta) - huber(delta + eps, delta)).abs() <= 1e-12);
    }

    #[test]
    fn node_gradient_is_bounded_by_input(n in 0.0f64..=1.0, x in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let (gw, gb) = node_grad(n, &x);
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = gw.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(gn <= xn / 4.0 + 1e-15);
        prop_assert!((0.0..=0.25).contains(&gb));
    }

    #[test]
    fn norm_and_sum_match_naive_loops(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let shape = ForestShape::new(2, 2, 2, 2).unwrap();
        let (ga, gb) = (gradient_from(&a, shape), gradient_from(&b, shape));
        let fa = common::flat(&ga);
        let fb = common::flat(&gb);
        let naive = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((gradient_norm(&ga) - naive).abs() <= 1e-12);
        let sum = common::flat(&total_gradient(&ga, &gb).unwrap());
        for k in 0..fa.len() {
            prop_assert_eq!(sum[k], fa[k] + fb[k]);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(log in prop::collection::vec((0usize..2, 0usize..2, 0usize..2), 1..200)) {
        let mut t = MetricsTracker::new(2);
        for (pred, y, a) in &log {
            t.record(*pred, *y, *a, *pred as f64);
        }
        prop_assert!((0.0..=1.0).contains(&t.accuracy()));
        if let Some(dp) = t.dp_hard() {
            prop_assert!((0.0..=1.0).contains(&dp));
        }
    }

    #[test]
    fn standardization_uses_only_past_rows(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 2..60),
        cut in 1usize..60,
    ) {
        let cut = cut.min(rows.len());
        let mut full = OnlineStandardizer::new(2);
        let mut prefix = OnlineStandardizer::new(2);
        let a: Vec<Vec<f64>> = rows.iter().map(|r| { let mut r = r.clone(); full.standardize(&mut r); r }).collect();
        let b: Vec<Vec<f64>> = rows[..cut].iter().map(|r| { let mut r = r.clone(); prefix.standardize(&mut r); r }).collect();
        prop_assert_eq!(&a[..cut], &b[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let cfg = LearnerConfig { seed, ..LearnerConfig::new(4, 2, lambda).unwrap() };
        let synth = SyntheticConfig { n: 300, dim: 4, seed, ..SyntheticConfig::default() };
        let run = || {
            let mut l = Learner::new(cfg.clone()).unwrap();
            run_stream(&mut l, generate_synthetic(&synth).unwrap()).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn estimator_footprint_is_constant(n in 1usize..400) {
        let cfg = LearnerConfig::new(3, 2, 1.0).unwrap();
        let mut l = Learner::new(cfg).unwrap();
        let stream: Vec<_> = (0..n).map(|k| Ok(Instance { x: vec![k as f64 * 0.01, 0.5, -0.2], y: k % 2, a: (k / 3) % 2 })).collect();
        let before = l.store().unwrap().footprint_bytes();
        run_stream(&mut l, stream).unwrap();
        prop_assert_eq!(l.store().unwrap().footprint_bytes(), before);
    }
}
