//! Property tests for the structural invariants: partition disjointness and
//! coverage, frame geometry at arbitrary sizes, cosine-loss scale invariance,
//! kernel-distance symmetry and non-negativity, and forward determinism.

use proptest::prelude::*;

use fedktl_core::data::{make_synthetic_dataset, partition_dirichlet, partition_pathological};
use fedktl_core::etf::{arcface_loss_value, synthesize_etf, ArcFaceParams};
use fedktl_core::nn::ModuleBuilder;
use fedktl_core::rng::StreamKey;
use fedktl_core::server::mmd_rbf;
use fedktl_core::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dirichlet_partition_disjoint_and_bounded(
        classes in 2u32..6,
        per_class in 8usize..30,
        clients in 1usize..6,
        beta in 0.05f64..5.0,
        seed in 0u64..500,
    ) {
        let ds = make_synthetic_dataset::<f32>(classes, 4, per_class, 0.3, seed).unwrap();
        let plan = match partition_dirichlet(&ds, clients, beta, seed) {
            Ok(plan) => plan,
            // Tiny pools at small beta can legitimately starve a client.
            Err(_) => return Ok(()),
        };
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0usize;
        for c in 0..clients {
            total += plan.client_size(c);
            for &i in plan.samples(c) {
                prop_assert!(seen.insert(i), "sample {i} assigned twice");
            }
            // Split is exact and rounds toward train.
            let n = plan.client_size(c);
            prop_assert_eq!(plan.test(c).len(), n / 4);
            prop_assert_eq!(plan.train(c).len(), n - n / 4);
            if n >= 8 && n % 4 == 0 {
                let ratio = plan.train(c).len() as f64 / plan.test(c).len() as f64;
                prop_assert!((2.9..=3.1).contains(&ratio));
            }
            // Class sets match the assigned samples.
            let classes_seen: std::collections::BTreeSet<u32> =
                plan.samples(c).iter().map(|&i| ds.label(i)).collect();
            prop_assert_eq!(plan.classes(c), &classes_seen);
        }
        prop_assert!(total <= ds.len());
    }

    #[test]
    fn pathological_partition_owns_all_classes(
        classes in 2u32..8,
        clients in 2usize..6,
        seed in 0u64..500,
    ) {
        let cpc = ((classes as usize) / 2).max(1);
        if clients * cpc < classes as usize {
            return Ok(());
        }
        let ds = make_synthetic_dataset::<f32>(classes, 4, 30, 0.3, seed).unwrap();
        let plan = match partition_pathological(&ds, clients, cpc, seed) {
            Ok(plan) => plan,
            Err(_) => return Ok(()),
        };
        let mut covered = std::collections::BTreeSet::new();
        let mut seen = std::collections::BTreeSet::new();
        for c in 0..clients {
            prop_assert_eq!(plan.classes(c).len(), cpc, "client {} owns {:?}", c, plan.classes(c));
            covered.extend(plan.classes(c).iter().copied());
            for &i in plan.samples(c) {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(covered.len(), classes as usize);
    }

    #[test]
    fn frame_geometry_at_arbitrary_sizes(
        classes in 2usize..12,
        extra in 0usize..8,
        seed in 0u64..200,
    ) {
        let dim = classes - 1 + extra;
        let etf = synthesize_etf::<f64>(classes, dim, seed).unwrap();
        prop_assert!(etf.invariant_residual() < 1e-8);
        prop_assert!(etf.rotation_residual() < 1e-8);
    }

    #[test]
    fn margin_loss_ignores_feature_scale(
        raw in prop::collection::vec(-1.0f64..1.0, 5),
        scale in 0.01f64..100.0,
        label in 0usize..4,
    ) {
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let etf = synthesize_etf::<f64>(4, 5, 9).unwrap();
        let params = ArcFaceParams::new(64.0, 0.5).unwrap();
        let base = Tensor::new(vec![1, 5], raw.clone()).unwrap();
        let scaled = Tensor::new(vec![1, 5], raw.iter().map(|v| v * scale).collect()).unwrap();
        let a = arcface_loss_value(&base, &[label], &etf, &params).unwrap();
        let b = arcface_loss_value(&scaled, &[label], &etf, &params).unwrap();
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn kernel_distance_symmetric_nonnegative(
        xs in prop::collection::vec(-2.0f64..2.0, 6..24),
        ys in prop::collection::vec(-2.0f64..2.0, 6..24),
        sigma2 in 0.1f64..8.0,
    ) {
        let xn = xs.len() / 3;
        let yn = ys.len() / 3;
        let x = Tensor::new(vec![xn, 3], xs[..xn * 3].to_vec()).unwrap();
        let y = Tensor::new(vec![yn, 3], ys[..yn * 3].to_vec()).unwrap();
        let ab = mmd_rbf(&x, &y, &[sigma2, 2.0 * sigma2]).unwrap();
        let ba = mmd_rbf(&y, &x, &[sigma2, 2.0 * sigma2]).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= -1e-7, "biased estimate {} below tolerance", ab);
    }

    #[test]
    fn forward_is_deterministic(
        seed in 0u64..300,
        input in prop::collection::vec(-1.5f64..1.5, 6),
    ) {
        let build = || ModuleBuilder::<f64>::new("m", StreamKey::new(seed).tag("prop"))
            .fc(6, 5)
            .batch_norm(5)
            .relu()
            .fc(5, 3)
            .build(false);
        let a = build();
        let b = build();
        let x = Tensor::new(vec![1, 6], input.clone()).unwrap();
        let ya = a.apply_eval(&x).unwrap();
        let yb = b.apply_eval(&x).unwrap();
        prop_assert_eq!(ya.data(), yb.data());
    }
}
