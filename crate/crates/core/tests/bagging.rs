use llpcs::bagging::{build_bags, mixed_bags, two_stage_members, MixedMode, Regime};
use llpcs::data::{Dataset, Domain, FeatureSchema, Features};
use ndarray::Array2;
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(labels: Vec<f64>) -> Dataset {
    let n = labels.len();
    let mut schema = FeatureSchema::numeric_only(1);
    schema.categorical.push(("group".into(), 3));
    Dataset::new(
        Features {
            numeric: Array2::from_shape_fn((n, 1), |(i, _)| ((i * 7919) % 97) as f64),
            categorical: vec![(0..n).map(|i| i % 3).collect()],
        },
        labels,
        Domain::Target,
        schema,
    )
    .unwrap()
}

fn regime_strategy() -> impl Strategy<Value = Regime> {
    prop_oneof![
        (1usize..6).prop_map(|k| Regime::Random { k }),
        (1usize..6).prop_map(|k| Regime::Correlated { feature: "group".into(), k }),
        (1usize..6).prop_map(|k| Regime::Correlated { feature: "x0".into(), k }),
        prop::sample::select(vec![MixedMode::Sbb, MixedMode::Bbb]).prop_map(|mode| Regime::Mixed {
            sizes: vec![1, 2, 4],
            mode
        }),
    ]
}

proptest! {
    #[test]
    fn bags_are_exact_disjoint_and_accounted(
        labels in prop::collection::vec(-100f64..100.0, 8..60),
        regime in regime_strategy(),
        seed in any::<u64>(),
    ) {
        let ds = dataset(labels);
        let bags = build_bags(&ds, &regime, seed).unwrap();
        bags.validate(&ds).unwrap();
        let mut seen = vec![0u32; ds.len()];
        for b in &bags.bags {
            let mean = b.members.iter().map(|&i| ds.labels[i]).sum::<f64>() / b.len() as f64;
            prop_assert!((b.label - mean).abs() <= 1e-12);
            for &i in &b.members {
                seen[i] += 1;
            }
        }
        for &i in &bags.dropped {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        if let Regime::Correlated { feature, .. } = &regime {
            if feature == "group" {
                for b in &bags.bags {
                    let g = ds.features.categorical[0][b.members[0]];
                    prop_assert!(b.members.iter().all(|&i| ds.features.categorical[0][i] == g));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bags(labels in prop::collection::vec(-1f64..1.0, 10..40), seed in any::<u64>()) {
        let ds = dataset(labels);
        let r = Regime::Random { k: 3 };
        prop_assert_eq!(build_bags(&ds, &r, seed).unwrap(), build_bags(&ds, &r, seed).unwrap());
    }
}

/// Pearson statistic for observed counts against equal expected counts.
fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn two_stage_single_pick_is_a_fair_coin() {
    let mut counts = [0u64; 2];
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = two_stage_members(2, 1, &mut rng).unwrap();
        counts[m[0][0]] += 1;
    }
    // 6.635 is the 0.99 quantile of χ² with one degree of freedom.
    let stat = chi_square_uniform(&counts);
    assert!(stat < 6.635, "χ² = {stat}, counts {counts:?}");
}

#[test]
fn two_stage_marginal_inclusion_is_one_half() {
    let (n, k, reps) = (24, 3, 4_000);
    let mut hits = vec![0u64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..reps {
        for bag in two_stage_members(n, k, &mut rng).unwrap() {
            assert_eq!(bag.len(), k);
            for i in bag {
                hits[i] += 1;
            }
        }
    }
    let se = (0.25 / reps as f64).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        let p = h as f64 / reps as f64;
        assert!((p - 0.5).abs() < 4.0 * se, "row {i}: inclusion {p}");
    }
}

#[test]
fn sbb_on_848_rows_floors_per_class() {
    let ds = dataset(vec![0.5; 848]);
    let bags = mixed_bags(&ds, &[8, 32, 128, 256], MixedMode::Sbb, 3).unwrap();
    let count = |k| bags.bags.iter().filter(|b| b.len() == k).count();
    assert_eq!([count(8), count(32), count(128), count(256)], [26, 6, 1, 0]);
    assert_eq!(bags.dropped.len(), 848 - 26 * 8 - 6 * 32 - 128);
}
