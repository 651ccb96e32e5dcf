use std::collections::BTreeMap;

use proptest::prelude::*;
use tcv2_core::data::{Slide, SlideRecord};
use tcv2_core::rng::stream;
use tcv2_core::tensor::DenseTensor;
use tcv2_core::train::{augment_bag, sample_bag, AugmentConfig, Bag, SampleMode};

/// 0.99 quantile of the χ² distribution with 64 degrees of freedom.
const CHI2_64_P01: f64 = 93.217;

fn slide(n: usize, d: usize) -> Slide {
    Slide {
        record: SlideRecord {
            slide_id: "s".into(),
            patient_id: "p".into(),
            feature_file: "s.tcf".into(),
            labels: BTreeMap::from([("t".to_string(), 1)]),
        },
        features: DenseTensor::matrix(n, d, (0..n * d).map(|v| v as f64).collect()).unwrap(),
        coords: None,
    }
}

#[test]
fn train_bag_sizes_are_uniform() {
    let s = slide(200, 1);
    let mut counts = [0u32; 65];
    let mut rng = stream(31, &[]);
    let draws = 10_000;
    for _ in 0..draws {
        let b = sample_bag(&s, (64, 128), SampleMode::Train, &mut rng).unwrap();
        counts[b.len() - 64] += 1;
    }
    let expected = draws as f64 / 65.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_64_P01, "chi2 = {chi2}");
}

#[test]
fn train_bags_hold_distinct_instances_when_possible() {
    let s = slide(200, 2);
    let mut rng = stream(32, &[]);
    for _ in 0..100 {
        let b = sample_bag(&s, (64, 128), SampleMode::Train, &mut rng).unwrap();
        let mut idx = b.instance_index.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), b.len());
        for (k, &i) in b.instance_index.iter().enumerate() {
            assert_eq!(b.features.row(k), s.features.row(i));
        }
    }
}

#[test]
fn val_bags_are_stable_across_calls() {
    let s = slide(300, 1);
    let a = sample_bag(&s, (128, 128), SampleMode::Val, &mut stream(5, &[])).unwrap();
    let b = sample_bag(&s, (128, 128), SampleMode::Val, &mut stream(5, &[])).unwrap();
    assert_eq!(a.instance_index, b.instance_index);
    assert!(a.instance_index.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn jitter_has_requested_std() {
    let bag = Bag::from_slide(&slide(100_000, 1));
    let cfg = AugmentConfig {
        feature_jitter_sigma: 0.1,
        instance_drop_p: 0.0,
        enabled: true,
    };
    let out = augment_bag(&bag, &cfg, &mut stream(33, &[])).unwrap();
    let noise: Vec<f64> = out
        .features
        .values()
        .iter()
        .zip(bag.features.values())
        .map(|(a, b)| a - b)
        .collect();
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64).sqrt();
    assert!((std - 0.1).abs() < 0.005, "std = {std}");
    assert!(mean.abs() < 0.005);
    assert_eq!(out.labels, bag.labels);
}

proptest! {
    #[test]
    fn sampled_sizes_stay_in_range(n in 1usize..300, lo in 1usize..50, extra in 0usize..50, seed in any::<u64>()) {
        let s = slide(n, 1);
        let b = sample_bag(&s, (lo, lo + extra), SampleMode::Train, &mut stream(seed, &[])).unwrap();
        prop_assert!(b.len() >= lo && b.len() <= lo + extra);
        prop_assert!(b.instance_index.iter().all(|&i| i < n));
    }

    #[test]
    fn dropping_keeps_a_nonempty_subset(n in 1usize..40, p in 0.0f64..0.99, seed in any::<u64>()) {
        let bag = Bag::from_slide(&slide(n, 2));
        let cfg = AugmentConfig { feature_jitter_sigma: 0.0, instance_drop_p: p, enabled: true };
        let out = augment_bag(&bag, &cfg, &mut stream(seed, &[])).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= n);
        for (k, &i) in out.instance_index.iter().enumerate() {
            prop_assert_eq!(out.features.row(k), bag.features.row(i));
        }
    }
}
