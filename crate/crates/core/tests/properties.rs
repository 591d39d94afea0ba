use std::collections::BTreeSet;

use keyward::data::{parse_idx, partition, Dataset, IdxData, PartitionPlan, Split};
use keyward::gradcheck::check_instance;
use keyward::keys::{generate_delta_key, generate_key, generate_orthonormal_keys, ClassLabel, ParticipantId};
use keyward::model::{score, EmbeddingConfig, KeyProtectedClassifier};
use keyward::nn::Mat;
use keyward::rng::seeded;
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn keys_are_unit_norm(d in 2usize..600, seed: u64) {
        let k = generate_key(d, ClassLabel(0), ParticipantId(0), &mut seeded(seed)).unwrap();
        prop_assert!((norm(k.vec()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn delta_keys_sit_at_distance_delta(d in 2usize..300, delta in 0.0f64..=2.0, seed: u64) {
        let mut rng = seeded(seed);
        let base = generate_key(d, ClassLabel(3), ParticipantId(1), &mut rng).unwrap();
        let k = generate_delta_key(&base, delta, ClassLabel(3), ParticipantId(2), &mut rng).unwrap();
        let dist: f64 = base.vec().iter().zip(k.vec()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prop_assert!((norm(k.vec()) - 1.0).abs() < 1e-9);
        prop_assert!((dist - delta).abs() < 1e-9, "dist {} delta {}", dist, delta);
    }

    #[test]
    fn orthonormal_sets_are_orthonormal(d in 2usize..64, seed: u64) {
        let n = (seed as usize % d) + 1;
        let labels: Vec<ClassLabel> = (0..n as u32).map(ClassLabel).collect();
        let keys = generate_orthonormal_keys(d, &labels, ParticipantId(0), &mut seeded(seed)).unwrap();
        for (i, a) in keys.iter().enumerate() {
            prop_assert!((norm(a.vec()) - 1.0).abs() < 1e-9);
            for b in &keys[i + 1..] {
                prop_assert!(a.dot(b.vec()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scores_are_bounded(seed: u64, x in prop::collection::vec(-5.0f64..5.0, 6)) {
        let cfg = EmbeddingConfig { hidden: vec![5], ..EmbeddingConfig::new(6, 4) };
        let clf = KeyProtectedClassifier::new(&cfg, seed).unwrap();
        let k = generate_key(4, ClassLabel(0), ParticipantId(0), &mut seeded(seed ^ 1)).unwrap();
        let s = score(&clf, &x, &k).unwrap();
        prop_assert!(s.abs() <= 1.0 + 1e-6);
    }

    #[test]
    fn partition_conserves_samples(
        labels in prop::collection::vec(0u32..6, 1..80),
        n_parts in 1usize..4,
        shared in any::<bool>(),
        seed: u64,
    ) {
        let samples = Mat::from_shape_fn((labels.len(), 2), |(i, j)| (i * 2 + j) as f64);
        // Tag every sample by its row so duplicates are detectable.
        let ds = Dataset::new(samples, labels.iter().map(|&l| ClassLabel(l)).collect(), Split::Train).unwrap();
        let classes: Vec<ClassLabel> = ds.classes().into_iter().collect();
        let plan = if shared && n_parts > 1 {
            let mut a: Vec<(ParticipantId, Vec<ClassLabel>)> = PartitionPlan::contiguous(&classes, n_parts)
                .assignments
                .into_iter()
                .map(|(p, cs)| (p, cs.into_iter().collect()))
                .collect();
            let first = classes[0];
            for (_, cs) in a.iter_mut().skip(1) {
                if !cs.contains(&first) {
                    cs.push(first);
                }
            }
            PartitionPlan::new(a).shared()
        } else {
            PartitionPlan::contiguous(&classes, n_parts)
        };
        let parts = partition(&ds, &plan, &mut seeded(seed)).unwrap();
        let total: usize = parts.values().map(|d| d.len()).sum();
        prop_assert_eq!(total, ds.len());
        let mut seen = BTreeSet::new();
        for d in parts.values() {
            for r in d.samples().rows() {
                prop_assert!(seen.insert(r[0] as i64), "row {} appears twice", r[0]);
            }
        }
    }

    #[test]
    fn idx_round_trip(rows in 1usize..5, cols in 1usize..5, pixels in prop::collection::vec(any::<u8>(), 0..100)) {
        let n = pixels.len() / (rows * cols);
        let pixels = pixels[..n * rows * cols].to_vec();
        let images = IdxData::Images { n, rows, cols, pixels: pixels.clone() };
        let bytes = images.to_bytes();
        prop_assert_eq!(parse_idx(&bytes).unwrap().to_bytes(), bytes);

        let labels = IdxData::Labels(pixels);
        let bytes = labels.to_bytes();
        prop_assert_eq!(parse_idx(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn truncated_idx_is_a_format_error(len in 1usize..30, cut in 1usize..30) {
        let bytes = IdxData::Labels(vec![1; len]).to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(parse_idx(&bytes[..bytes.len() - cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradients_match_finite_differences(seed: u64) {
        for c in check_instance(&mut seeded(seed)).unwrap() {
            prop_assert!(c.passed(), "{} rel error {}", c.name, c.max_rel_error);
        }
    }
}
