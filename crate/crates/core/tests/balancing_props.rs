use patchattn::balancing::{
    class_weights, diagnosis_weight, oversample_pool, BalancedBatches, ClassCounts, DiagnosisMultipliers, WeightTable,
};
use patchattn::data::{DiagnosisMethod, ImageRef, SampleRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

/// Class counts of the seven-class dermoscopy benchmark.
const HAM_COUNTS: [usize; 7] = [1113, 6705, 514, 327, 1099, 115, 142];

#[test]
fn benchmark_counts_give_expected_weights() {
    let w = class_weights(&ClassCounts::new(HAM_COUNTS.to_vec()).unwrap(), 1.0).unwrap();
    let n: usize = HAM_COUNTS.iter().sum();
    assert_eq!(n, 10015);
    for (wi, &ni) in w.iter().zip(&HAM_COUNTS) {
        assert!((wi - n as f64 / ni as f64).abs() < 1e-12);
    }
    assert!((w[1] - 1.49366).abs() < 5e-6);
    assert!((w[5] - 87.087).abs() < 5e-4);
}

proptest! {
    #[test]
    fn weights_follow_power_law(counts in prop::collection::vec(1usize..5000, 2..10), k in 0.0f64..3.0) {
        let w = class_weights(&ClassCounts::new(counts.clone()).unwrap(), k).unwrap();
        let n: usize = counts.iter().sum();
        for (wi, &ni) in w.iter().zip(&counts) {
            let expected = (n as f64 / ni as f64).powf(k);
            prop_assert!((wi - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn weights_are_scale_invariant(counts in prop::collection::vec(1usize..500, 2..8), m in 2usize..20, k in 0.0f64..3.0) {
        let a = class_weights(&ClassCounts::new(counts.clone()).unwrap(), k).unwrap();
        let b = class_weights(&ClassCounts::new(counts.iter().map(|c| c * m).collect()).unwrap(), k).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn rarer_classes_weigh_more(counts in prop::collection::vec(1usize..5000, 2..8), k in 0.01f64..3.0) {
        let w = class_weights(&ClassCounts::new(counts.clone()).unwrap(), k).unwrap();
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn oversample_pool_is_uniform(labels in prop::collection::vec(0usize..5, 5..200)) {
        let classes = 5;
        prop_assume!((0..classes).all(|c| labels.contains(&c)));
        let pool = oversample_pool(&labels, classes).unwrap();
        let mut hist = vec![0usize; classes];
        for &i in &pool {
            hist[labels[i]] += 1;
        }
        let max = (0..classes).map(|c| labels.iter().filter(|&&l| l == c).count()).max().unwrap();
        prop_assert!(hist.iter().all(|&h| h == max));
        prop_assert_eq!(&pool[..labels.len()], &(0..labels.len()).collect::<Vec<_>>()[..]);
    }
}

#[test]
fn balanced_batches_are_exactly_balanced_for_1000_batches() {
    let labels: Vec<usize> = HAM_COUNTS
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n / 10))
        .collect();
    let per_class = 4;
    let it = BalancedBatches::new(&labels, 7, 7 * per_class, ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut seen = vec![0usize; labels.len()];
    for batch in it.take(1000) {
        let mut hist = [0usize; 7];
        for &i in &batch {
            hist[labels[i]] += 1;
            seen[i] += 1;
        }
        assert_eq!(hist, [per_class; 7]);
    }
    // each class cycles through full permutations, so its members are
    // drawn equally often up to the partially consumed last cycle
    for c in 0..7 {
        let counts: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| seen[i]).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "class {c}: {lo}..{hi}");
    }
}

fn record(label: usize, method: DiagnosisMethod) -> SampleRecord {
    SampleRecord {
        image_ref: ImageRef::Memory(0),
        label,
        diagnosis_method: method,
    }
}

#[test]
fn diagnosis_multiplier_applies_to_benign_classes_only() {
    let counts = ClassCounts::new(HAM_COUNTS.to_vec()).unwrap();
    let benign: BTreeSet<usize> = [1, 4, 5, 6].into();
    let table = WeightTable::new(&counts, 1.0, DiagnosisMultipliers::default(), benign.clone(), false).unwrap();
    let base = class_weights(&counts, 1.0).unwrap();
    let mult = DiagnosisMultipliers::default().as_array();
    for c in 0..7 {
        for (m, &factor) in DiagnosisMethod::KNOWN.iter().zip(&mult) {
            let w = diagnosis_weight(&record(c, *m), &table).unwrap();
            let expected = if benign.contains(&c) { base[c] * factor } else { base[c] };
            assert!((w - expected).abs() < 1e-12, "class {c} {m}");
        }
    }
    assert!(diagnosis_weight(&record(1, DiagnosisMethod::Unknown), &table).is_err());
    assert_eq!(
        diagnosis_weight(&record(0, DiagnosisMethod::Unknown), &table).unwrap(),
        base[0]
    );
}
