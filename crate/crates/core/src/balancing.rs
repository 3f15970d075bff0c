//! Class-imbalance countermeasures: oversampling, strictly balanced
//! batches, frequency-based loss weights and diagnosis-guided weights.

use crate::data::{DiagnosisMethod, SampleRecord};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Per-class example counts; every class must be represented.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    counts: Vec<usize>,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Invalid(format!(
                "class {c} has no examples; its weight is undefined"
            )));
        }
        if counts.is_empty() {
            return Err(Error::Invalid("no classes".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut counts = vec![0; n_classes];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Invalid(format!("label {l} >= {n_classes}")))? += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// `n_i = (N / N_i)^k`.
pub fn class_weights(counts: &ClassCounts, k: f64) -> Result<Vec<f64>> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::Invalid(format!("weight exponent must be non-negative, got {k}")));
    }
    let total = counts.total() as f64;
    Ok(counts.counts().iter().map(|&n| (total / n as f64).powf(k)).collect())
}

/// Loss multipliers per ground-truth method, for benign classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosisMultipliers {
    pub expert_consensus: f64,
    pub serial_imaging: f64,
    pub confocal_microscopy: f64,
    pub histopathology: f64,
}

impl Default for DiagnosisMultipliers {
    fn default() -> Self {
        Self {
            expert_consensus: 1.0,
            serial_imaging: 1.2,
            confocal_microscopy: 1.4,
            histopathology: 1.6,
        }
    }
}

impl DiagnosisMultipliers {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let [a, b, c, d] = v else {
            return Err(Error::Config(format!(
                "expected 4 diagnosis multipliers, got {}",
                v.len()
            )));
        };
        let m = Self {
            expert_consensus: *a,
            serial_imaging: *b,
            confocal_microscopy: *c,
            histopathology: *d,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.expert_consensus,
            self.serial_imaging,
            self.confocal_microscopy,
            self.histopathology,
        ]
    }

    /// Positive and non-decreasing in examination cost.
    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::Config(format!(
                "diagnosis multipliers must be positive, got {v:?}"
            )));
        }
        if v.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "diagnosis multipliers must be non-decreasing (consensus <= serial <= confocal <= histopathology), got {v:?}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, method: DiagnosisMethod) -> Option<f64> {
        match method {
            DiagnosisMethod::ExpertConsensus => Some(self.expert_consensus),
            DiagnosisMethod::SerialImaging => Some(self.serial_imaging),
            DiagnosisMethod::ConfocalMicroscopy => Some(self.confocal_microscopy),
            DiagnosisMethod::Histopathology => Some(self.histopathology),
            DiagnosisMethod::Unknown => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    pub class_weights: Vec<f64>,
    pub k: f64,
    pub diagnosis_multipliers: DiagnosisMultipliers,
    pub benign_classes: BTreeSet<usize>,
    /// Use a multiplier of 1 for benign samples without a method tag
    /// instead of failing.
    pub allow_unknown: bool,
}

impl WeightTable {
    pub fn new(
        counts: &ClassCounts,
        k: f64,
        diagnosis_multipliers: DiagnosisMultipliers,
        benign_classes: BTreeSet<usize>,
        allow_unknown: bool,
    ) -> Result<Self> {
        diagnosis_multipliers.validate()?;
        Ok(Self {
            class_weights: class_weights(counts, k)?,
            k,
            diagnosis_multipliers,
            benign_classes,
            allow_unknown,
        })
    }
}

/// Class weight of the sample, scaled by its diagnosis multiplier when the
/// class is benign.
pub fn diagnosis_weight(sample: &SampleRecord, table: &WeightTable) -> Result<f64> {
    let base = *table
        .class_weights
        .get(sample.label)
        .ok_or_else(|| Error::Invalid(format!("label {} has no class weight", sample.label)))?;
    if !table.benign_classes.contains(&sample.label) {
        return Ok(base);
    }
    match table.diagnosis_multipliers.get(sample.diagnosis_method) {
        Some(m) => Ok(base * m),
        None if table.allow_unknown => Ok(base),
        None => Err(Error::Invalid(format!(
            "benign sample {} has no diagnosis method",
            sample.image_ref
        ))),
    }
}

/// Index pool in which every class appears as often as the largest one:
/// the original indices in order, followed by each smaller class's indices
/// cycled until it reaches the majority count.
pub fn oversample_pool(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Invalid(format!("label {l} >= {n_classes}")))?
            .push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Invalid(format!("class {c} has no examples to oversample")));
    }
    let max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut pool: Vec<usize> = (0..labels.len()).collect();
    for idx in &by_class {
        pool.extend(idx.iter().cycle().take(max - idx.len()));
    }
    Ok(pool)
}

/// Endless stream of batches holding exactly `batch_size / C` indices of
/// every class. Each class walks through its own reshuffled permutation.
pub struct BalancedBatches<R> {
    classes: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_class: usize,
    rng: R,
}

impl<R: Rng> BalancedBatches<R> {
    pub fn new(labels: &[usize], n_classes: usize, batch_size: usize, mut rng: R) -> Result<Self> {
        if n_classes == 0 || batch_size == 0 || batch_size % n_classes != 0 {
            return Err(Error::Config(format!(
                "balanced batches need batch_size divisible by the {n_classes} classes, got {batch_size}"
            )));
        }
        let mut classes = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            classes
                .get_mut(l)
                .ok_or_else(|| Error::Invalid(format!("label {l} >= {n_classes}")))?
                .push(i);
        }
        if let Some(c) = classes.iter().position(Vec::is_empty) {
            return Err(Error::Invalid(format!(
                "class {c} has no examples for balanced batches"
            )));
        }
        for c in &mut classes {
            c.shuffle(&mut rng);
        }
        Ok(Self {
            cursors: vec![0; n_classes],
            classes,
            per_class: batch_size / n_classes,
            rng,
        })
    }
}

impl<R: Rng> Iterator for BalancedBatches<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.per_class * self.classes.len());
        for (perm, cursor) in self.classes.iter_mut().zip(&mut self.cursors) {
            for _ in 0..self.per_class {
                if *cursor == perm.len() {
                    perm.shuffle(&mut self.rng);
                    *cursor = 0;
                }
                batch.push(perm[*cursor]);
                *cursor += 1;
            }
        }
        Some(batch)
    }
}

/// Training-time imbalance strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Balancing {
    None,
    Oversample,
    BalancedBatches,
    LossWeighting,
    /// Loss weighting with the diagnosis multiplier applied on top.
    DiagnosisWeighting,
}

impl Balancing {
    pub fn uses_loss_weights(self) -> bool {
        matches!(self, Balancing::LossWeighting | Balancing::DiagnosisWeighting)
    }
}

impl fmt::Display for Balancing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Balancing::None => "none",
            Balancing::Oversample => "oversample",
            Balancing::BalancedBatches => "balanced_batches",
            Balancing::LossWeighting => "loss_weighting",
            Balancing::DiagnosisWeighting => "diagnosis_weighting",
        })
    }
}

impl FromStr for Balancing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Balancing::None),
            "oversample" => Ok(Balancing::Oversample),
            "balanced_batches" => Ok(Balancing::BalancedBatches),
            "loss_weighting" => Ok(Balancing::LossWeighting),
            "diagnosis_weighting" => Ok(Balancing::DiagnosisWeighting),
            _ => Err(Error::Config(format!(
                "unknown balancing {s:?} (expected none, oversample, balanced_batches, loss_weighting or diagnosis_weighting)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRef;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HAM: [usize; 7] = [1113, 6705, 514, 327, 1099, 115, 142];

    fn sample(label: usize, method: DiagnosisMethod) -> SampleRecord {
        SampleRecord {
            image_ref: ImageRef::Memory(0),
            label,
            diagnosis_method: method,
        }
    }

    fn ham_table(allow_unknown: bool) -> WeightTable {
        WeightTable::new(
            &ClassCounts::new(HAM.to_vec()).unwrap(),
            1.0,
            DiagnosisMultipliers::default(),
            [1, 4, 5, 6].into_iter().collect(),
            allow_unknown,
        )
        .unwrap()
    }

    #[test]
    fn ham_weights_at_k1() {
        let w = class_weights(&ClassCounts::new(HAM.to_vec()).unwrap(), 1.0).unwrap();
        assert!((w[1] - 1.49366).abs() < 1e-5);
        assert!((w[5] - 87.087).abs() < 1e-3);
    }

    #[test]
    fn k_zero_and_balanced_counts() {
        let w = class_weights(&ClassCounts::new(HAM.to_vec()).unwrap(), 0.0).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        let w = class_weights(&ClassCounts::new(vec![5; 4]).unwrap(), 1.5).unwrap();
        assert!(w.iter().all(|&v| (v - 4f64.powf(1.5)).abs() < 1e-12));
    }

    #[test]
    fn invalid_counts_and_exponent() {
        assert!(ClassCounts::new(vec![3, 0, 2]).is_err());
        assert!(ClassCounts::from_labels(&[0, 0, 2], 3).is_err());
        let c = ClassCounts::new(vec![1, 2]).unwrap();
        assert!(class_weights(&c, -0.5).is_err());
        assert!(class_weights(&c, f64::NAN).is_err());
    }

    #[test]
    fn diagnosis_weight_rules() {
        let t = ham_table(false);
        let mel = sample(0, DiagnosisMethod::Histopathology);
        assert_eq!(diagnosis_weight(&mel, &t).unwrap(), t.class_weights[0]);
        let nv_histo = sample(1, DiagnosisMethod::Histopathology);
        assert_eq!(diagnosis_weight(&nv_histo, &t).unwrap(), t.class_weights[1] * 1.6);
        let nv_cons = sample(1, DiagnosisMethod::ExpertConsensus);
        assert_eq!(diagnosis_weight(&nv_cons, &t).unwrap(), t.class_weights[1]);
        // AKIEC is not benign by default
        let akiec = sample(3, DiagnosisMethod::ConfocalMicroscopy);
        assert_eq!(diagnosis_weight(&akiec, &t).unwrap(), t.class_weights[3]);
    }

    #[test]
    fn unknown_method_policy() {
        let nv = sample(1, DiagnosisMethod::Unknown);
        assert!(diagnosis_weight(&nv, &ham_table(false)).is_err());
        let t = ham_table(true);
        assert_eq!(diagnosis_weight(&nv, &t).unwrap(), t.class_weights[1]);
        // malignant samples never need a tag
        assert!(diagnosis_weight(&sample(0, DiagnosisMethod::Unknown), &ham_table(false)).is_ok());
    }

    #[test]
    fn multipliers_must_be_monotone_and_positive() {
        assert!(DiagnosisMultipliers::from_slice(&[1.0, 1.2, 1.1, 1.6]).is_err());
        assert!(DiagnosisMultipliers::from_slice(&[0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(DiagnosisMultipliers::from_slice(&[1.0, 1.0, 1.0]).is_err());
        assert!(DiagnosisMultipliers::from_slice(&[1.0, 1.0, 2.0, 2.0]).is_ok());
    }

    #[test]
    fn oversample_cycles_minority() {
        let pool = oversample_pool(&[0, 0, 1, 0], 2).unwrap();
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.iter().filter(|&&i| i == 2).count(), 3);
        assert_eq!(oversample_pool(&[1, 0, 1, 0], 2).unwrap(), vec![0, 1, 2, 3]);
        assert!(oversample_pool(&[0, 0], 2).is_err());
    }

    #[test]
    fn balanced_batches_examples() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 1 } else { i % 7 }).collect();
        let batches = BalancedBatches::new(&labels, 7, 28, ChaCha8Rng::seed_from_u64(1)).unwrap();
        for b in batches.take(50) {
            let mut per = [0; 7];
            for i in b {
                per[labels[i]] += 1;
            }
            assert_eq!(per, [4; 7]);
        }
        assert!(BalancedBatches::new(&labels, 7, 30, ChaCha8Rng::seed_from_u64(1)).is_err());
        let a: Vec<_> = BalancedBatches::new(&labels, 7, 14, ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .take(20)
            .collect();
        let b: Vec<_> = BalancedBatches::new(&labels, 7, 14, ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .take(20)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn balancing_names_round_trip() {
        for b in [
            Balancing::None,
            Balancing::Oversample,
            Balancing::BalancedBatches,
            Balancing::LossWeighting,
            Balancing::DiagnosisWeighting,
        ] {
            assert_eq!(b.to_string().parse::<Balancing>().unwrap(), b);
        }
        assert!("focal".parse::<Balancing>().is_err());
    }
}
