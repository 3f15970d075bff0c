//! Class-balanced evaluation metrics derived from a confusion matrix.
//!
//! Every metric is a mean over classes with equal class weight, so the
//! result does not depend on how many examples each class contributes.

use crate::error::{Error, Result};

/// `counts[t][p]`: samples with true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Samples of class `c` predicted as something else.
    pub fn false_negatives(&self, c: usize) -> u64 {
        self.support(c) - self.get(c, c)
    }

    /// Samples of other classes predicted as `c`.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - self.get(c, c)
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.support(c) - self.false_positives(c)
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Invalid(
                "metrics of an empty confusion matrix are undefined".into(),
            ))
        } else {
            Ok(())
        }
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in preds.iter().zip(labels).enumerate() {
        if p >= classes || t >= classes {
            return Err(Error::Invalid(format!(
                "sample {i}: label {t} / prediction {p} outside {classes} classes"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

/// Per-class recall `TP/(TP+FN)`, `None` for classes without samples.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|c| {
            let support = cm.support(c);
            (support > 0).then(|| cm.true_positives(c) as f64 / support as f64)
        })
        .collect()
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Invalid("no class has a defined value".into()));
    }
    Ok(sum / n as f64)
}

/// Mean per-class recall over classes that have at least one sample.
pub fn mc_sensitivity(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    mean_defined(per_class_recall(cm).into_iter())
}

/// Mean one-vs-rest true-negative rate `TN/(TN+FP)`.
pub fn mc_specificity(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    mean_defined((0..cm.classes()).map(|c| {
        let (tn, fp) = (cm.true_negatives(c), cm.false_positives(c));
        (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64)
    }))
}

/// Macro-averaged F1. A class with zero precision and recall scores 0; a
/// class that is neither present nor predicted is left out.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.ensure_nonempty()?;
    mean_defined((0..cm.classes()).map(|c| {
        let (tp, fp, fn_) = (cm.true_positives(c), cm.false_positives(c), cm.false_negatives(c));
        if tp + fp + fn_ == 0 {
            return None;
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        Some(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        })
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub mc_sensitivity: f64,
    pub mc_specificity: f64,
    pub macro_f1: f64,
    pub recall: Vec<Option<f64>>,
}

impl MetricSummary {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            mc_sensitivity: mc_sensitivity(cm)?,
            mc_specificity: mc_specificity(cm)?,
            macro_f1: macro_f1(cm)?,
            recall: per_class_recall(cm),
        })
    }

    /// CSV header for `prefix,...` metric rows with one recall column per
    /// class name.
    pub fn csv_header(prefix: &[&str], class_names: &[String]) -> String {
        let mut cols: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
        cols.extend(["mc_sensitivity", "mc_specificity", "macro_f1"].map(String::from));
        cols.extend(class_names.iter().map(|n| format!("recall_{n}")));
        cols.join(",")
    }

    /// Metric columns of one CSV row; undefined recalls are left empty.
    pub fn csv_fields(&self) -> String {
        let mut cols = vec![
            format!("{:.6}", self.mc_sensitivity),
            format!("{:.6}", self.mc_specificity),
            format!("{:.6}", self.macro_f1),
        ];
        cols.extend(
            self.recall
                .iter()
                .map(|r| r.map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        cols.join(",")
    }
}
