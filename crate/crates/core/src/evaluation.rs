//! Confusion matrices and F-measure reports.
//!
//! The last class index is treated as "unknown"; macro averages are
//! reported both without and with it.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("predictions ({predictions}) and truths ({truths}) differ in length")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("at least two classes are required")]
    TooFewClasses,
}

/// `counts[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn add(&mut self, truth: usize, prediction: usize) -> Result<(), EvalError> {
        for label in [truth, prediction] {
            if label >= self.classes {
                return Err(EvalError::LabelOutOfRange { label, classes: self.classes });
            }
        }
        self.counts[truth][prediction] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn col_sum(&self, prediction: usize) -> u64 {
        self.counts.iter().map(|r| r[prediction]).sum()
    }

    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.counts[k][k], self.col_sum(k))
    }

    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.counts[k][k], self.row_sum(k))
    }

    pub fn accuracy(&self) -> f64 {
        ratio((0..self.classes).map(|k| self.counts[k][k]).sum(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(predictions: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if classes < 2 {
        return Err(EvalError::TooFewClasses);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        m.add(t, p)?;
    }
    Ok(m)
}

/// Harmonic mean of precision and recall in percent; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let den = precision + recall;
    if den == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / den * 100.0
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassScore {
    pub class: usize,
    pub support: u64,
    /// Percent.
    pub precision: f64,
    /// Percent.
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassScore>,
    /// Mean F over every class except the last (unknown).
    pub macro_f: f64,
    pub macro_f_with_unknown: f64,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let per_class: Vec<ClassScore> = (0..confusion.classes)
            .map(|k| {
                let p = confusion.precision(k);
                let r = confusion.recall(k);
                ClassScore { class: k, support: confusion.row_sum(k), precision: p * 100.0, recall: r * 100.0, f_measure: f_measure(p, r) }
            })
            .collect();
        let named = &per_class[..per_class.len() - 1];
        let macro_f = named.iter().map(|s| s.f_measure).sum::<f64>() / named.len() as f64;
        let macro_f_with_unknown = per_class.iter().map(|s| s.f_measure).sum::<f64>() / per_class.len() as f64;
        let accuracy = confusion.accuracy() * 100.0;
        Self { confusion, per_class, macro_f, macro_f_with_unknown, accuracy }
    }
}

pub fn evaluate(predictions: &[usize], truths: &[usize], classes: usize) -> Result<EvalReport, EvalError> {
    confusion_matrix(predictions, truths, classes).map(EvalReport::from_confusion)
}

/// Fraction of predictions equal to the most frequent predicted class.
pub fn dominant_share(predictions: &[usize], classes: usize) -> (usize, f64) {
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        if p < classes {
            counts[p] += 1;
        }
    }
    let mut best = 0;
    for k in 1..classes {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    (best, ratio(counts[best] as u64, predictions.len() as u64))
}
