use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to their labels.
pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-class F1 scores and their support-weighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub weighted: f64,
}

pub fn f1_scores(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Scores> {
    let confusion = confusion_matrix(preds, labels, num_classes)?;
    Ok(f1_from_confusion(&confusion))
}

/// `confusion[y][p]` counts samples of class `y` predicted as `p`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Data(format!("class index {} outside {num_classes} classes", p.max(y))));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

fn f1_from_confusion(m: &[Vec<usize>]) -> F1Scores {
    let c = m.len();
    let total: usize = m.iter().flatten().sum();
    let mut per_class = Vec::with_capacity(c);
    let mut weighted = 0.0;
    for k in 0..c {
        let tp = m[k][k] as f64;
        let support: usize = m[k].iter().sum();
        let predicted: usize = m.iter().map(|row| row[k]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += f1 * support as f64;
        per_class.push(f1);
    }
    F1Scores {
        per_class,
        weighted: if total > 0 { weighted / total as f64 } else { 0.0 },
    }
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub support: Vec<usize>,
    /// Recall of each class (correct / support), 0 for an absent class.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub weighted_accuracy: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn compute(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(preds, labels, num_classes)?;
        let f1 = f1_from_confusion(&confusion);
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class_accuracy = (0..num_classes)
            .map(|k| if support[k] > 0 { confusion[k][k] as f64 / support[k] as f64 } else { 0.0 })
            .collect();
        Ok(Self {
            num_samples: labels.len(),
            weighted_accuracy: weighted_accuracy(preds, labels)?,
            weighted_f1: f1.weighted,
            per_class_f1: f1.per_class,
            per_class_accuracy,
            support,
            confusion,
        })
    }
}
