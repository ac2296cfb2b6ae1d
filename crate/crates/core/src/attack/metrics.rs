//! Classification scores.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
    Weighted,
}

/// `confusion[truth][predicted]`.
pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// Per-class F1; a zero denominator scores 0.
pub fn per_class_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let m = confusion(predictions, labels, classes);
    (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let fp: usize = (0..classes).filter(|&t| t != c).map(|t| m[t][c]).sum();
            let fn_: usize = (0..classes).filter(|&p| p != c).map(|p| m[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

pub fn f1_score(predictions: &[usize], labels: &[usize], classes: usize, average: F1Average) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    if labels.is_empty() {
        return 0.0;
    }
    let f1 = per_class_f1(predictions, labels, classes);
    match average {
        F1Average::Macro => f1.iter().sum::<f64>() / classes as f64,
        // single-label micro F1 is accuracy
        F1Average::Micro => {
            predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
        }
        F1Average::Weighted => {
            let mut support = vec![0usize; classes];
            labels.iter().for_each(|&y| support[y] += 1);
            f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / labels.len() as f64
        }
    }
}

pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    f1_score(predictions, labels, classes, F1Average::Macro)
}
