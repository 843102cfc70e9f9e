//! Classification metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
}

/// Accuracy, macro averages and the confusion matrix (`confusion[true][pred]`).
///
/// Per-class precision or recall with an empty denominator counts as 0 in
/// the macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if let Some(&class) = [p, t].iter().find(|&&c| c >= classes) {
            return Err(MetricsError::Class { class, classes });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Metrics, MetricsError> {
    let confusion = confusion_matrix(predictions, labels, classes)?;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let mut precision = 0.0;
    let mut recall = 0.0;
    for c in 0..classes {
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        precision += ratio(confusion[c][c], predicted);
        recall += ratio(confusion[c][c], actual);
    }
    let k = classes.max(1) as f64;
    Ok(Metrics {
        accuracy: ratio(correct, labels.len() as u64),
        macro_precision: precision / k,
        macro_recall: recall / k,
        confusion,
    })
}
