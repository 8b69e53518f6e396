//! Confusion matrices and balanced accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K × K` counts, rows indexed by true class, columns by prediction.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        for c in [y, p] {
            if c >= classes {
                return Err(Error::LabelOutOfRange { label: c, classes });
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn per_class_recall(confusion: &[Vec<usize>]) -> Result<Vec<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let support: usize = row.iter().sum();
            if support == 0 {
                return Err(Error::ZeroSupport(k));
            }
            Ok(row[k] as f64 / support as f64)
        })
        .collect()
}

/// Mean of per-class recalls; a class without support is an error.
pub fn balanced_accuracy(confusion: &[Vec<usize>]) -> Result<f64> {
    let r = per_class_recall(confusion)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new(labels: &[usize], predictions: &[usize], classes: usize, loss: f64) -> Result<Self> {
        let confusion = confusion_matrix(labels, predictions, classes)?;
        let per_class_recall = per_class_recall(&confusion)?;
        let balanced_accuracy = per_class_recall.iter().sum::<f64>() / classes as f64;
        let correct = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
        Ok(EvalReport {
            loss,
            accuracy: correct as f64 / labels.len().max(1) as f64,
            balanced_accuracy,
            per_class_recall,
            confusion,
        })
    }
}
