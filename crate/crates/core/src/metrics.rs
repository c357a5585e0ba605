//! Overall and balanced accuracy with a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{LeafError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Unweighted mean of per-class recall over classes present in the
    /// ground truth.
    pub balanced_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<Self> {
        if actual.is_empty() {
            return Err(LeafError::param("cannot evaluate an empty test set"));
        }
        if predicted.len() != actual.len() {
            return Err(LeafError::contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= num_classes || a >= num_classes {
                return Err(LeafError::param(format!(
                    "class index out of range for {num_classes} classes"
                )));
            }
            confusion[a][p] += 1;
        }

        let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
        let overall_accuracy = correct as f64 / actual.len() as f64;

        let recalls: Vec<f64> = confusion
            .iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let support: u64 = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        let balanced_accuracy = recalls.iter().sum::<f64>() / recalls.len() as f64;

        Ok(Self {
            overall_accuracy,
            balanced_accuracy,
            confusion,
        })
    }

    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: u64 = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = Metrics::from_predictions(&y, &y, 3).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.balanced_accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(v, 0);
                }
            }
        }
        assert_eq!(m.confusion[2][2], 2);
    }

    #[test]
    fn constant_predictor_on_imbalanced_data() {
        let mut actual = vec![0; 90];
        actual.extend(vec![1; 10]);
        let predicted = vec![0; 100];
        let m = Metrics::from_predictions(&predicted, &actual, 2).unwrap();
        assert!((m.overall_accuracy - 0.9).abs() < 1e-15);
        assert!((m.balanced_accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn balanced_equals_row_normalized_diagonal() {
        let actual = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let predicted = [0, 1, 0, 1, 2, 2, 2, 0, 2, 1];
        let m = Metrics::from_predictions(&predicted, &actual, 4).unwrap();
        let expected = (2.0 / 3.0 + 1.0 / 2.0 + 3.0 / 4.0 + 0.0) / 4.0;
        assert!((m.balanced_accuracy - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(Metrics::from_predictions(&[], &[], 3).is_err());
    }
}
