//! Classification metrics: confusion matrix, per-class recall, and
//! unweighted accuracy (the mean of per-class recalls).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major confusion counts: `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidData(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels.iter()) {
            if p >= num_classes || l >= num_classes {
                return Err(Error::InvalidData(format!(
                    "class index out of range: pred {p}, label {l}, classes {num_classes}"
                )));
            }
            counts[l][p] += 1;
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }

    /// Per-class support (row sums).
    pub fn support(&self) -> Vec<usize> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn per_class_recall(&self) -> Result<Vec<f64>> {
        let support = self.support();
        if let Some(c) = support.iter().position(|&s| s == 0) {
            return Err(Error::InvalidData(format!(
                "class {c} has zero support; unweighted accuracy is undefined"
            )));
        }
        Ok(self
            .counts
            .iter()
            .zip(support.iter())
            .enumerate()
            .map(|(c, (row, &s))| row[c] as f64 / s as f64)
            .collect())
    }
}

/// Mean of per-class recalls. Every class present in `labels` must have
/// support at least one.
pub fn unweighted_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let cm = ConfusionMatrix::from_predictions(predictions, labels, num_classes)?;
    let recalls = cm.per_class_recall()?;
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Evaluation summary for one trained model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_recall: Vec<f64>,
    pub unweighted_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub param_count: usize,
}

impl MetricsReport {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        param_count: usize,
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(predictions, labels, num_classes)?;
        let per_class_recall = confusion.per_class_recall()?;
        let ua = per_class_recall.iter().sum::<f64>() / per_class_recall.len() as f64;
        Ok(MetricsReport {
            per_class_recall,
            unweighted_accuracy: ua,
            confusion,
            param_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_correct_is_one() {
        let labels = [0, 1, 2, 3, 0, 1];
        assert_eq!(unweighted_accuracy(&labels, &labels, 4).unwrap(), 1.0);
    }

    #[test]
    fn ua_is_mean_of_recalls_not_overall_accuracy() {
        // class 0: 10/10 right; class 1: 0/1 right -> UA 0.5, not 10/11
        let mut preds = vec![0usize; 10];
        let mut labels = vec![0usize; 10];
        preds.push(0);
        labels.push(1);
        let ua = unweighted_accuracy(&preds, &labels, 2).unwrap();
        assert!((ua - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_support_class_is_an_error() {
        let preds = [0, 1];
        let labels = [0, 1];
        assert!(unweighted_accuracy(&preds, &labels, 3).is_err());
    }

    #[test]
    fn uniform_random_predictions_approach_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 40_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let ua = unweighted_accuracy(&preds, &labels, 4).unwrap();
        assert!((ua - 0.25).abs() < 0.02, "ua {ua}");
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let preds = [0, 1, 1, 2, 0, 3];
        let labels = [0, 1, 2, 2, 3, 3];
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 4).unwrap();
        assert_eq!(cm.support(), vec![1, 1, 2, 2]);
        let report = MetricsReport::from_predictions(&preds, &labels, 4, 0).unwrap();
        let mean = report.per_class_recall.iter().sum::<f64>() / 4.0;
        assert!((report.unweighted_accuracy - mean).abs() < 1e-12);
    }

    #[test]
    fn ua_matches_hand_oracle_on_random_configurations() {
        // independent oracle: count per-class hits/support directly
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let classes = rng.random_range(2..6usize);
            let n = rng.random_range(classes..80usize);
            let mut labels: Vec<usize> = (0..classes).collect(); // every class present
            for _ in classes..n {
                labels.push(rng.random_range(0..classes));
            }
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

            let mut hits = vec![0usize; classes];
            let mut support = vec![0usize; classes];
            for (&p, &l) in preds.iter().zip(labels.iter()) {
                support[l] += 1;
                if p == l {
                    hits[l] += 1;
                }
            }
            let oracle: f64 = (0..classes)
                .map(|c| hits[c] as f64 / support[c] as f64)
                .sum::<f64>()
                / classes as f64;

            let ua = unweighted_accuracy(&preds, &labels, classes).unwrap();
            assert_eq!(ua, oracle);
        }
    }
}
