use crate::error::{FedbmError, Result};

/// Square confusion matrix, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "{} truths vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(FedbmError::InvalidArgument("empty evaluation set".into()));
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(FedbmError::InvalidLabel {
                    label: t.max(p),
                    classes,
                });
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        correct as f64 / self.total() as f64
    }

    /// Per-class F1; `None` for classes absent from both truth and predictions.
    pub fn f1_scores(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let actual: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let predicted: u64 = (0..self.classes).map(|t| self.get(t, k)).sum();
                if actual == 0 && predicted == 0 {
                    None
                } else {
                    Some(2.0 * tp / (actual + predicted) as f64)
                }
            })
            .collect()
    }

    /// Unweighted mean of the defined per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = self.f1_scores().into_iter().flatten().collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
