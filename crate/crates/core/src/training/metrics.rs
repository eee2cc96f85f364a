use serde::Serialize;

use crate::config::N_CLASSES;

/// Scores of one evaluation. Rows of `confusion` are true stages, columns
/// predicted stages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; N_CLASSES],
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    /// Classes absent from both truth and prediction; their F1 counts as 0.
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], pred: &[usize]) -> Metrics {
        let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        Metrics::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[u64; N_CLASSES]; N_CLASSES]) -> Metrics {
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
        let mut per_class_f1 = [0.0; N_CLASSES];
        let mut absent_classes = Vec::new();
        for c in 0..N_CLASSES {
            let tp = confusion[c][c] as f64;
            let actual: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..N_CLASSES).map(|r| confusion[r][c]).sum();
            if actual == 0 && predicted == 0 {
                absent_classes.push(c);
                continue;
            }
            per_class_f1[c] = 2.0 * tp / (actual + predicted) as f64;
        }
        Metrics {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            macro_f1: per_class_f1.iter().sum::<f64>() / N_CLASSES as f64,
            per_class_f1,
            confusion,
            absent_classes,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// True when the best value of `history` has not been strictly improved on
/// for the last `patience` events.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for &v in history {
        if v > best {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience.max(1)
}
