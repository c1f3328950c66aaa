//! Evaluation metrics and report types.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::head::Task;

/// How the two angular errors of one example combine into one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeConvention {
    /// `(|Δθ| + |Δφ|) / 2`
    #[default]
    Mean,
    /// `|Δθ| + |Δφ|`
    Sum,
}

/// Mean absolute angular error in degrees. Rows are `[θ, φ]`.
pub fn angular_mae(pred: &[[f64; 2]], truth: &[[f64; 2]], convention: MaeConvention) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return f64::NAN;
    }
    let k = match convention {
        MaeConvention::Mean => 0.5,
        MaeConvention::Sum => 1.0,
    };
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| k * ((p[0] - t[0]).abs() + (p[1] - t[1]).abs()))
        .sum();
    total / pred.len() as f64
}

/// Mean signed error of the predictions at one true direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleError {
    pub theta: f64,
    pub phi: f64,
    pub mean_dtheta: f64,
    pub mean_dphi: f64,
    pub count: usize,
}

/// Groups examples by true `(θ, φ)` (rounded to millidegrees).
pub fn per_angle_errors(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Vec<AngleError> {
    let key = |v: f64| (v * 1000.0).round() as i64;
    let mut acc: BTreeMap<(i64, i64), (f64, f64, usize)> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth) {
        let e = acc.entry((key(t[0]), key(t[1]))).or_insert((0.0, 0.0, 0));
        e.0 += p[0] - t[0];
        e.1 += p[1] - t[1];
        e.2 += 1;
    }
    acc.into_iter()
        .map(|((th, ph), (dt, dp, n))| AngleError {
            theta: th as f64 / 1000.0,
            phi: ph as f64 / 1000.0,
            mean_dtheta: dt / n as f64,
            mean_dphi: dp / n as f64,
            count: n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    /// Macro average over classes seen in truth or predictions.
    pub precision: f64,
    pub recall: f64,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<usize>>,
}

/// Classes with no predictions contribute zero precision; classes absent
/// from the truth but predicted contribute zero recall.
pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> ClassMetrics {
    assert_eq!(pred.len(), truth.len());
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = if pred.is_empty() {
        f64::NAN
    } else {
        correct as f64 / pred.len() as f64
    };
    let (mut prec, mut rec, mut seen) = (0.0, 0.0, 0usize);
    for c in 0..n_classes {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        seen += 1;
        let tp = confusion[c][c] as f64;
        if predicted > 0 {
            prec += tp / predicted as f64;
        }
        if support > 0 {
            rec += tp / support as f64;
        }
    }
    let seen = seen.max(1) as f64;
    ClassMetrics {
        accuracy,
        precision: prec / seen,
        recall: rec / seen,
        confusion,
    }
}

/// Result of evaluating one trained model on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_examples: usize,
    pub label_ratio: f64,
    /// AoA error under `mae_convention`.
    #[serde(default)]
    pub mae_deg: Option<f64>,
    #[serde(default)]
    pub mae_convention: MaeConvention,
    /// AoA error under the other convention, when requested.
    #[serde(default)]
    pub mae_alt_deg: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub precision: Option<f64>,
    #[serde(default)]
    pub recall: Option<f64>,
    #[serde(default)]
    pub confusion: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub per_angle_errors: Vec<AngleError>,
    /// SHA-256 of the configuration that produced this report.
    pub fingerprint: String,
}

impl EvalReport {
    /// The headline number: MAE for AoA, accuracy for AMC.
    pub fn primary(&self) -> f64 {
        match self.task {
            Task::Aoa => self.mae_deg.unwrap_or(f64::NAN),
            Task::Amc => self.accuracy.unwrap_or(f64::NAN),
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Relative improvement of `ours` over `base`, in percent. Lower is better
/// for MAE, higher for accuracy.
pub fn improvement_pct(task: Task, base: f64, ours: f64) -> f64 {
    match task {
        Task::Aoa => (base - ours) / base * 100.0,
        Task::Amc => (ours - base) / base * 100.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_conventions() {
        let p = [[1.0, -2.0], [0.0, 0.0]];
        let t = [[0.0, 0.0], [0.0, 4.0]];
        assert_eq!(angular_mae(&p, &t, MaeConvention::Mean), (1.5 + 2.0) / 2.0);
        assert_eq!(angular_mae(&p, &t, MaeConvention::Sum), (3.0 + 4.0) / 2.0);
    }

    #[test]
    fn constant_predictor_precision() {
        let truth: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let pred = vec![2usize; 60];
        let m = classification_metrics(&pred, &truth, 6);
        assert!((m.accuracy - 1.0 / 6.0).abs() < 1e-12);
        assert!((m.precision - (1.0 / 6.0) / 6.0).abs() < 1e-12);
        assert!((m.recall - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier() {
        let truth = vec![0, 1, 2, 3, 4, 5, 0];
        let m = classification_metrics(&truth, &truth, 6);
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn per_angle_grouping() {
        let t = [[10.0, 20.0], [10.0, 20.0], [-5.0, 0.0]];
        let p = [[11.0, 18.0], [13.0, 20.0], [-5.0, 1.0]];
        let e = per_angle_errors(&p, &t);
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].theta, 10.0);
        assert_eq!((e[1].mean_dtheta, e[1].mean_dphi, e[1].count), (2.0, -1.0, 2));
    }

    #[test]
    fn improvement_signs() {
        assert!((improvement_pct(Task::Aoa, 10.0, 8.0) - 20.0).abs() < 1e-12);
        assert!((improvement_pct(Task::Amc, 0.5, 0.6) - 20.0).abs() < 1e-9);
    }
}
