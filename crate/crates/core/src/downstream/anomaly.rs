//! Thresholded anomaly scores with delay-adjusted segment scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiples of the train-score standard deviation above the mean.
pub const THRESHOLD_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// False when nothing was predicted anomalous (precision reported as 0).
    pub precision_defined: bool,
    /// False when the labels contain no anomaly (recall reported as 0).
    pub recall_defined: bool,
    pub threshold: Option<f64>,
}

/// A true segment counts as fully detected when any prediction falls within
/// `delay` steps of its start; otherwise the whole segment is missed.
/// Predictions outside true segments are kept.
pub fn delay_adjust(pred: &[bool], labels: &[bool], delay: usize) -> Vec<bool> {
    let mut out = pred.to_vec();
    let n = labels.len();
    let mut t = 0;
    while t < n {
        if !labels[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && labels[t] {
            t += 1;
        }
        let hit = (start..t.min(start + delay + 1)).any(|i| pred[i]);
        out[start..t].iter_mut().for_each(|p| *p = hit);
    }
    out
}

/// Segment-adjusted precision, recall and F1 of binary predictions.
pub fn eval_anomaly(pred: &[bool], labels: &[bool], delay: usize) -> Result<AnomalyMetrics> {
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", pred.len(), labels.len())));
    }
    let adj = delay_adjust(pred, labels, delay);
    let tp = adj.iter().zip(labels).filter(|(p, l)| **p && **l).count() as f64;
    let predicted = adj.iter().filter(|p| **p).count() as f64;
    let actual = labels.iter().filter(|l| **l).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(AnomalyMetrics {
        f1,
        precision,
        recall,
        precision_defined: predicted > 0.0,
        recall_defined: actual > 0.0,
        threshold: None,
    })
}

/// Threshold `scores` at `mean + 3 std` of `train_scores`, then score.
pub fn eval_anomaly_scores(train_scores: &[f64], scores: &[f64], labels: &[bool], delay: usize) -> Result<AnomalyMetrics> {
    if train_scores.is_empty() {
        return Err(Error::Data("no train scores to calibrate the threshold".into()));
    }
    let n = train_scores.len() as f64;
    let mean = train_scores.iter().sum::<f64>() / n;
    let std = (train_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + THRESHOLD_SIGMAS * std;
    let pred: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let mut m = eval_anomaly(&pred, labels, delay)?;
    m.threshold = Some(threshold);
    Ok(m)
}
