//! Downstream heads on frozen embeddings and their metrics.

mod anomaly;
mod classification;
mod forecasting;

pub use anomaly::{delay_adjust, eval_anomaly, eval_anomaly_scores, AnomalyMetrics};
pub use classification::{eval_classification, ClassificationMetrics, LogisticConfig, LogisticRegression};
pub use forecasting::{eval_forecasting, fit_ridge, ForecastMetrics, RidgeModel, LAMBDA_GRID};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Elementwise maximum over the time axis: `B x T x d -> B x d`.
pub fn instance_embed(h: &Tensor) -> Result<Tensor> {
    if h.rank() != 3 || h.dim(1) == 0 {
        return Err(Error::Dimension(format!("instance_embed expects B x T x d with T >= 1, got {:?}", h.shape())));
    }
    let (b, t, d) = (h.dim(0), h.dim(1), h.dim(2));
    let x = h.data();
    let mut out = vec![f64::NEG_INFINITY; b * d];
    for bi in 0..b {
        for ti in 0..t {
            let row = &x[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                *o = o.max(*v);
            }
        }
    }
    Tensor::new(vec![b, d], out)
}

/// One metric value in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

/// Column mean and standard deviation (floored) of an `n x d` row-major matrix.
pub(crate) fn column_stats(x: &[f64], d: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len().checked_div(d).unwrap_or(0);
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n.max(1) as f64).sqrt().max(floor)).collect();
    (mean, std)
}
