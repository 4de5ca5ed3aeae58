//! Ridge regression from embeddings to future values.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Regularization strengths tried on the validation split.
pub const LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Regularization strength that won on validation.
    pub lambda: f64,
}

/// Linear map with intercept, fitted on centered data.
#[derive(Clone, Debug)]
pub struct RidgeModel {
    /// `d x m`.
    pub weights: DMatrix<f64>,
    /// Length `m`.
    pub intercept: Vec<f64>,
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.dim(0), t.dim(1), t.data()))
}

/// `W = (Xc^T Xc + lambda I)^-1 Xc^T Yc`, intercept `mean(Y) - mean(X) W`.
pub fn fit_ridge(x: &Tensor, y: &Tensor, lambda: f64) -> Result<RidgeModel> {
    let (xm, ym) = (to_matrix(x)?, to_matrix(y)?);
    if xm.nrows() != ym.nrows() || xm.nrows() == 0 {
        return Err(Error::Dimension(format!("ridge: {} inputs vs {} targets", xm.nrows(), ym.nrows())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let xmean = xm.row_mean();
    let ymean = ym.row_mean();
    let mut xc = xm.clone();
    for mut row in xc.row_iter_mut() {
        row -= &xmean;
    }
    let mut yc = ym.clone();
    for mut row in yc.row_iter_mut() {
        row -= &ymean;
    }
    let d = xm.ncols();
    let gram = xc.transpose() * &xc + DMatrix::<f64>::identity(d, d) * lambda;
    let rhs = xc.transpose() * &yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("ridge system is singular at lambda {lambda}")))?;
    let weights = chol.solve(&rhs);
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ridge produced non-finite weights".into()));
    }
    let intercept = (ymean - xmean * &weights).iter().copied().collect();
    Ok(RidgeModel { weights, intercept })
}

impl RidgeModel {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let xm = to_matrix(x)?;
        if xm.ncols() != self.weights.nrows() {
            return Err(Error::Dimension(format!("ridge expects {} features, got {}", self.weights.nrows(), xm.ncols())));
        }
        let mut out = xm * &self.weights;
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        let (n, m) = (out.nrows(), out.ncols());
        let data = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| out[(i, j)]).collect();
        Tensor::new(vec![n, m], data)
    }
}

fn errors(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!("prediction {:?} vs target {:?}", pred.shape(), truth.shape())));
    }
    let n = truth.len().max(1) as f64;
    let mse = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mae = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok((mse, mae))
}

/// Fit on `train` for each lambda in `grid`, keep the one with the lowest
/// validation MSE and report its errors on `eval`.
pub fn eval_forecasting(
    train: (&Tensor, &Tensor),
    val: (&Tensor, &Tensor),
    eval: (&Tensor, &Tensor),
    grid: &[f64],
) -> Result<ForecastMetrics> {
    let mut best: Option<(f64, RidgeModel, f64)> = None;
    let mut last_err = None;
    for &lambda in grid {
        match fit_ridge(train.0, train.1, lambda) {
            Ok(model) => {
                let (mse, _) = errors(&model.predict(val.0)?, val.1)?;
                if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
                    best = Some((mse, model, lambda));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (_, model, lambda) = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Parameter("empty lambda grid".into())))?;
    let (mse, mae) = errors(&model.predict(eval.0)?, eval.1)?;
    Ok(ForecastMetrics { mse, mae, lambda })
}
