//! Pretraining under a strategy and downstream scoring of an encoder.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::make_view_pair;
use crate::contrast::strategy_loss;
use crate::downstream::{
    eval_anomaly_scores, eval_classification, eval_forecasting, instance_embed, AnomalyMetrics, ClassificationMetrics,
    ForecastMetrics, LogisticConfig, MetricRecord, LAMBDA_GRID,
};
use crate::encoder::{transform_embeddings, EncoderParams};
use crate::error::{Error, Result};
use crate::harness::{DatasetBundle, TaskKind};
use crate::numerics::{Tape, Tensor, Var};
use crate::optim::{Adam, Sgd};
use crate::space::Strategy;

/// Worst forecasting reward (`-MSE` is clamped from below at this value).
pub const FORECAST_WORST: f64 = -10.0;

/// Orientation-aware worst possible reward of a task.
pub fn worst_reward(task: TaskKind) -> f64 {
    match task {
        TaskKind::Classification | TaskKind::Anomaly => 0.0,
        TaskKind::Forecast => FORECAST_WORST,
    }
}

/// Data handling and downstream settings shared by both search phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Minibatch size for contrastive pretraining.
    pub batch_size: usize,
    /// Longer inputs are randomly windowed to this length each epoch.
    pub max_input_len: usize,
    /// Length of the pretraining windows cut from a long series.
    pub series_window: usize,
    /// History length used to embed a timestep of a long series.
    pub embed_window: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Stride between forecasting cut points on the train split.
    pub forecast_stride: usize,
    /// Delay for segment-adjusted anomaly scoring.
    pub delay: usize,
    pub logistic: LogisticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_input_len: 2000,
            series_window: 128,
            embed_window: 32,
            horizon: 48,
            forecast_stride: 1,
            delay: 7,
            logistic: LogisticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.max_input_len < 2 || self.series_window < 2 {
            return Err(Error::Config("batch_size, max_input_len and series_window must be >= 2".into()));
        }
        if self.embed_window == 0 || self.horizon == 0 || self.forecast_stride == 0 {
            return Err(Error::Config("embed_window, horizon and forecast_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optimizer used for an encoder update.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

/// Summary of one pretraining epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub batches: usize,
    pub mean_loss: f64,
}

/// Pretraining inputs (`N x T x c`) for one epoch: classification train
/// instances, or windows of the train range of a long series. Anything
/// longer than `max_input_len` is randomly windowed.
pub fn pretraining_inputs<R: Rng + ?Sized>(bundle: &DatasetBundle, cfg: &TrainConfig, rng: &mut R) -> Result<Tensor> {
    match bundle.task {
        TaskKind::Classification => {
            let x = &bundle.class_train()?.x;
            let t = x.dim(1);
            if t <= cfg.max_input_len {
                return Ok(x.clone());
            }
            let start = rng.random_range(0..=t - cfg.max_input_len);
            x.narrow(1, start, cfg.max_input_len)
        }
        TaskKind::Forecast | TaskKind::Anomaly => {
            let series = bundle.series()?;
            let range = bundle.series_train()?;
            let window = cfg.series_window.min(cfg.max_input_len).min(range.len());
            let offset = rng.random_range(0..=(range.len() - window).min(window - 1));
            let starts: Vec<usize> = (range.start + offset..=range.end - window).step_by(window).collect();
            let parts = starts
                .iter()
                .map(|&s| series.narrow(0, s, window)?.reshape(vec![1, window, series.dim(1)]))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack_rows(&parts)
        }
    }
}

fn batch_loss<R: Rng + ?Sized>(
    params: &EncoderParams,
    x: &Tensor,
    strategy: &Strategy,
    rng: &mut R,
) -> Result<(Tape, Vec<Var>, Var)> {
    let pair = make_view_pair(x, strategy, rng)?;
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let v1 = tape.constant(pair.view1);
    let v2 = tape.constant(pair.view2);
    let h1 = params.forward(&mut tape, &vars, v1)?;
    let h2 = params.forward(&mut tape, &vars, v2)?;
    let h1 = tape.slice(h1, 1, pair.align1, pair.common_len)?;
    let h2 = tape.slice(h2, 1, pair.align2, pair.common_len)?;
    let h1 = transform_embeddings(&mut tape, h1, strategy, rng)?;
    let h2 = transform_embeddings(&mut tape, h2, strategy, rng)?;
    let loss = strategy_loss(&mut tape, h1, h2, strategy)?;
    Ok((tape, vars, loss))
}

/// One pass over `data` in shuffled minibatches; a final batch of fewer than
/// two instances is dropped. Any non-finite loss or gradient is an error.
pub fn pretrain_epoch<R: Rng + ?Sized>(
    params: &mut EncoderParams,
    data: &Tensor,
    strategy: &Strategy,
    optimizer: &mut Optimizer,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if batch_size < 2 {
        return Err(Error::Config("batch size must be >= 2".into()));
    }
    let mut order: Vec<usize> = (0..data.dim(0)).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
        let x = data.select_rows(chunk);
        let (tape, vars, loss) = batch_loss(params, &x, strategy, rng)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite contrastive loss {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| p.zeros_like()))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite encoder gradient".into()));
        }
        optimizer.step(&mut params.tensors, &grads)?;
        if params.tensors.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("encoder parameters diverged".into()));
        }
        total += value;
        batches += 1;
    }
    Ok(EpochStats { batches, mean_loss: if batches == 0 { 0.0 } else { total / batches as f64 } })
}

/// `epochs` epochs of Adam pretraining, redrawing the inputs every epoch.
pub fn pretrain<R: Rng + ?Sized>(
    params: &mut EncoderParams,
    bundle: &DatasetBundle,
    strategy: &Strategy,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    let mut optimizer = Optimizer::Adam(Adam::new(lr));
    (0..epochs)
        .map(|_| {
            let data = pretraining_inputs(bundle, cfg, rng)?;
            pretrain_epoch(params, &data, strategy, &mut optimizer, cfg.batch_size, rng)
        })
        .collect()
}

/// Which held-out split to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

/// Downstream metrics of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskMetrics {
    Classification(ClassificationMetrics),
    Forecast(ForecastMetrics),
    Anomaly(AnomalyMetrics),
}

impl TaskMetrics {
    /// Higher-is-better score: ACC, `-MSE` (clamped at the worst reward) or F1.
    pub fn score(&self) -> f64 {
        match self {
            TaskMetrics::Classification(m) => m.acc,
            TaskMetrics::Forecast(m) => (-m.mse).max(FORECAST_WORST),
            TaskMetrics::Anomaly(m) => m.f1,
        }
    }

    pub fn records(&self, split: EvalSplit) -> Vec<MetricRecord> {
        let rec = |task: &str, metric: &str, value: f64| MetricRecord {
            task: task.into(),
            metric: metric.into(),
            split: split.name().into(),
            value,
        };
        match self {
            TaskMetrics::Classification(m) => vec![rec("classification", "acc", m.acc), rec("classification", "macro_f1", m.macro_f1)],
            TaskMetrics::Forecast(m) => vec![rec("forecast", "mse", m.mse), rec("forecast", "mae", m.mae)],
            TaskMetrics::Anomaly(m) => vec![
                rec("anomaly", "f1", m.f1),
                rec("anomaly", "precision", m.precision),
                rec("anomaly", "recall", m.recall),
            ],
        }
    }
}

/// Embedding of each timestep in `ends` computed from the `window` steps of
/// history ending there (zero-padded at the series start). With `mask_last`
/// the final observed step is zeroed.
pub fn window_embeddings(
    params: &EncoderParams,
    series: &Tensor,
    ends: &[usize],
    window: usize,
    mask_last: bool,
) -> Result<Tensor> {
    let c = series.dim(1);
    let mut data = vec![0.0; ends.len() * window * c];
    for (i, &t) in ends.iter().enumerate() {
        let avail = (t + 1).min(window);
        let src = &series.data()[(t + 1 - avail) * c..(t + 1) * c];
        let dst = &mut data[(i * window + window - avail) * c..(i + 1) * window * c];
        dst.copy_from_slice(src);
        if mask_last {
            dst[(avail - 1) * c..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let h = params.encode(&Tensor::new(vec![ends.len(), window, c], data)?)?;
    let d = h.dim(2);
    let mut out = Vec::with_capacity(ends.len() * d);
    for row in h.data().chunks(window * d) {
        out.extend_from_slice(&row[(window - 1) * d..]);
    }
    Tensor::new(vec![ends.len(), d], out)
}

/// Cut points `t` whose next `horizon` targets stay inside `range`, with
/// features from history ending at `t` and targets `t+1..=t+horizon`.
fn forecast_set(
    params: &EncoderParams,
    series: &Tensor,
    range: Range<usize>,
    stride: usize,
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let c = series.dim(1);
    let first = range.start.saturating_sub(1);
    if range.end < first + cfg.horizon + 1 {
        return Err(Error::Data(format!("split {range:?} is shorter than the forecast horizon {}", cfg.horizon)));
    }
    let ends: Vec<usize> = (first..range.end - cfg.horizon).step_by(stride).collect();
    let x = window_embeddings(params, series, &ends, cfg.embed_window, false)?;
    let mut y = Vec::with_capacity(ends.len() * cfg.horizon * c);
    for &t in &ends {
        y.extend_from_slice(&series.data()[(t + 1) * c..(t + 1 + cfg.horizon) * c]);
    }
    Ok((x, Tensor::new(vec![ends.len(), cfg.horizon * c], y)?))
}

/// L1 gap between the embedding of each timestep with and without that
/// step observed.
pub fn anomaly_scores(params: &EncoderParams, series: &Tensor, range: Range<usize>, window: usize) -> Result<Vec<f64>> {
    let ends: Vec<usize> = range.collect();
    let observed = window_embeddings(params, series, &ends, window, false)?;
    let masked = window_embeddings(params, series, &ends, window, true)?;
    let d = observed.dim(1);
    Ok(observed
        .data()
        .chunks(d)
        .zip(masked.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
        .collect())
}

/// Fit the task's downstream model on train embeddings and score `split`.
pub fn evaluate_split(params: &EncoderParams, bundle: &DatasetBundle, cfg: &TrainConfig, split: EvalSplit) -> Result<TaskMetrics> {
    match bundle.task {
        TaskKind::Classification => {
            let train = bundle.class_train()?;
            let eval = match split {
                EvalSplit::Val => bundle.class_val()?,
                EvalSplit::Test => bundle.class_test()?,
            };
            let tx = instance_embed(&params.encode(&train.x)?)?;
            let ex = instance_embed(&params.encode(&eval.x)?)?;
            check_finite(&tx)?;
            check_finite(&ex)?;
            Ok(TaskMetrics::Classification(eval_classification(&tx, &train.y, &ex, &eval.y, &cfg.logistic)?))
        }
        TaskKind::Forecast => {
            let series = bundle.series()?;
            let train = forecast_set(params, series, bundle.series_train()?, cfg.forecast_stride, cfg)?;
            let val = forecast_set(params, series, bundle.series_val()?, 1, cfg)?;
            let eval = match split {
                EvalSplit::Val => val.clone(),
                EvalSplit::Test => forecast_set(params, series, bundle.series_test()?, 1, cfg)?,
            };
            check_finite(&train.0)?;
            check_finite(&eval.0)?;
            let fit = |grid: &[f64]| eval_forecasting((&train.0, &train.1), (&val.0, &val.1), (&eval.0, &eval.1), grid);
            let metrics = match fit(&LAMBDA_GRID) {
                Err(Error::Numeric(msg)) => {
                    log::warn!("ridge fit failed ({msg}); retrying with a larger regularizer");
                    let grid: Vec<f64> = LAMBDA_GRID.iter().map(|l| l * 100.0).collect();
                    fit(&grid)?
                }
                other => other?,
            };
            Ok(TaskMetrics::Forecast(metrics))
        }
        TaskKind::Anomaly => {
            let series = bundle.series()?;
            let labels = bundle.series_labels().ok_or_else(|| Error::Data("anomaly labels missing".into()))?;
            let range = match split {
                EvalSplit::Val => bundle.series_val()?,
                EvalSplit::Test => bundle.series_test()?,
            };
            let train_scores = anomaly_scores(params, series, bundle.series_train()?, cfg.embed_window)?;
            let scores = anomaly_scores(params, series, range.clone(), cfg.embed_window)?;
            if train_scores.iter().chain(&scores).any(|s| !s.is_finite()) {
                return Err(Error::Numeric("non-finite anomaly score".into()));
            }
            Ok(TaskMetrics::Anomaly(eval_anomaly_scores(&train_scores, &scores, &labels[range], cfg.delay)?))
        }
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite embeddings".into()))
    }
}

/// Orientation-normalized validation score of a frozen encoder.
pub fn compute_reward(params: &EncoderParams, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<f64> {
    Ok(evaluate_split(params, bundle, cfg, EvalSplit::Val)?.score())
}
