//! Synthetic stand-ins for classification, forecasting and anomaly data.
//! Every generator is a pure function of its arguments.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, RawDataset, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive, gaussian, seeded};

/// Number of sine cycles per class step over the series length.
const CYCLES_PER_CLASS: f64 = 8.0;
/// Seasonal periods of the forecasting series.
const FORECAST_PERIODS: [f64; 2] = [24.0, 96.0];
const AR_COEF: f64 = 0.7;
const AR_STD: f64 = 0.1;
const ANOMALY_PERIOD: f64 = 50.0;
const ANOMALY_NOISE: f64 = 0.05;
/// Injected anomalies are this many base-signal standard deviations away.
const ANOMALY_AMPLITUDE: (f64, f64) = (8.0, 10.0);

/// Instances of class `k` are `sin(2π·8(k+1)·t/T + φ)` plus `N(0, noise²)`.
pub fn synth_classification_raw(n_per_class: usize, t: usize, n_classes: usize, noise: f64, seed: u64) -> Result<RawDataset> {
    if n_classes < 2 || n_per_class == 0 || t == 0 || !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "synthetic classification needs n_classes >= 2, n_per_class >= 1, T >= 1, noise >= 0 (got {n_classes}, {n_per_class}, {t}, {noise})"
        )));
    }
    let mut rng = seeded(derive(seed, "synth-classification", 0));
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * t);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        let freq = CYCLES_PER_CLASS * (k + 1) as f64 / t as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        for s in 0..t {
            data.push((2.0 * PI * freq * s as f64 + phase).sin() + gaussian(&mut rng, noise));
        }
        labels.push(k);
    }
    Ok(RawDataset::Classification { x: Tensor::new(vec![n, t, 1], data)?, labels })
}

pub fn synth_classification(n_per_class: usize, t: usize, n_classes: usize, noise: f64, seed: u64) -> Result<DatasetBundle> {
    let raw = synth_classification_raw(n_per_class, t, n_classes, noise, seed)?;
    let task = TaskKind::Classification;
    DatasetBundle::from_raw(raw, task, task.default_ratios(), seed)
}

/// Linear trend plus two seasonal sines plus AR(1) noise; `noisy = false`
/// drops the AR term.
pub fn synth_forecast_raw(t_total: usize, seed: u64, noisy: bool) -> Result<RawDataset> {
    if t_total < 1000 {
        return Err(Error::Config(format!("synthetic forecast series needs T >= 1000, got {t_total}")));
    }
    let mut rng = seeded(derive(seed, "synth-forecast", 0));
    let slope = rng.random_range(0.5..1.5) / t_total as f64;
    let amps = [rng.random_range(0.8..1.2), rng.random_range(0.4..0.6)];
    let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let mut ar = 0.0;
    let data = (0..t_total)
        .map(|s| {
            let ts = s as f64;
            let seasonal: f64 =
                (0..2).map(|j| amps[j] * (2.0 * PI * ts / FORECAST_PERIODS[j] + phases[j]).sin()).sum();
            if noisy {
                ar = AR_COEF * ar + gaussian(&mut rng, AR_STD);
            }
            slope * ts + seasonal + ar
        })
        .collect();
    Ok(RawDataset::Series { x: Tensor::new(vec![t_total, 1], data)?, labels: None })
}

pub fn synth_forecast(t_total: usize, seed: u64) -> Result<DatasetBundle> {
    let task = TaskKind::Forecast;
    DatasetBundle::from_raw(synth_forecast_raw(t_total, seed, true)?, task, task.default_ratios(), seed)
}

/// Smooth sine with point spikes and short level shifts; exactly
/// `round(rate·T)` points are labelled anomalous. `noisy = false` drops the
/// small Gaussian noise on the base signal.
pub fn synth_anomaly_raw(t_total: usize, anomaly_rate: f64, seed: u64, noisy: bool) -> Result<RawDataset> {
    if !(anomaly_rate > 0.0 && anomaly_rate <= 0.05) || t_total < 100 {
        return Err(Error::Config(format!(
            "synthetic anomaly series needs 0 < rate <= 0.05 and T >= 100 (got {anomaly_rate}, {t_total})"
        )));
    }
    let mut rng = seeded(derive(seed, "synth-anomaly", 0));
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = if noisy { ANOMALY_NOISE } else { 0.0 };
    let mut x: Vec<f64> =
        (0..t_total).map(|s| (2.0 * PI * s as f64 / ANOMALY_PERIOD + phase).sin() + gaussian(&mut rng, noise)).collect();
    let base_std = (0.5 + noise * noise).sqrt();
    let target = ((anomaly_rate * t_total as f64).round() as usize).max(1);
    let mut labels = vec![false; t_total];
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Data("could not place synthetic anomalies".into()));
        }
        let remaining = target - placed;
        let len = if remaining >= 3 && rng.random_bool(0.5) { rng.random_range(3..=remaining.min(5)) } else { 1 };
        let start = rng.random_range(2..t_total - len - 2);
        // Keep a one-point gap so events never merge into one segment.
        if labels[start - 1..start + len + 1].iter().any(|&l| l) {
            continue;
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let amplitude = sign * base_std * rng.random_range(ANOMALY_AMPLITUDE.0..ANOMALY_AMPLITUDE.1);
        for s in start..start + len {
            x[s] += amplitude;
            labels[s] = true;
        }
        placed += len;
    }
    Ok(RawDataset::Series { x: Tensor::new(vec![t_total, 1], x)?, labels: Some(labels) })
}

pub fn synth_anomaly(t_total: usize, anomaly_rate: f64, seed: u64) -> Result<DatasetBundle> {
    let task = TaskKind::Anomaly;
    DatasetBundle::from_raw(synth_anomaly_raw(t_total, anomaly_rate, seed, true)?, task, task.default_ratios(), seed)
}

/// Parsed `synth:` dataset reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthSpec {
    Classification { n_per_class: usize, t: usize, n_classes: usize, noise: f64 },
    Forecast { t_total: usize, noisy: bool },
    Anomaly { t_total: usize, rate: f64, noisy: bool },
}

impl SynthSpec {
    pub fn task(&self) -> TaskKind {
        match self {
            SynthSpec::Classification { .. } => TaskKind::Classification,
            SynthSpec::Forecast { .. } => TaskKind::Forecast,
            SynthSpec::Anomaly { .. } => TaskKind::Anomaly,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<RawDataset> {
        match *self {
            SynthSpec::Classification { n_per_class, t, n_classes, noise } => {
                synth_classification_raw(n_per_class, t, n_classes, noise, seed)
            }
            SynthSpec::Forecast { t_total, noisy } => synth_forecast_raw(t_total, seed, noisy),
            SynthSpec::Anomaly { t_total, rate, noisy } => synth_anomaly_raw(t_total, rate, seed, noisy),
        }
    }
}

/// `classification[:n=..,t=..,classes=..,noise=..]`,
/// `forecast[:t=..,noisy=0|1]` or `anomaly[:t=..,rate=..,noisy=0|1]`.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let (name, params) = text.split_once(':').unwrap_or((text, ""));
    let mut spec = match name {
        "classification" => SynthSpec::Classification { n_per_class: 40, t: 64, n_classes: 3, noise: 0.5 },
        "forecast" | "forecasting" => SynthSpec::Forecast { t_total: 1200, noisy: true },
        "anomaly" => SynthSpec::Anomaly { t_total: 2000, rate: 0.02, noisy: true },
        _ => return Err(Error::Config(format!("unknown synthetic dataset {name:?}"))),
    };
    for kv in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        let bad = || Error::Config(format!("invalid value for {k}: {v:?}"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let float = || v.parse::<f64>().map_err(|_| bad());
        let flag = || match v {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            _ => Err(bad()),
        };
        match (&mut spec, k) {
            (SynthSpec::Classification { n_per_class, .. }, "n") => *n_per_class = int()?,
            (SynthSpec::Classification { t, .. }, "t") => *t = int()?,
            (SynthSpec::Classification { n_classes, .. }, "classes") => *n_classes = int()?,
            (SynthSpec::Classification { noise, .. }, "noise") => *noise = float()?,
            (SynthSpec::Forecast { t_total, .. } | SynthSpec::Anomaly { t_total, .. }, "t") => *t_total = int()?,
            (SynthSpec::Forecast { noisy, .. } | SynthSpec::Anomaly { noisy, .. }, "noisy") => *noisy = flag()?,
            (SynthSpec::Anomaly { rate, .. }, "rate") => *rate = float()?,
            _ => return Err(Error::Config(format!("unknown parameter {k:?} for synthetic {name}"))),
        }
    }
    Ok(spec)
}
