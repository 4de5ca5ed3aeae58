//! Datasets: file formats, deterministic splits, standardization and
//! synthetic generators.

mod format;
mod synth;

pub use format::{parse_dataset, write_dataset, RawDataset};
pub use synth::{
    parse_synth_spec, synth_anomaly, synth_anomaly_raw, synth_classification, synth_classification_raw, synth_forecast,
    synth_forecast_raw, SynthSpec,
};

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive, seeded};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Forecast,
    Anomaly,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Classification, TaskKind::Forecast, TaskKind::Anomaly];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Forecast => "forecast",
            TaskKind::Anomaly => "anomaly",
        }
    }

    /// Name of the validation metric used as the raw reward.
    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Classification => "acc",
            TaskKind::Forecast => "mse",
            TaskKind::Anomaly => "f1",
        }
    }

    /// Default split ratios (train / val / test).
    pub fn default_ratios(self) -> SplitRatios {
        match self {
            TaskKind::Classification | TaskKind::Forecast => SplitRatios { train: 0.6, val: 0.2, test: 0.2 },
            TaskKind::Anomaly => SplitRatios { train: 0.45, val: 0.05, test: 0.5 },
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "forecast" | "forecasting" => Ok(TaskKind::Forecast),
            "anomaly" => Ok(TaskKind::Anomaly),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || self.train <= 0.0 || self.val <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {self:?}")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` items, rounding the first two.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64) * self.train).round() as usize;
        let val = (((n as f64) * self.val).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// `"60/20/20"` or `"0.6,0.2,0.2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(['/', ','])
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid split ratios {s:?}"))))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(Error::Config(format!("split ratios need three parts, got {s:?}")));
        }
        let total: f64 = parts.iter().sum();
        let scale = if total > 1.5 { 100.0 } else { 1.0 };
        let r = SplitRatios { train: parts[0] / scale, val: parts[1] / scale, test: parts[2] / scale };
        r.validate()?;
        Ok(r)
    }
}

/// Labelled instances of one split; `x` is `n x T x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplit {
    pub x: Tensor,
    pub y: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
enum Splits {
    Classification { train: ClassSplit, val: ClassSplit, test: ClassSplit, n_classes: usize },
    Series { series: Tensor, labels: Option<Vec<bool>>, train: Range<usize>, val: Range<usize>, test: Range<usize> },
}

/// A dataset split into train / validation / test and standardized with
/// train-split statistics. The test split is only reachable through the
/// `test_*` accessors, which the search never calls.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub task: TaskKind,
    pub raw: RawDataset,
    pub ratios: SplitRatios,
    pub seed: u64,
    /// Per-channel train mean and (floored) standard deviation.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    splits: Splits,
}

fn channel_stats(rows: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    crate::downstream::column_stats(rows, c, STD_FLOOR)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let c = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

impl DatasetBundle {
    /// Split and standardize a raw dataset for `task`.
    pub fn from_raw(raw: RawDataset, task: TaskKind, ratios: SplitRatios, seed: u64) -> Result<Self> {
        ratios.validate()?;
        match (&raw, task) {
            (RawDataset::Classification { x, labels }, TaskKind::Classification) => {
                let n = labels.len();
                let n_classes = labels.iter().max().map_or(0, |m| m + 1);
                if n_classes < 2 {
                    return Err(Error::Data("classification needs at least two classes".into()));
                }
                let order = stratified_order(labels, n_classes, seed);
                let (ntr, nva, _) = ratios.sizes(n);
                if ntr < 2 || nva == 0 {
                    return Err(Error::Data(format!("{n} instances are too few for ratios {ratios:?}")));
                }
                let c = x.dim(2);
                let train_idx = &order[..ntr];
                let train_x = x.select_rows(train_idx);
                let (mean, std) = channel_stats(train_x.data(), c);
                let take = |idx: &[usize]| ClassSplit {
                    x: standardize(&x.select_rows(idx), &mean, &std),
                    y: idx.iter().map(|&i| labels[i]).collect(),
                };
                let splits = Splits::Classification {
                    train: take(train_idx),
                    val: take(&order[ntr..ntr + nva]),
                    test: take(&order[ntr + nva..]),
                    n_classes,
                };
                Ok(Self { task, raw, ratios, seed, mean, std, splits })
            }
            (RawDataset::Series { x, labels }, TaskKind::Forecast | TaskKind::Anomaly) => {
                if task == TaskKind::Anomaly && labels.is_none() {
                    return Err(Error::Data("anomaly detection needs a labelled series".into()));
                }
                let t = x.dim(0);
                let (ntr, nva, _) = ratios.sizes(t);
                if ntr < 2 || nva == 0 {
                    return Err(Error::Data(format!("series of length {t} is too short for ratios {ratios:?}")));
                }
                let c = x.dim(1);
                let (mean, std) = channel_stats(&x.data()[..ntr * c], c);
                let splits = Splits::Series {
                    series: standardize(x, &mean, &std),
                    labels: labels.clone(),
                    train: 0..ntr,
                    val: ntr..ntr + nva,
                    test: ntr + nva..t,
                };
                Ok(Self { task, raw, ratios, seed, mean, std, splits })
            }
            _ => Err(Error::Data(format!("dataset format does not fit task {task}"))),
        }
    }

    pub fn channels(&self) -> usize {
        match &self.raw {
            RawDataset::Classification { x, .. } => x.dim(2),
            RawDataset::Series { x, .. } => x.dim(1),
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.splits {
            Splits::Classification { n_classes, .. } => Some(*n_classes),
            Splits::Series { .. } => None,
        }
    }

    pub fn class_train(&self) -> Result<&ClassSplit> {
        match &self.splits {
            Splits::Classification { train, .. } => Ok(train),
            Splits::Series { .. } => Err(Error::Usage("not a classification dataset".into())),
        }
    }

    pub fn class_val(&self) -> Result<&ClassSplit> {
        match &self.splits {
            Splits::Classification { val, .. } => Ok(val),
            Splits::Series { .. } => Err(Error::Usage("not a classification dataset".into())),
        }
    }

    /// Held-out split; for final reporting only.
    pub fn class_test(&self) -> Result<&ClassSplit> {
        match &self.splits {
            Splits::Classification { test, .. } => Ok(test),
            Splits::Series { .. } => Err(Error::Usage("not a classification dataset".into())),
        }
    }

    /// Standardized full series (`T x c`).
    pub fn series(&self) -> Result<&Tensor> {
        match &self.splits {
            Splits::Series { series, .. } => Ok(series),
            Splits::Classification { .. } => Err(Error::Usage("not a series dataset".into())),
        }
    }

    pub fn series_labels(&self) -> Option<&[bool]> {
        match &self.splits {
            Splits::Series { labels, .. } => labels.as_deref(),
            Splits::Classification { .. } => None,
        }
    }

    pub fn series_train(&self) -> Result<Range<usize>> {
        match &self.splits {
            Splits::Series { train, .. } => Ok(train.clone()),
            Splits::Classification { .. } => Err(Error::Usage("not a series dataset".into())),
        }
    }

    pub fn series_val(&self) -> Result<Range<usize>> {
        match &self.splits {
            Splits::Series { val, .. } => Ok(val.clone()),
            Splits::Classification { .. } => Err(Error::Usage("not a series dataset".into())),
        }
    }

    /// Held-out range; for final reporting only.
    pub fn series_test(&self) -> Result<Range<usize>> {
        match &self.splits {
            Splits::Series { test, .. } => Ok(test.clone()),
            Splits::Classification { .. } => Err(Error::Usage("not a series dataset".into())),
        }
    }

    /// `(train, val, test)` sizes in instances or timesteps.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        match &self.splits {
            Splits::Classification { train, val, test, .. } => (train.y.len(), val.y.len(), test.y.len()),
            Splits::Series { train, val, test, .. } => (train.len(), val.len(), test.len()),
        }
    }
}

/// Per class: shuffle; then interleave the classes round-robin so any prefix
/// is (nearly) stratified.
fn stratified_order(labels: &[usize], n_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(derive(seed, "split", 0));
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for members in &mut per_class {
        members.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        for members in &per_class {
            if let Some(&i) = members.get(r) {
                order.push(i);
            }
        }
    }
    order
}

/// Read and split a dataset file.
pub fn load_dataset(path: &Path, task: TaskKind, ratios: SplitRatios, seed: u64) -> Result<DatasetBundle> {
    let text = std::fs::read_to_string(path)?;
    DatasetBundle::from_raw(parse_dataset(&text)?, task, ratios, seed)
}

/// Write the raw contents of a dataset file.
pub fn save_dataset(path: &Path, raw: &RawDataset) -> Result<()> {
    std::fs::write(path, write_dataset(raw))?;
    Ok(())
}

/// Load `path`, or generate when it is `synth:<name>[:k=v,...]`.
pub fn resolve_dataset(spec: &str, task: TaskKind, ratios: Option<SplitRatios>, seed: u64) -> Result<DatasetBundle> {
    let ratios = ratios.unwrap_or_else(|| task.default_ratios());
    if let Some(rest) = spec.strip_prefix("synth:") {
        let s = parse_synth_spec(rest)?;
        let raw = s.generate(seed)?;
        DatasetBundle::from_raw(raw, task, ratios, seed)
    } else {
        load_dataset(Path::new(spec), task, ratios, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_class(n: usize) -> RawDataset {
        let x = Tensor::new(vec![n, 2, 1], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        RawDataset::Classification { x, labels: (0..n).map(|i| i % 2).collect() }
    }

    #[test]
    fn split_sizes_are_stable() {
        let ratios: SplitRatios = "70/10/20".parse().unwrap();
        let a = DatasetBundle::from_raw(tiny_class(10), TaskKind::Classification, ratios, 3).unwrap();
        let b = DatasetBundle::from_raw(tiny_class(10), TaskKind::Classification, ratios, 3).unwrap();
        assert_eq!(a.split_sizes(), (7, 1, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let raw = tiny_class(30);
        let bundle = DatasetBundle::from_raw(raw, TaskKind::Classification, TaskKind::Classification.default_ratios(), 1).unwrap();
        let key = |s: &ClassSplit| -> Vec<i64> {
            s.x.data().chunks(2).map(|r| (r[0] * bundle.std[0] + bundle.mean[0]).round() as i64).collect()
        };
        let mut all = key(bundle.class_train().unwrap());
        all.extend(key(bundle.class_val().unwrap()));
        all.extend(key(bundle.class_test().unwrap()));
        all.sort_unstable();
        assert_eq!(all, (0..30).map(|i| 2 * i).collect::<Vec<i64>>());
    }

    #[test]
    fn constant_channel_standardizes_to_zero() {
        let x = Tensor::new(vec![20, 2], (0..20).flat_map(|i| [5.0, i as f64]).collect()).unwrap();
        let raw = RawDataset::Series { x, labels: None };
        let b = DatasetBundle::from_raw(raw, TaskKind::Forecast, TaskKind::Forecast.default_ratios(), 0).unwrap();
        assert!(b.series().unwrap().data().chunks(2).all(|r| r[0] == 0.0));
        assert_eq!(b.std[0], STD_FLOOR);
    }

    #[test]
    fn series_splits_are_contiguous() {
        let x = Tensor::new(vec![100, 1], (0..100).map(f64::from).collect()).unwrap();
        let raw = RawDataset::Series { x, labels: None };
        let b = DatasetBundle::from_raw(raw, TaskKind::Forecast, TaskKind::Forecast.default_ratios(), 0).unwrap();
        assert_eq!((b.series_train().unwrap(), b.series_val().unwrap(), b.series_test().unwrap()), (0..60, 60..80, 80..100));
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (raw, task) in [
            (synth_classification_raw(5, 16, 3, 0.5, 1).unwrap(), TaskKind::Classification),
            (synth_anomaly_raw(1000, 0.02, 2, true).unwrap(), TaskKind::Anomaly),
        ] {
            let path = dir.path().join("d.txt");
            save_dataset(&path, &raw).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            let bundle = load_dataset(&path, task, task.default_ratios(), 0).unwrap();
            assert_eq!(write_dataset(&bundle.raw), text);
        }
    }

    #[test]
    fn task_format_mismatch_is_data_error() {
        let r = DatasetBundle::from_raw(tiny_class(10), TaskKind::Forecast, TaskKind::Forecast.default_ratios(), 0);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
