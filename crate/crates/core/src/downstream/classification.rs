//! Multinomial logistic regression on standardized embeddings.

use serde::{Deserialize, Serialize};

use super::column_stats;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.1, l2: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `d x k`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    d: usize,
    k: usize,
}

fn matrix(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("expected n x d embeddings, got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1)))
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

impl LogisticRegression {
    /// Full-batch gradient descent on mean cross-entropy plus `l2/2 * |W|^2`.
    pub fn fit(x: &Tensor, labels: &[usize], n_classes: usize, config: &LogisticConfig) -> Result<Self> {
        let (n, d) = matrix(x)?;
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension(format!("{n} embeddings vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {n_classes})")));
        }
        let (mean, std) = column_stats(x.data(), d, 1e-8);
        let z: Vec<f64> = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect::<Vec<_>>())
            .collect();
        let k = n_classes;
        let mut w = vec![0.0; d * k];
        let mut b = vec![0.0; k];
        let mut p = vec![0.0; k];
        for _ in 0..config.epochs {
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for (row, &y) in z.chunks(d).zip(labels) {
                p.copy_from_slice(&b);
                for (j, xv) in row.iter().enumerate() {
                    for (c, pc) in p.iter_mut().enumerate() {
                        *pc += xv * w[j * k + c];
                    }
                }
                softmax_in_place(&mut p);
                p[y] -= 1.0;
                for (j, xv) in row.iter().enumerate() {
                    for c in 0..k {
                        gw[j * k + c] += xv * p[c];
                    }
                }
                for c in 0..k {
                    gb[c] += p[c];
                }
            }
            let inv = 1.0 / n as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= config.lr * (gi * inv + config.l2 * *wi);
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= config.lr * gi * inv;
            }
        }
        Ok(Self { mean, std, w, b, d, k })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, d) = matrix(x)?;
        if d != self.d {
            return Err(Error::Dimension(format!("model expects {} features, got {d}", self.d)));
        }
        Ok(x
            .data()
            .chunks(d)
            .map(|row| {
                let mut s = self.b.clone();
                for (j, v) in row.iter().enumerate() {
                    let zj = (v - self.mean[j]) / self.std[j];
                    for (c, sc) in s.iter_mut().enumerate() {
                        *sc += zj * self.w[j * self.k + c];
                    }
                }
                (0..self.k).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).expect("k >= 1")
            })
            .collect())
    }
}

/// Accuracy and macro-averaged F1 (classes without support or predictions
/// contribute 0).
pub fn classification_scores(pred: &[usize], truth: &[usize], n_classes: usize) -> ClassificationMetrics {
    let n = truth.len().max(1) as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let mut f1 = 0.0;
    for c in 0..n_classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1 += 2.0 * tp / denom;
        }
    }
    ClassificationMetrics { acc, macro_f1: f1 / n_classes.max(1) as f64 }
}

/// Fit on `train`, score on `eval`.
pub fn eval_classification(
    train_x: &Tensor,
    train_y: &[usize],
    eval_x: &Tensor,
    eval_y: &[usize],
    config: &LogisticConfig,
) -> Result<ClassificationMetrics> {
    let mut seen = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Validation("classification needs at least two classes in train".into()));
    }
    let n_classes = train_y.iter().chain(eval_y).max().map_or(0, |m| m + 1);
    let model = LogisticRegression::fit(train_x, train_y, n_classes, config)?;
    let pred = model.predict(eval_x)?;
    if eval_y.len() != pred.len() {
        return Err(Error::Dimension(format!("{} eval embeddings vs {} labels", pred.len(), eval_y.len())));
    }
    Ok(classification_scores(&pred, eval_y, n_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn blobs(n: usize, k: usize, spread: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = seeded(seed);
        let d = 4;
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % k;
            for j in 0..d {
                let center = if j == c % d { 5.0 } else { 0.0 };
                data.push(center + gaussian(&mut rng, spread));
            }
            y.push(c);
        }
        (Tensor::new(vec![n, d], data).unwrap(), y)
    }

    #[test]
    fn separable_blobs_are_perfect() {
        let (x, y) = blobs(60, 2, 0.3, 1);
        let (xe, ye) = blobs(40, 2, 0.3, 2);
        let m = eval_classification(&x, &y, &xe, &ye, &LogisticConfig::default()).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let (x, mut y) = blobs(90, 3, 0.5, seed);
            let (xe, mut ye) = blobs(90, 3, 0.5, seed + 100);
            let mut rng = seeded(seed);
            y.shuffle(&mut rng);
            ye.shuffle(&mut rng);
            total += eval_classification(&x, &y, &xe, &ye, &LogisticConfig::default()).unwrap().acc;
        }
        assert!((total / 20.0 - 1.0 / 3.0).abs() < 0.05, "{}", total / 20.0);
    }

    #[test]
    fn constant_prediction_metrics() {
        let m = classification_scores(&[1, 1, 1, 1], &[0, 1, 0, 1], 2);
        assert_eq!(m.acc, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_train_rejected() {
        let (x, _) = blobs(4, 2, 0.1, 0);
        assert!(eval_classification(&x, &[0, 0, 0, 0], &x, &[0, 1, 0, 1], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn diagonal_rescaling_barely_matters() {
        let mut rng = seeded(7);
        for seed in 0..5 {
            let (x, y) = blobs(90, 3, 2.0, seed);
            let (xe, ye) = blobs(90, 3, 2.0, seed + 50);
            let scale: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..10.0)).collect();
            let shift: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let affine = |t: &Tensor| {
                let d: Vec<f64> = t.data().chunks(4).flat_map(|r| (0..4).map(|j| r[j] * scale[j] + shift[j]).collect::<Vec<_>>()).collect();
                Tensor::new(t.shape().to_vec(), d).unwrap()
            };
            let cfg = LogisticConfig::default();
            let a = eval_classification(&x, &y, &xe, &ye, &cfg).unwrap().acc;
            let b = eval_classification(&affine(&x), &y, &affine(&xe), &ye, &cfg).unwrap().acc;
            assert!((a - b).abs() < 0.02);
        }
    }
}
