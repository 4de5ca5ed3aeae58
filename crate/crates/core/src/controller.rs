//! Policy network over the strategy space and its REINFORCE update.
//!
//! `hidden = tanh(W e)`; branch `n` draws from `softmax(A_n hidden + b_n)`.

use std::path::Path;

use rand::Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{gaussian, seeded};
use crate::space::{SearchSpace, Strategy};

/// Default width of the context embedding and projection.
pub const DEFAULT_DIM: usize = 320;

/// Standard deviation of the initial context embedding.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams {
    pub dim: usize,
    pub e: Vec<f64>,
    /// `dim x dim`, row-major.
    pub w: Vec<f64>,
    /// Per branch: `(weights n_k x dim row-major, bias n_k)`.
    pub branches: Vec<(Vec<f64>, Vec<f64>)>,
}

/// One categorical draw per branch with the state needed for its update.
#[derive(Clone, Debug)]
pub struct ControllerSample {
    /// Option index per branch within the search space.
    pub local: Vec<usize>,
    /// Option index per branch in the full 18-branch encoding.
    pub full: Vec<usize>,
    /// Canonical strategy decoded from `full`.
    pub strategy: Strategy,
    /// `log p_n(a_n)` of the raw draws.
    pub logprobs: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

fn uniform_fan<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / s).collect()
}

/// Initialise a controller whose branches have the given option counts.
pub fn init_controller(widths: &[usize], dim: usize, seed: u64) -> Result<ControllerParams> {
    if dim == 0 || widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!("controller needs dim >= 1 and non-empty branches, got {dim} / {widths:?}")));
    }
    let mut rng = seeded(seed);
    let e = (0..dim).map(|_| gaussian(&mut rng, EMBEDDING_INIT_STD)).collect();
    let w = uniform_fan(&mut rng, dim, dim, dim * dim);
    let branches = widths
        .iter()
        .map(|&n| (uniform_fan(&mut rng, dim, n, n * dim), vec![0.0; n]))
        .collect();
    Ok(ControllerParams { dim, e, w, branches })
}

impl ControllerParams {
    pub fn widths(&self) -> Vec<usize> {
        self.branches.iter().map(|(_, b)| b.len()).collect()
    }

    fn hidden(&self) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let row = &self.w[i * d..(i + 1) * d];
                row.iter().zip(&self.e).map(|(a, b)| a * b).sum::<f64>().tanh()
            })
            .collect()
    }

    fn probs_from(&self, hidden: &[f64]) -> Vec<Vec<f64>> {
        self.branches
            .iter()
            .map(|(a, b)| {
                let logits: Vec<f64> = b
                    .iter()
                    .enumerate()
                    .map(|(k, bk)| bk + a[k * self.dim..(k + 1) * self.dim].iter().zip(hidden).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                softmax(&logits)
            })
            .collect()
    }

    /// Categorical distribution of every branch.
    pub fn branch_probs(&self) -> Vec<Vec<f64>> {
        self.probs_from(&self.hidden())
    }

    /// Most probable option per branch.
    pub fn modal(&self) -> Vec<usize> {
        self.branch_probs()
            .iter()
            .map(|p| (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).expect("non-empty branch"))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.e.len() + self.w.len() + self.branches.iter().map(|(a, b)| a.len() + b.len()).sum::<usize>()
    }

    /// Save with the shared binary container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named = vec![
            ("e".to_string(), Tensor::vector(self.e.clone())),
            ("w".to_string(), Tensor::new(vec![self.dim, self.dim], self.w.clone())?),
        ];
        for (k, (a, b)) in self.branches.iter().enumerate() {
            named.push((format!("branch{k}.weight"), Tensor::new(vec![b.len(), self.dim], a.clone())?));
            named.push((format!("branch{k}.bias"), Tensor::vector(b.clone())));
        }
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let config = serde_json::json!({ "dim": self.dim, "widths": self.widths() });
        checkpoint::to_bytes("controller", config, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = checkpoint::from_bytes(bytes)?;
        if header.kind != "controller" || arrays.len() < 2 || arrays.len() % 2 != 0 {
            return Err(Error::Data("not a controller checkpoint".into()));
        }
        let dim = arrays[0].len();
        let mut it = arrays.into_iter();
        let e = it.next().expect("checked").into_data();
        let w = it.next().expect("checked");
        if w.shape() != [dim, dim] {
            return Err(Error::Dimension(format!("controller projection {:?} for dim {dim}", w.shape())));
        }
        let mut branches = Vec::new();
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            if a.shape() != [b.len(), dim] {
                return Err(Error::Dimension(format!("branch weight {:?} vs bias {}", a.shape(), b.len())));
            }
            branches.push((a.into_data(), b.into_data()));
        }
        Ok(Self { dim, e, w: w.into_data(), branches })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Free-function form of [`ControllerParams::branch_probs`].
pub fn branch_probs(params: &ControllerParams) -> Vec<Vec<f64>> {
    params.branch_probs()
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative sum: take the last option
    // with non-zero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draw every branch independently and decode the result in `space`.
pub fn sample_strategy<R: Rng + ?Sized>(
    params: &ControllerParams,
    space: &SearchSpace,
    rng: &mut R,
) -> Result<ControllerSample> {
    if params.widths() != space.widths() {
        return Err(Error::Dimension(format!(
            "controller widths {:?} do not match space widths {:?}",
            params.widths(),
            space.widths()
        )));
    }
    let hidden = params.hidden();
    let probs = params.probs_from(&hidden);
    let local: Vec<usize> = probs.iter().map(|p| categorical(p, rng)).collect();
    let logprobs = local.iter().zip(&probs).map(|(&a, p)| p[a].ln()).collect();
    let full = space.to_full(&local);
    let strategy = Strategy::decode(&full)?;
    Ok(ControllerSample { local, full, strategy, logprobs, hidden, probs })
}

/// One ascent step on `delta * sum_n log p_n(a_n)` using the distribution
/// recorded at sample time.
pub fn reinforce_update(params: &mut ControllerParams, sample: &ControllerSample, delta: f64, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("controller learning rate must be > 0, got {lr}")));
    }
    if !delta.is_finite() {
        return Err(Error::Numeric(format!("non-finite reward {delta}")));
    }
    if delta == 0.0 {
        return Ok(());
    }
    let d = params.dim;
    let hidden = &sample.hidden;
    let mut d_hidden = vec![0.0; d];
    let step = lr * delta;
    for ((a, b), (&choice, probs)) in params.branches.iter_mut().zip(sample.local.iter().zip(&sample.probs)) {
        for k in 0..b.len() {
            let g = f64::from(u8::from(k == choice)) - probs[k];
            if g == 0.0 {
                continue;
            }
            let row = &mut a[k * d..(k + 1) * d];
            for j in 0..d {
                d_hidden[j] += g * row[j];
                row[j] += step * g * hidden[j];
            }
            b[k] += step * g;
        }
    }
    let d_pre: Vec<f64> = d_hidden.iter().zip(hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
    let mut d_e = vec![0.0; d];
    for i in 0..d {
        let row = &mut params.w[i * d..(i + 1) * d];
        for j in 0..d {
            d_e[j] += d_pre[i] * row[j];
            row[j] += step * d_pre[i] * params.e[j];
        }
    }
    for (e, g) in params.e.iter_mut().zip(d_e) {
        *e += step * g;
    }
    Ok(())
}
