//! Dilated residual CNN encoder and the embedding-transformation stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{gaussian, seeded};
use crate::space::{Norm, Strategy};

/// Epsilon inside the embedding layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Kernel width of every residual block.
pub const BLOCK_KERNEL: usize = 3;

fn default_max_dilation() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Upper bound on block dilation (`2^i` is clamped to this).
    #[serde(default = "default_max_dilation")]
    pub max_dilation: usize,
}

impl EncoderConfig {
    /// Full-size configuration: 10 blocks, 64 hidden, 320 output.
    pub fn standard(in_channels: usize) -> Self {
        Self { in_channels, depth: 10, hidden: 64, out_dim: 320, max_dilation: default_max_dilation() }
    }

    pub fn new(in_channels: usize, depth: usize, hidden: usize, out_dim: usize) -> Self {
        Self { in_channels, depth, hidden, out_dim, max_dilation: default_max_dilation() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.out_dim == 0 || self.in_channels == 0 || self.max_dilation == 0 {
            return Err(Error::Config(format!("encoder dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn dilation(&self, block: usize) -> usize {
        let d = 1usize.checked_shl(block as u32).unwrap_or(usize::MAX);
        d.min(self.max_dilation)
    }

    /// `(name, shape)` of every parameter array in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("input.weight".to_string(), vec![1, self.in_channels, self.hidden]),
            ("input.bias".to_string(), vec![self.hidden]),
        ];
        for i in 0..self.depth {
            out.push((format!("block{i}.weight"), vec![BLOCK_KERNEL, self.hidden, self.hidden]));
            out.push((format!("block{i}.bias"), vec![self.hidden]));
        }
        out.push(("output.weight".to_string(), vec![1, self.hidden, self.out_dim]));
        out.push(("output.bias".to_string(), vec![self.out_dim]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Arrays in [`EncoderConfig::layout`] order.
    pub tensors: Vec<Tensor>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = seeded(seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".bias") {
                return Tensor::zeros(&shape);
            }
            let a = glorot_bound(&shape);
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape, data).expect("layout shape")
        })
        .collect();
    Ok(EncoderParams { config: config.clone(), tensors })
}

/// `sqrt(6 / (fan_in + fan_out))` for a `K x C_in x C_out` kernel.
pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (k, cin, cout) = (shape[0], shape[1], shape[2]);
    (6.0 / ((k * cin + k * cout) as f64)).sqrt()
}

impl EncoderParams {
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Dimension(format!("expected {} arrays, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} has non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    /// Register every array on the tape as a trainable leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Forward pass on a tape with previously attached parameters.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.value(x).shape().to_vec();
        if s.len() != 3 || s[2] != cfg.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects B x T x {}, got {s:?}",
                cfg.in_channels
            )));
        }
        let mut h = tape.conv1d_dilated(x, vars[0], vars[1], 1)?;
        for i in 0..cfg.depth {
            let c = tape.conv1d_dilated(h, vars[2 + 2 * i], vars[3 + 2 * i], cfg.dilation(i))?;
            let c = tape.relu(c)?;
            h = tape.add(h, c)?;
        }
        let n = vars.len();
        tape.conv1d_dilated(h, vars[n - 2], vars[n - 1], 1)
    }

    /// Inference without gradients, processed in fixed-size batches.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 64;
        if x.rank() != 3 {
            return Err(Error::Dimension(format!("encoder expects B x T x c, got {:?}", x.shape())));
        }
        let b = x.dim(0);
        if b == 0 {
            return Ok(Tensor::zeros(&[0, x.dim(1), self.config.out_dim]));
        }
        let mut parts = Vec::new();
        for start in (0..b).step_by(CHUNK) {
            let len = CHUNK.min(b - start);
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
            let xv = tape.constant(x.narrow(0, start, len)?);
            let out = self.forward(&mut tape, &vars, xv)?;
            parts.push(tape.value(out).clone());
        }
        Tensor::stack_rows(&parts)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Apply `p <- p - update` elementwise for every array.
    pub fn apply(&mut self, updates: &[Tensor]) {
        for (p, u) in self.tensors.iter_mut().zip(updates) {
            for (a, b) in p.data_mut().iter_mut().zip(u.data()) {
                *a -= b;
            }
        }
    }
}

/// Convenience wrapper around [`EncoderParams::encode`].
pub fn encode(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    params.encode(x)
}

/// Embedding jitter, then whole-timestep masking, then per-timestep
/// normalization. Noise and masks enter the tape as constants.
pub fn transform_embeddings<R: Rng + ?Sized>(
    tape: &mut Tape,
    h: Var,
    strategy: &Strategy,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("embeddings must be B x T x d, got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let mut out = h;
    if strategy.emb_jitter_p > 0.0 {
        let noise: Vec<f64> = (0..b * t * d).map(|_| gaussian(rng, strategy.emb_jitter_p)).collect();
        let n = tape.constant(Tensor::new(shape.clone(), noise)?);
        out = tape.add(out, n)?;
    }
    if strategy.emb_mask_p > 0.0 {
        let mut mask = vec![1.0; b * t * d];
        for step in 0..b * t {
            if rng.random::<f64>() < strategy.emb_mask_p {
                mask[step * d..(step + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let m = tape.constant(Tensor::new(shape.clone(), mask)?);
        out = tape.mul(out, m)?;
    }
    match strategy.norm {
        Norm::None => {}
        Norm::Layer => {
            let gain = tape.constant(Tensor::full(&[d], 1.0));
            let offset = tape.constant(Tensor::zeros(&[d]));
            out = tape.layer_norm(out, gain, offset, LAYER_NORM_EPS)?;
        }
        Norm::L2 => out = tape.l2_normalize(out)?,
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny() -> EncoderConfig {
        EncoderConfig::new(2, 2, 4, 6)
    }

    fn random_input(b: usize, t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(vec![b, t, c], (0..b * t * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_encoder(&tiny(), 5).unwrap();
        let b = init_encoder(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_encoder(&tiny(), 6).unwrap());
    }

    #[test]
    fn standard_layout_shapes() {
        let cfg = EncoderConfig::standard(3);
        let p = init_encoder(&cfg, 0).unwrap();
        assert_eq!(p.tensors[0].shape(), &[1, 3, 64]);
        assert_eq!(p.tensors.len(), 2 + 2 * 10 + 2);
        for i in 0..10 {
            assert_eq!(p.tensors[2 + 2 * i].shape(), &[3, 64, 64]);
        }
        assert_eq!(p.tensors[22].shape(), &[1, 64, 320]);
        assert_eq!(p.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn weights_inside_glorot_bound() {
        let cfg = EncoderConfig::new(3, 3, 8, 5);
        let p = init_encoder(&cfg, 1).unwrap();
        for ((name, shape), t) in cfg.layout().iter().zip(&p.tensors) {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let a = glorot_bound(shape);
                assert!(t.data().iter().all(|v| v.abs() < a));
            }
        }
    }

    #[test]
    fn output_shape_and_channel_check() {
        let p = init_encoder(&tiny(), 0).unwrap();
        for t in [1, 2, 7] {
            let y = p.encode(&random_input(3, t, 2, 1)).unwrap();
            assert_eq!(y.shape(), &[3, t, 6]);
        }
        assert!(matches!(p.encode(&random_input(1, 4, 3, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_rows_give_identical_embeddings() {
        let p = init_encoder(&tiny(), 0).unwrap();
        let one = random_input(1, 9, 2, 4);
        let x = Tensor::stack_rows(&[one.clone(), random_input(1, 9, 2, 5), one]).unwrap();
        let y = p.encode(&x).unwrap();
        assert_eq!(y.narrow(0, 0, 1).unwrap(), y.narrow(0, 2, 1).unwrap());
    }

    #[test]
    fn batch_permutation_commutes() {
        let p = init_encoder(&tiny(), 2).unwrap();
        let x = random_input(4, 6, 2, 9);
        let y = p.encode(&x).unwrap();
        let perm = [2, 0, 3, 1];
        let yp = p.encode(&x.select_rows(&perm)).unwrap();
        assert!(yp.max_abs_diff(&y.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny();
        let params = init_encoder(&cfg, 3).unwrap();
        let x = random_input(2, 5, 2, 7);
        for k in 0..params.tensors.len() {
            let point = params.tensors[k].clone();
            let err = grad_check(
                |tape, v| {
                    let mut vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
                    vars[k] = v;
                    let xv = tape.constant(x.clone());
                    let y = params.forward(tape, &vars, xv)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "array {k}: {err}");
        }
    }

    #[test]
    fn disabled_transform_is_identity() {
        let mut tape = Tape::new();
        let h = random_input(2, 3, 4, 1);
        let v = tape.constant(h.clone());
        let out = transform_embeddings(&mut tape, v, &Strategy::default(), &mut seeded(0)).unwrap();
        assert_eq!(tape.value(out), &h);
    }

    #[test]
    fn l2_transform_gives_unit_rows() {
        let mut tape = Tape::new();
        let v = tape.constant(random_input(3, 5, 4, 2));
        let s = Strategy { norm: Norm::L2, ..Strategy::default() };
        let out = transform_embeddings(&mut tape, v, &s, &mut seeded(0)).unwrap();
        for row in tape.value(out).data().chunks(4) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_transform_hand_case() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let s = Strategy { norm: Norm::Layer, ..Strategy::default() };
        let out = transform_embeddings(&mut tape, v, &s, &mut seeded(0)).unwrap();
        let d = tape.value(out).data();
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mask_zeroes_whole_timesteps_after_jitter() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[4, 50, 3], 1.0));
        let s = Strategy { emb_jitter_p: 0.5, emb_mask_p: 0.5, ..Strategy::default() };
        let out = transform_embeddings(&mut tape, v, &s, &mut seeded(3)).unwrap();
        let mut masked = 0;
        for row in tape.value(out).data().chunks(3) {
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            assert!(zeros == 0 || zeros == 3);
            masked += usize::from(zeros == 3);
        }
        assert!(masked > 60 && masked < 140, "{masked}");
    }

    #[test]
    fn jitter_draws_are_independent_but_small_noise_keeps_peak() {
        let mut rng = seeded(11);
        let mut kept = 0;
        let trials = 200;
        for trial in 0..trials {
            let t = 32;
            let mut data = vec![0.0; t * 8];
            let peak = trial % t;
            for c in 0..8 {
                data[peak * 8 + c] = 1.0;
            }
            let h = Tensor::new(vec![1, t, 8], data).unwrap();
            let s = Strategy { emb_jitter_p: 0.1, ..Strategy::default() };
            let mut tape = Tape::new();
            let v = tape.constant(h.clone());
            let a = transform_embeddings(&mut tape, v, &s, &mut rng).unwrap();
            let b = transform_embeddings(&mut tape, v, &s, &mut rng).unwrap();
            assert_ne!(tape.value(a), tape.value(b));
            let means: Vec<f64> = tape.value(a).data().chunks(8).map(|r| r.iter().sum::<f64>() / 8.0).collect();
            let arg = (0..t).max_by(|&i, &j| means[i].total_cmp(&means[j])).unwrap();
            kept += usize::from(arg == peak);
        }
        assert!(kept as f64 >= 0.95 * trials as f64, "{kept}");
    }
}
