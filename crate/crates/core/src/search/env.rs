//! Probe environments: what a phase-1 step trains and how it is rewarded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::pipeline::{compute_reward, pretrain_epoch, pretraining_inputs, worst_reward, Optimizer, TrainConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::harness::DatasetBundle;
use crate::optim::{Adam, Sgd};
use crate::rng::Prng;
use crate::space::Strategy;

/// Outcome of training a copy of the model under one strategy.
#[derive(Clone, Debug)]
pub struct Probe<M> {
    pub model: M,
    pub reward: f64,
    /// Why the strategy received the worst reward, if it did.
    pub failure: Option<String>,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// A model plus a reward signal for the candidate search.
pub trait Environment {
    type Model: Clone;

    /// Train a copy of `model` under `strategy` and score it. The input
    /// model must not be modified.
    fn probe(&self, model: &Self::Model, strategy: &Strategy, rng: &mut Prng) -> Result<Probe<Self::Model>>;
}

/// How much training a phase-1 probe performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// One SGD epoch on the copied encoder.
    OneEpoch,
    /// `epochs` Adam epochs, as a full pretraining run would do.
    FullPretrain { epochs: usize },
}

/// Contrastive pretraining of an encoder on a dataset, rewarded by the
/// downstream validation metric.
pub struct ContrastiveEnv<'a> {
    pub bundle: &'a DatasetBundle,
    pub train: TrainConfig,
    pub mode: ProbeMode,
    /// SGD learning rate of the one-epoch probe.
    pub encoder_lr: f64,
    /// Adam learning rate of full-pretrain probes.
    pub pretrain_lr: f64,
}

impl ContrastiveEnv<'_> {
    fn train_copy(&self, model: &EncoderParams, strategy: &Strategy, rng: &mut Prng) -> Result<EncoderParams> {
        let mut params = model.clone();
        let (mut optimizer, epochs) = match self.mode {
            ProbeMode::OneEpoch => (Optimizer::Sgd(Sgd::new(self.encoder_lr)), 1),
            ProbeMode::FullPretrain { epochs } => (Optimizer::Adam(Adam::new(self.pretrain_lr)), epochs),
        };
        for _ in 0..epochs {
            let data = pretraining_inputs(self.bundle, &self.train, rng)?;
            pretrain_epoch(&mut params, &data, strategy, &mut optimizer, self.train.batch_size, rng)?;
        }
        Ok(params)
    }
}

impl Environment for ContrastiveEnv<'_> {
    type Model = EncoderParams;

    fn probe(&self, model: &EncoderParams, strategy: &Strategy, rng: &mut Prng) -> Result<Probe<EncoderParams>> {
        let worst = worst_reward(self.bundle.task);
        let start = Instant::now();
        let trained = match self.train_copy(model, strategy, rng) {
            Ok(p) => p,
            Err(e @ (Error::Numeric(_) | Error::NoContrastTerms)) => {
                return Ok(Probe {
                    model: model.clone(),
                    reward: worst,
                    failure: Some(e.to_string()),
                    train_secs: start.elapsed().as_secs_f64(),
                    eval_secs: 0.0,
                })
            }
            Err(e) => return Err(e),
        };
        let train_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let (reward, failure) = match compute_reward(&trained, self.bundle, &self.train) {
            Ok(r) => (r, None),
            Err(e @ Error::Numeric(_)) => (worst, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(Probe { model: trained, reward, failure, train_secs, eval_secs: start.elapsed().as_secs_f64() })
    }
}

/// Model-free environment whose reward is a fixed function of the strategy;
/// used to exercise the controller and the filtering logic.
pub struct FnEnv<F: Fn(&Strategy) -> f64> {
    pub reward: F,
}

impl<F: Fn(&Strategy) -> f64> Environment for FnEnv<F> {
    /// Number of accepted updates the "model" has absorbed.
    type Model = u64;

    fn probe(&self, model: &u64, strategy: &Strategy, _rng: &mut Prng) -> Result<Probe<u64>> {
        Ok(Probe { model: model + 1, reward: (self.reward)(strategy), failure: None, train_secs: 0.0, eval_secs: 0.0 })
    }
}
