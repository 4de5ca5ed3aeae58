//! Two-phase strategy search: cheap one-epoch probes steered by the
//! controller with reward filtering (phase 1), then full pretraining and
//! ranking of the collected candidates (phase 2), plus composition of a
//! transferable strategy from several tasks' top candidates.

mod env;
mod evaluation;
mod ggs;
mod pipeline;

pub use env::{ContrastiveEnv, Environment, FnEnv, Probe, ProbeMode};
pub use evaluation::{
    complexity_report, evaluate_candidates, evaluate_strategy, strategy_seed, CandidateScore, ComplexityReport,
    Evaluation, FailedCandidate, StrategyRun,
};
pub use ggs::{compose_ggs, GgsDecision, GgsOutcome, ScoredStrategy, MAX_GGS_TOPK};
pub use pipeline::{
    anomaly_scores, compute_reward, evaluate_split, pretrain, pretrain_epoch, pretraining_inputs, window_embeddings,
    worst_reward, EpochStats, EvalSplit, Optimizer, TaskMetrics, TrainConfig, FORECAST_WORST,
};

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{init_controller, reinforce_update, sample_strategy, ControllerParams, DEFAULT_DIM};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::harness::{DatasetBundle, TaskKind};
use crate::rng::{derive, seeded, Prng};
use crate::space::{SearchSpace, Strategy};

/// Encoder size; the input channel count comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub depth: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self { depth: 10, hidden: 64, out_dim: 320 }
    }
}

impl EncoderShape {
    pub fn config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig::new(in_channels, self.depth, self.hidden, self.out_dim)
    }
}

/// Reward filtering constant for a task.
pub fn default_epsilon(task: TaskKind) -> f64 {
    match task {
        TaskKind::Classification | TaskKind::Anomaly => 0.001,
        TaskKind::Forecast => 0.0001,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Reward scale.
    pub alpha: f64,
    /// Tolerance added to the reward gap before filtering.
    pub epsilon: f64,
    /// Number of phase-1 steps.
    pub max_iters: usize,
    /// SGD learning rate of the one-epoch probe.
    pub encoder_lr: f64,
    pub controller_lr: f64,
    /// Adam learning rate of full pretraining.
    pub pretrain_lr: f64,
    /// Pretraining epochs per candidate in phase 2.
    pub pretrain_iters: usize,
    /// Parallel workers in phase 2.
    pub workers: usize,
    pub seed: u64,
    /// Seed of phase-2 initialisation and training streams.
    pub eval_seed: u64,
    pub controller_dim: usize,
    /// When false every probe is accepted and `delta = alpha * R`.
    pub reward_filter: bool,
    pub probe: ProbeMode,
    pub encoder: EncoderShape,
    pub train: TrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            epsilon: 0.001,
            max_iters: 500,
            encoder_lr: 0.001,
            controller_lr: 0.0001,
            pretrain_lr: 0.001,
            pretrain_iters: 20,
            workers: 1,
            seed: 0,
            eval_seed: 0,
            controller_dim: DEFAULT_DIM,
            reward_filter: true,
            probe: ProbeMode::OneEpoch,
            encoder: EncoderShape::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Defaults with the task's filtering constant.
    pub fn for_task(task: TaskKind) -> Self {
        Self { epsilon: default_epsilon(task), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("alpha and epsilon must be > 0, got {} and {}", self.alpha, self.epsilon)));
        }
        if !(self.encoder_lr > 0.0) || !(self.controller_lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.workers == 0 || self.controller_dim == 0 {
            return Err(Error::Config("workers and controller_dim must be >= 1".into()));
        }
        self.train.validate()?;
        self.encoder.config(1).validate()
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An accepted strategy with its best raw reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub strategy: Strategy,
    pub reward: f64,
    pub step: usize,
}

/// One line of the search trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub strategy: Strategy,
    pub raw_reward: f64,
    pub delta: f64,
    pub accepted: bool,
    pub wallclock_ms: u64,
}

/// Time split of one phase-1 step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Everything phase 1 carries from step to step.
#[derive(Clone, Debug)]
pub struct SearchState<M> {
    pub controller: ControllerParams,
    pub model: M,
    /// Best raw reward seen so far; `None` before the first step.
    pub r_star: Option<f64>,
    /// Number of completed steps.
    pub step: usize,
    pub candidates: Vec<Candidate>,
    sample_rng: Prng,
}

impl<M> SearchState<M> {
    pub fn new(space: &SearchSpace, model: M, config: &SearchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            controller: init_controller(&space.widths(), config.controller_dim, derive(config.seed, "controller", 0))?,
            model,
            r_star: None,
            step: 0,
            candidates: Vec::new(),
            sample_rng: seeded(derive(config.seed, "sample", 0)),
        })
    }

    fn add_candidate(&mut self, strategy: &Strategy, reward: f64) -> Result<()> {
        let key = strategy.encode()?;
        for c in &mut self.candidates {
            if c.strategy.encode()? == key {
                if reward > c.reward {
                    c.reward = reward;
                    c.step = self.step;
                }
                return Ok(());
            }
        }
        self.candidates.push(Candidate { strategy: strategy.clone(), reward, step: self.step });
        Ok(())
    }
}

/// The filtered reward `alpha * (R - R* + epsilon)`.
pub fn filtered_delta(reward: f64, r_star: f64, alpha: f64, epsilon: f64) -> f64 {
    alpha * (reward - r_star + epsilon)
}

/// Sample a strategy, probe it on a copy of the model, update the
/// controller with the filtered reward, and keep the trained copy only when
/// the reward passes the filter.
pub fn phase1_step<E: Environment>(
    state: &mut SearchState<E::Model>,
    env: &E,
    space: &SearchSpace,
    config: &SearchConfig,
) -> Result<(StepRecord, StepTiming)> {
    let start = Instant::now();
    let step = state.step + 1;
    let sample = sample_strategy(&state.controller, space, &mut state.sample_rng)?;
    let mut probe_rng = seeded(derive(config.seed, "probe", step as u64));
    let probe = env.probe(&state.model, &sample.strategy, &mut probe_rng)?;
    if let Some(why) = &probe.failure {
        log::warn!("step {step}: strategy assigned the worst reward ({why})");
    }
    let reward = probe.reward;
    let delta = if config.reward_filter {
        filtered_delta(reward, state.r_star.unwrap_or(reward), config.alpha, config.epsilon)
    } else {
        config.alpha * reward
    };
    reinforce_update(&mut state.controller, &sample, delta, config.controller_lr)?;
    let accepted = !config.reward_filter || delta > 0.0;
    state.step = step;
    if accepted {
        state.model = probe.model;
        state.add_candidate(&sample.strategy, reward)?;
    }
    state.r_star = Some(state.r_star.map_or(reward, |r| r.max(reward)));
    let record = StepRecord {
        step,
        strategy: sample.strategy,
        raw_reward: reward,
        delta,
        accepted,
        wallclock_ms: start.elapsed().as_millis() as u64,
    };
    Ok((record, StepTiming { train_secs: probe.train_secs, eval_secs: probe.eval_secs }))
}

/// Result of a full phase-1 run.
#[derive(Clone, Debug)]
pub struct SearchOutcome<M> {
    pub state: SearchState<M>,
    pub trace: Vec<StepRecord>,
    pub timings: Vec<StepTiming>,
    pub wall_secs: f64,
}

impl<M> SearchOutcome<M> {
    /// Candidates sorted by reward, best first (ties keep discovery order).
    pub fn ranked_candidates(&self) -> Vec<Candidate> {
        let mut c = self.state.candidates.clone();
        c.sort_by(|a, b| b.reward.total_cmp(&a.reward));
        c
    }

    /// Running maximum of the raw reward after each step.
    pub fn running_max(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::NEG_INFINITY, |m, r| {
                *m = m.max(r.raw_reward);
                Some(*m)
            })
            .collect()
    }
}

/// Run `config.max_iters` phase-1 steps from `model`.
pub fn run_candidate_search<E: Environment>(
    env: &E,
    model: E::Model,
    space: &SearchSpace,
    config: &SearchConfig,
) -> Result<SearchOutcome<E::Model>> {
    let start = Instant::now();
    let mut state = SearchState::new(space, model, config)?;
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut timings = Vec::with_capacity(config.max_iters);
    for _ in 0..config.max_iters {
        let (record, timing) = phase1_step(&mut state, env, space, config)?;
        log::debug!("step {} reward {:.4} delta {:.4} accepted {}", record.step, record.raw_reward, record.delta, record.accepted);
        trace.push(record);
        timings.push(timing);
    }
    if state.candidates.is_empty() {
        log::warn!("candidate search finished without any accepted strategy");
    }
    Ok(SearchOutcome { state, trace, timings, wall_secs: start.elapsed().as_secs_f64() })
}

/// Fresh encoder for a dataset, seeded from the search seed.
pub fn initial_encoder(bundle: &DatasetBundle, config: &SearchConfig) -> Result<EncoderParams> {
    init_encoder(&config.encoder.config(bundle.channels()), derive(config.seed, "encoder", 0))
}

/// Phase 1 on a dataset with contrastive probes.
pub fn search_dataset(bundle: &DatasetBundle, space: &SearchSpace, config: &SearchConfig) -> Result<SearchOutcome<EncoderParams>> {
    let env = ContrastiveEnv {
        bundle,
        train: config.train.clone(),
        mode: config.probe,
        encoder_lr: config.encoder_lr,
        pretrain_lr: config.pretrain_lr,
    };
    run_candidate_search(&env, initial_encoder(bundle, config)?, space, config)
}

/// Write the trace as JSON lines.
pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests;
