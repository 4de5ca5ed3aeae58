//! Phase 2: full pretraining of every candidate, ranking by validation
//! score, and the cost model of both phases.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::pipeline::{evaluate_split, pretrain, EvalSplit, TaskMetrics};
use super::{SearchConfig, StepTiming};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::harness::DatasetBundle;
use crate::rng::{derive, mix, seeded};
use crate::space::Strategy;

/// Seed of a strategy's phase-2 run. It depends only on the evaluation seed
/// and the strategy, so a strategy scores the same wherever it appears in a
/// candidate list.
pub fn strategy_seed(eval_seed: u64, strategy: &Strategy) -> Result<u64> {
    let code = strategy.encode()?;
    let key = code.iter().fold(0u64, |h, &i| mix(h ^ i as u64));
    Ok(derive(eval_seed, "candidate", key))
}

/// A fully pretrained encoder with its validation metrics.
#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub params: EncoderParams,
    pub val: TaskMetrics,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Fresh encoder, `config.pretrain_iters` Adam epochs under `strategy`,
/// then downstream validation.
pub fn evaluate_strategy(strategy: &Strategy, bundle: &DatasetBundle, config: &SearchConfig) -> Result<StrategyRun> {
    let seed = strategy_seed(config.eval_seed, strategy)?;
    let mut params = init_encoder(&config.encoder.config(bundle.channels()), derive(seed, "init", 0))?;
    let mut rng = seeded(derive(seed, "train", 0));
    let start = Instant::now();
    pretrain(&mut params, bundle, strategy, config.pretrain_iters, config.pretrain_lr, &config.train, &mut rng)?;
    let train_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let val = evaluate_split(&params, bundle, &config.train, EvalSplit::Val)?;
    Ok(StrategyRun { params, val, train_secs, eval_secs: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Position in the input candidate list.
    pub index: usize,
    pub strategy: Strategy,
    pub val_score: f64,
    /// Recorded for the top-ranked entry only.
    pub test_score: Option<f64>,
    pub val_metrics: TaskMetrics,
    pub test_metrics: Option<TaskMetrics>,
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub index: usize,
    pub strategy: Strategy,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Sorted by validation score, best first; ties keep input order.
    pub ranked: Vec<CandidateScore>,
    pub failed: Vec<FailedCandidate>,
    /// Encoder of the top-ranked candidate.
    pub best_params: Option<EncoderParams>,
    pub wall_secs: f64,
}

/// Pretrain and score every candidate on `config.workers` threads. Worker
/// `w` takes candidates `w, w + K, ...`; results are merged by index, so the
/// outcome does not depend on scheduling.
pub fn evaluate_candidates(candidates: &[Strategy], bundle: &DatasetBundle, config: &SearchConfig) -> Result<Evaluation> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidates to evaluate".into()));
    }
    config.validate()?;
    let start = Instant::now();
    let k = config.workers.min(candidates.len());
    let mut results: Vec<Option<std::result::Result<StrategyRun, String>>> = vec![None; candidates.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .map(|w| {
                scope.spawn(move || {
                    (w..candidates.len())
                        .step_by(k)
                        .map(|i| (i, evaluate_strategy(&candidates[i], bundle, config).map_err(|e| e.to_string())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            if let Ok(done) = handle.join() {
                for (i, r) in done {
                    results[i] = Some(r);
                }
            }
        }
    });
    let mut ranked = Vec::new();
    let mut failed = Vec::new();
    let mut params = Vec::new();
    for (index, result) in results.into_iter().enumerate() {
        let strategy = candidates[index].clone();
        match result {
            Some(Ok(run)) => {
                ranked.push(CandidateScore {
                    index,
                    strategy,
                    val_score: run.val.score(),
                    test_score: None,
                    val_metrics: run.val,
                    test_metrics: None,
                    train_secs: run.train_secs,
                    eval_secs: run.eval_secs,
                });
                params.push(Some(run.params));
            }
            Some(Err(error)) => failed.push(FailedCandidate { index, strategy, error }),
            None => failed.push(FailedCandidate { index, strategy, error: "worker panicked".into() }),
        }
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].val_score.total_cmp(&ranked[a].val_score).then(a.cmp(&b)));
    let mut best_params = None;
    if let Some(&top) = order.first() {
        let p = params[top].take().expect("params stored for every ranked candidate");
        let test = evaluate_split(&p, bundle, &config.train, EvalSplit::Test)?;
        ranked[top].test_score = Some(test.score());
        ranked[top].test_metrics = Some(test);
        best_params = Some(p);
    }
    let mut slots: Vec<Option<CandidateScore>> = ranked.into_iter().map(Some).collect();
    let ranked = order.into_iter().map(|i| slots[i].take().expect("each index used once")).collect();
    Ok(Evaluation { ranked, failed, best_params, wall_secs: start.elapsed().as_secs_f64() })
}

/// Measured cost of both phases against the `N (T_t + T_v)` and
/// `ceil(|A| / K) (M T_t + T_v)` models, with `T_t` and `T_v` the mean
/// one-epoch training and evaluation times measured in phase 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub steps: usize,
    pub mean_train_secs: f64,
    pub mean_eval_secs: f64,
    pub phase1_measured_secs: f64,
    pub phase1_model_secs: f64,
    pub candidates: usize,
    /// Workers that can actually run at once (capped by available cores).
    pub effective_workers: usize,
    pub pretrain_iters: usize,
    pub phase2_measured_secs: Option<f64>,
    pub phase2_model_secs: f64,
}

impl ComplexityReport {
    pub fn phase1_ratio(&self) -> f64 {
        self.phase1_measured_secs / self.phase1_model_secs
    }

    pub fn phase2_ratio(&self) -> Option<f64> {
        self.phase2_measured_secs.map(|m| m / self.phase2_model_secs)
    }
}

pub fn complexity_report(
    timings: &[StepTiming],
    phase1_measured_secs: f64,
    candidates: usize,
    workers: usize,
    pretrain_iters: usize,
    phase2_measured_secs: Option<f64>,
) -> ComplexityReport {
    let n = timings.len().max(1) as f64;
    let mean_train_secs = timings.iter().map(|t| t.train_secs).sum::<f64>() / n;
    let mean_eval_secs = timings.iter().map(|t| t.eval_secs).sum::<f64>() / n;
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let effective_workers = workers.min(cores).max(1);
    let rounds = candidates.div_ceil(effective_workers) as f64;
    ComplexityReport {
        steps: timings.len(),
        mean_train_secs,
        mean_eval_secs,
        phase1_measured_secs,
        phase1_model_secs: timings.len() as f64 * (mean_train_secs + mean_eval_secs),
        candidates,
        effective_workers,
        pretrain_iters,
        phase2_measured_secs,
        phase2_model_secs: rounds * (pretrain_iters as f64 * mean_train_secs + mean_eval_secs),
    }
}
