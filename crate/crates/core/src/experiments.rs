//! Desk-scale ablations of the search: reward filtering, one-epoch probes
//! versus full pretraining, augmentation-only search space, and transfer of
//! a composed strategy across the three synthetic tasks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{DatasetBundle, SynthSpec, TaskKind};
use crate::search::{
    compose_ggs, compute_reward, default_epsilon, evaluate_candidates, evaluate_strategy, search_dataset, write_trace,
    GgsOutcome, ProbeMode, ScoredStrategy, SearchConfig, SearchOutcome, StepRecord,
};
use crate::encoder::EncoderParams;
use crate::space::{Norm, SearchSpace, Strategy};

/// Shared settings of every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub search: SearchConfig,
    /// Classification data used by the ablations.
    pub data: SynthSpec,
    /// Data of the three tasks used by the transfer experiment.
    pub transfer_data: [SynthSpec; 3],
    /// Candidates per task passed to the composition.
    pub topk: usize,
    pub drop_threshold: f64,
    /// Traces are written below this directory when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig {
                max_iters: 50,
                pretrain_iters: 10,
                controller_lr: 0.01,
                encoder: crate::search::EncoderShape { depth: 4, hidden: 16, out_dim: 32 },
                ..SearchConfig::default()
            },
            data: SynthSpec::Classification { n_per_class: 60, t: 128, n_classes: 3, noise: 1.5 },
            transfer_data: [
                SynthSpec::Classification { n_per_class: 60, t: 128, n_classes: 3, noise: 1.5 },
                SynthSpec::Forecast { t_total: 1000, noisy: true },
                SynthSpec::Anomaly { t_total: 4000, rate: 0.02, noisy: true },
            ],
            topk: 3,
            drop_threshold: 0.01,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Generate and split one synthetic dataset.
    pub fn bundle(&self, spec: &SynthSpec, seed: u64) -> Result<DatasetBundle> {
        let task = spec.task();
        DatasetBundle::from_raw(spec.generate(seed)?, task, task.default_ratios(), seed)
    }

    /// Search settings for one task and seed.
    pub fn search_config(&self, task: TaskKind, seed: u64) -> SearchConfig {
        SearchConfig { seed, eval_seed: seed, epsilon: default_epsilon(task), ..self.search.clone() }
    }

    fn trace_path(&self, id: &str, arm: &str, seed: u64) -> Result<Option<PathBuf>> {
        let Some(root) = &self.out_dir else { return Ok(None) };
        let dir = root.join(id).join(arm);
        std::fs::create_dir_all(&dir)?;
        Ok(Some(dir.join(format!("seed-{seed}.jsonl"))))
    }
}

/// One seed of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metric: f64,
    pub running_max: Vec<f64>,
    pub accepted: usize,
    pub candidates: usize,
    pub wall_secs: f64,
    pub trace_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub config_hash: String,
    pub metric: String,
    pub per_seed: Vec<SeedResult>,
    pub mean_metric: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub arms: Vec<ArmReport>,
    pub verdicts: BTreeMap<String, bool>,
    pub values: BTreeMap<String, f64>,
    pub details: serde_json::Value,
}

impl ExperimentReport {
    /// The experiment's headline verdict.
    pub fn verdict(&self) -> bool {
        self.verdicts.get("verdict").copied().unwrap_or(false)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn running_max(trace: &[StepRecord]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::NEG_INFINITY, |m, r| {
            *m = m.max(r.raw_reward);
            Some(*m)
        })
        .collect()
}

fn seed_result(
    cfg: &ExperimentConfig,
    id: &str,
    arm: &str,
    seed: u64,
    outcome: &SearchOutcome<EncoderParams>,
    metric: f64,
    wall_secs: f64,
) -> Result<SeedResult> {
    let trace_path = cfg.trace_path(id, arm, seed)?;
    if let Some(p) = &trace_path {
        write_trace(p, &outcome.trace)?;
    }
    Ok(SeedResult {
        seed,
        metric,
        running_max: running_max(&outcome.trace),
        accepted: outcome.trace.iter().filter(|r| r.accepted).count(),
        candidates: outcome.state.candidates.len(),
        wall_secs,
        trace_path: trace_path.map(|p| p.display().to_string()),
    })
}

fn arm(name: &str, metric: &str, config: &SearchConfig, per_seed: Vec<SeedResult>) -> ArmReport {
    let mean_metric = per_seed.iter().map(|s| s.metric).sum::<f64>() / per_seed.len().max(1) as f64;
    let wall_secs = per_seed.iter().map(|s| s.wall_secs).sum();
    ArmReport { name: name.into(), config_hash: config.hash(), metric: metric.into(), per_seed, mean_metric, wall_secs }
}

fn require_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::Config(format!("experiment needs at least {min} seeds, got {}", seeds.len())));
    }
    Ok(())
}

/// Filtered versus unfiltered candidate search. The per-seed metric is the
/// validation ACC of each arm's final phase-1 encoder.
pub fn run_filter_ablation(seeds: &[u64], cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_seeds(seeds, 5)?;
    let id = "filter";
    let mut arms = Vec::new();
    let mut monotone = true;
    for (name, filter) in [("filtered", true), ("unfiltered", false)] {
        let mut per_seed = Vec::new();
        let mut arm_cfg = None;
        for &seed in seeds {
            let bundle = cfg.bundle(&cfg.data, seed)?;
            let sc = SearchConfig { reward_filter: filter, ..cfg.search_config(bundle.task, seed) };
            let start = Instant::now();
            let out = search_dataset(&bundle, &SearchSpace::full(), &sc)?;
            let metric = compute_reward(&out.state.model, &bundle, &sc.train)?;
            let r = seed_result(cfg, id, name, seed, &out, metric, start.elapsed().as_secs_f64())?;
            if filter {
                monotone &= r.running_max.windows(2).all(|w| w[1] >= w[0]);
            }
            per_seed.push(r);
            arm_cfg = Some(sc);
        }
        arms.push(arm(name, "final_encoder_val_acc", &arm_cfg.expect("seeds"), per_seed));
    }
    let (f, u) = (arms[0].mean_metric, arms[1].mean_metric);
    let mut verdicts = BTreeMap::new();
    verdicts.insert("verdict".into(), f > u);
    verdicts.insert("filtered_running_max_monotone".into(), monotone);
    let values = BTreeMap::from([("filtered_mean".into(), f), ("unfiltered_mean".into(), u)]);
    Ok(ExperimentReport {
        id: id.into(),
        seeds: seeds.to_vec(),
        config_hash: cfg.hash(),
        arms,
        verdicts,
        values,
        details: serde_json::Value::Null,
    })
}

/// One-epoch probes versus full-pretrain probes at equal iteration count.
/// The verdict compares phase-1 wall-clock; the end-to-end ratio including
/// phase 2 of the one-epoch arm is reported alongside.
pub fn run_speed_ablation(iters: usize, seed: u64, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if iters < 50 {
        return Err(Error::Config(format!("speed ablation needs at least 50 iterations, got {iters}")));
    }
    let id = "speed";
    let bundle = cfg.bundle(&cfg.data, seed)?;
    let base = SearchConfig { max_iters: iters, ..cfg.search_config(bundle.task, seed) };
    let mut arms = Vec::new();
    let mut phase2_secs = 0.0;
    for (name, mode) in
        [("one_epoch", ProbeMode::OneEpoch), ("full_pretrain", ProbeMode::FullPretrain { epochs: base.pretrain_iters })]
    {
        let sc = SearchConfig { probe: mode, ..base.clone() };
        let start = Instant::now();
        let out = search_dataset(&bundle, &SearchSpace::full(), &sc)?;
        let secs = start.elapsed().as_secs_f64();
        if mode == ProbeMode::OneEpoch && !out.state.candidates.is_empty() {
            let cands: Vec<Strategy> = out.state.candidates.iter().map(|c| c.strategy.clone()).collect();
            phase2_secs = evaluate_candidates(&cands, &bundle, &sc)?.wall_secs;
        }
        let r = seed_result(cfg, id, name, seed, &out, out.state.r_star.unwrap_or(f64::NAN), secs)?;
        arms.push(arm(name, "best_val_acc", &sc, vec![r]));
    }
    let (fast, slow) = (arms[0].wall_secs, arms[1].wall_secs);
    let speedup = slow / fast;
    let mut verdicts = BTreeMap::new();
    verdicts.insert("verdict".into(), speedup >= 5.0);
    verdicts.insert("both_arms_have_candidates".into(), arms.iter().all(|a| a.per_seed[0].candidates > 0));
    let values = BTreeMap::from([
        ("one_epoch_secs".into(), fast),
        ("full_pretrain_secs".into(), slow),
        ("phase1_speedup".into(), speedup),
        ("phase2_secs".into(), phase2_secs),
        ("end_to_end_speedup".into(), slow / (fast + phase2_secs)),
    ]);
    Ok(ExperimentReport {
        id: id.into(),
        seeds: vec![seed],
        config_hash: cfg.hash(),
        arms,
        verdicts,
        values,
        details: serde_json::Value::Null,
    })
}

/// Full search space versus augmentation branches only. The per-seed metric
/// is the best validation ACC found by phase 1.
pub fn run_space_ablation(seeds: &[u64], cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_seeds(seeds, 5)?;
    let id = "space";
    let mut arms = Vec::new();
    let mut restricted_ok = true;
    for (name, space) in [("full", SearchSpace::full()), ("data_aug_only", SearchSpace::augmentation_only())] {
        let mut per_seed = Vec::new();
        let mut arm_cfg = None;
        for &seed in seeds {
            let bundle = cfg.bundle(&cfg.data, seed)?;
            let sc = cfg.search_config(bundle.task, seed);
            let start = Instant::now();
            let out = search_dataset(&bundle, &space, &sc)?;
            if name == "data_aug_only" {
                restricted_ok &= out.trace.iter().all(|r| r.strategy.norm == Norm::None && space.contains(&r.strategy));
            }
            let metric = out.state.r_star.unwrap_or(f64::NAN);
            per_seed.push(seed_result(cfg, id, name, seed, &out, metric, start.elapsed().as_secs_f64())?);
            arm_cfg = Some(sc);
        }
        arms.push(arm(name, "best_val_acc", &arm_cfg.expect("seeds"), per_seed));
    }
    let deltas: Vec<f64> = arms[0].per_seed.iter().zip(&arms[1].per_seed).map(|(a, b)| a.metric - b.metric).collect();
    let mut verdicts = BTreeMap::new();
    verdicts.insert("verdict".into(), arms[0].mean_metric > arms[1].mean_metric);
    verdicts.insert("restriction_enforced".into(), restricted_ok);
    let values = BTreeMap::from([("full_mean".into(), arms[0].mean_metric), ("data_aug_only_mean".into(), arms[1].mean_metric)]);
    Ok(ExperimentReport {
        id: id.into(),
        seeds: seeds.to_vec(),
        config_hash: cfg.hash(),
        arms,
        verdicts,
        values,
        details: serde_json::json!({ "per_seed_delta": deltas }),
    })
}

/// Search each synthetic task, compose a strategy from the three top-k
/// lists, and compare its validation score on every task with that task's
/// own top candidate.
pub fn run_ggs_transfer(seed: u64, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let id = "ggs_transfer";
    let mut bundles = Vec::new();
    let mut configs = Vec::new();
    let mut sets = Vec::new();
    let mut arms = Vec::new();
    for spec in &cfg.transfer_data {
        let bundle = cfg.bundle(spec, seed)?;
        let sc = cfg.search_config(bundle.task, seed);
        let start = Instant::now();
        let out = search_dataset(&bundle, &SearchSpace::full(), &sc)?;
        let cands: Vec<Strategy> = out.ranked_candidates().into_iter().map(|c| c.strategy).collect();
        let cands = if cands.is_empty() { vec![Strategy::ggs()] } else { cands };
        let ev = evaluate_candidates(&cands, &bundle, &sc)?;
        let top: Vec<ScoredStrategy> = ev
            .ranked
            .iter()
            .take(cfg.topk)
            .map(|c| ScoredStrategy { strategy: c.strategy.clone(), score: c.val_score })
            .collect();
        if top.is_empty() {
            return Err(Error::Numeric(format!("every candidate failed on {}", bundle.task)));
        }
        let best = top[0].score;
        let r = seed_result(cfg, id, bundle.task.name(), seed, &out, best, start.elapsed().as_secs_f64())?;
        arms.push(arm(bundle.task.name(), "top1_val_score", &sc, vec![r]));
        sets.push(top);
        bundles.push(bundle);
        configs.push(sc);
    }
    let outcome: GgsOutcome = compose_ggs(&sets, cfg.drop_threshold, |s| {
        bundles.iter().zip(&configs).map(|(b, c)| Ok(evaluate_strategy(s, b, c)?.val.score())).collect()
    })?;
    let ggs_scores: Vec<f64> = bundles
        .iter()
        .zip(&configs)
        .map(|(b, c)| Ok(evaluate_strategy(&outcome.strategy, b, c)?.val.score()))
        .collect::<Result<_>>()?;
    let mut values = BTreeMap::new();
    let mut within = true;
    for ((b, set), g) in bundles.iter().zip(&sets).zip(&ggs_scores) {
        values.insert(format!("{}_top1", b.task), set[0].score);
        values.insert(format!("{}_ggs", b.task), *g);
        within &= set[0].score - g <= cfg.drop_threshold;
    }
    let mut verdicts = BTreeMap::new();
    verdicts.insert("verdict".into(), within);
    Ok(ExperimentReport {
        id: id.into(),
        seeds: vec![seed],
        config_hash: cfg.hash(),
        arms,
        verdicts,
        values,
        details: serde_json::to_value(&outcome)?,
    })
}

/// Write a report as pretty JSON.
pub fn save_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
