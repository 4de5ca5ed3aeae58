use std::cell::RefCell;
use std::collections::VecDeque;

use super::*;
use crate::harness::{synth_anomaly, synth_classification, synth_forecast};
use crate::space::{Branch, Norm, Sim, TEMPERATURES};

/// Returns queued rewards in order, regardless of the strategy.
struct QueueEnv(RefCell<VecDeque<f64>>);

impl Environment for QueueEnv {
    type Model = u64;

    fn probe(&self, model: &u64, _: &Strategy, _: &mut Prng) -> Result<Probe<u64>> {
        let reward = self.0.borrow_mut().pop_front().expect("queued reward");
        Ok(Probe { model: model + 1, reward, failure: None, train_secs: 0.0, eval_secs: 0.0 })
    }
}

fn small_config() -> SearchConfig {
    SearchConfig {
        controller_dim: 16,
        encoder: EncoderShape { depth: 2, hidden: 8, out_dim: 8 },
        train: TrainConfig { batch_size: 8, horizon: 8, ..TrainConfig::default() },
        ..SearchConfig::default()
    }
}

#[test]
fn filtered_delta_arithmetic() {
    assert!((filtered_delta(0.85, 0.80, 10.0, 0.001) - 0.51).abs() < 1e-12);
    assert!((filtered_delta(0.80, 0.80, 10.0, 0.001) - 0.01).abs() < 1e-12);
    assert!((filtered_delta(0.70, 0.80, 10.0, 0.001) + 0.99).abs() < 1e-12);
}

#[test]
fn phase1_examples_accept_tie_and_reject() {
    let space = SearchSpace::full();
    let cfg = SearchConfig { controller_dim: 16, ..SearchConfig::default() };
    let env = QueueEnv(RefCell::new(VecDeque::from([0.80, 0.85, 0.85, 0.70])));
    let mut state = SearchState::new(&space, 0u64, &cfg).unwrap();

    let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
    assert!(r.accepted && (r.delta - 0.01).abs() < 1e-12, "first step uses R* = R1");
    assert_eq!((state.model, state.candidates.len(), state.r_star), (1, 1, Some(0.80)));

    let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
    assert!(r.accepted && (r.delta - 0.51).abs() < 1e-12);
    assert_eq!((state.model, state.r_star), (2, Some(0.85)));

    let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
    assert!(r.accepted && (r.delta - 0.01).abs() < 1e-12, "ties plus epsilon are accepted");

    let before = (state.model, state.candidates.clone(), state.r_star);
    let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
    assert!(!r.accepted && (r.delta + 1.49).abs() < 1e-12);
    assert_eq!((state.model, state.candidates.clone(), state.r_star), before);
    assert_eq!(state.step, 4);
}

#[test]
fn rejected_probe_leaves_encoder_bit_identical() {
    let bundle = synth_classification(8, 32, 2, 0.3, 1).unwrap();
    let cfg = small_config();
    let space = SearchSpace::full();
    let env = ContrastiveEnv { bundle: &bundle, train: cfg.train.clone(), mode: ProbeMode::OneEpoch, encoder_lr: 0.05, pretrain_lr: 1e-3 };
    let model = initial_encoder(&bundle, &cfg).unwrap();
    let mut state = SearchState::new(&space, model.clone(), &cfg).unwrap();
    state.r_star = Some(2.0);
    let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
    assert!(!r.accepted);
    let bits = |p: &EncoderParams| p.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<u64>>();
    assert_eq!(bits(&state.model), bits(&model));
    assert!(state.candidates.is_empty());

    state.r_star = Some(-1.0);
    let mut accepted = false;
    for _ in 0..5 {
        let (r, _) = phase1_step(&mut state, &env, &space, &cfg).unwrap();
        if r.accepted && r.raw_reward > 0.0 {
            accepted = true;
            break;
        }
    }
    assert!(accepted);
    assert_ne!(bits(&state.model), bits(&model));
}

#[test]
fn running_max_is_monotone_and_candidates_bounded() {
    let space = SearchSpace::full();
    let cfg = SearchConfig { max_iters: 200, controller_dim: 16, controller_lr: 0.01, ..SearchConfig::default() };
    let env = FnEnv { reward: |s: &Strategy| s.jitter_p - (s.temperature.ln()).abs() * 0.01 };
    let out = run_candidate_search(&env, 0, &space, &cfg).unwrap();
    let rm = out.running_max();
    assert!(rm.windows(2).all(|w| w[1] >= w[0]));
    let accepted = out.trace.iter().filter(|r| r.accepted).count();
    assert!(out.state.candidates.len() <= accepted && accepted <= cfg.max_iters);
    assert_eq!(out.state.model as usize, accepted);
    for r in out.trace.iter().filter(|r| r.accepted) {
        assert!(r.delta > 0.0);
        assert!(out.state.candidates.iter().any(|c| c.strategy == r.strategy));
    }
    assert_eq!(out.state.r_star, rm.last().copied());
}

#[test]
fn candidates_are_deduplicated_keeping_best_reward() {
    let base = Strategy::ggs();
    let space = SearchSpace::restricted(&base, &[(Branch::Norm, vec![0, 1])]).unwrap();
    let cfg = SearchConfig { controller_dim: 8, max_iters: 6, ..SearchConfig::default() };
    let env = QueueEnv(RefCell::new(VecDeque::from([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])));
    let out = run_candidate_search(&env, 0, &space, &cfg).unwrap();
    assert!(out.state.candidates.len() <= 2);
    for c in &out.state.candidates {
        let best = out.trace.iter().filter(|r| r.strategy == c.strategy).map(|r| r.raw_reward).fold(f64::MIN, f64::max);
        assert_eq!(c.reward, best);
    }
}

#[test]
fn disabling_the_filter_accepts_every_probe() {
    let space = SearchSpace::full();
    let cfg = SearchConfig { max_iters: 30, controller_dim: 16, reward_filter: false, ..SearchConfig::default() };
    let env = FnEnv { reward: |s: &Strategy| 0.5 + 0.1 * s.crop_p };
    let out = run_candidate_search(&env, 0, &space, &cfg).unwrap();
    assert!(out.trace.iter().all(|r| r.accepted));
    assert_eq!(out.state.model, 30);
    for r in &out.trace {
        assert!((r.delta - 10.0 * r.raw_reward).abs() < 1e-12);
    }
}

#[test]
fn search_is_deterministic_per_seed() {
    let bundle = synth_classification(6, 32, 2, 0.3, 3).unwrap();
    let cfg = SearchConfig { max_iters: 4, ..small_config() };
    let strip = |t: Vec<StepRecord>| t.into_iter().map(|r| StepRecord { wallclock_ms: 0, ..r }).collect::<Vec<_>>();
    let a = search_dataset(&bundle, &SearchSpace::full(), &cfg).unwrap();
    let b = search_dataset(&bundle, &SearchSpace::full(), &cfg).unwrap();
    assert_eq!(strip(a.trace), strip(b.trace));
    assert_eq!(a.state.model, b.state.model);
}

#[test]
fn trace_round_trips_through_jsonl() {
    let env = FnEnv { reward: |s: &Strategy| s.rescale_p };
    let cfg = SearchConfig { max_iters: 5, controller_dim: 8, ..SearchConfig::default() };
    let out = run_candidate_search(&env, 0, &SearchSpace::full(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    write_trace(&path, &out.trace).unwrap();
    assert_eq!(read_trace(&path).unwrap(), out.trace);
    let line = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["accepted", "delta", "raw_reward", "step", "strategy", "wallclock_ms"]);
}

#[test]
fn worst_reward_for_failing_strategy() {
    let bundle = synth_classification(6, 32, 2, 0.3, 3).unwrap();
    let cfg = small_config();
    let env = ContrastiveEnv { bundle: &bundle, train: cfg.train.clone(), mode: ProbeMode::OneEpoch, encoder_lr: 1e-3, pretrain_lr: 1e-3 };
    let mut model = initial_encoder(&bundle, &cfg).unwrap();
    for t in &mut model.tensors {
        t.data_mut().iter_mut().for_each(|v| *v *= 1e120);
    }
    let st = Strategy { sim: Sim::Dot, temperature: 0.01, norm: Norm::None, ..Strategy::default() };
    let probe = env.probe(&model, &st, &mut seeded(0)).unwrap();
    assert_eq!(probe.reward, 0.0);
    assert!(probe.failure.is_some());
    assert_eq!(probe.model, model);
}

#[test]
fn evaluation_merge_is_independent_of_worker_count() {
    let bundle = synth_classification(6, 32, 3, 0.3, 4).unwrap();
    let candidates: Vec<Strategy> = TEMPERATURES
        .iter()
        .flat_map(|&t| [Norm::None, Norm::L2].map(|norm| Strategy { temperature: t, norm, ..Strategy::ggs() }))
        .take(8)
        .collect();
    let run = |workers| {
        let cfg = SearchConfig { workers, pretrain_iters: 1, ..small_config() };
        evaluate_candidates(&candidates, &bundle, &cfg).unwrap()
    };
    let (a, b) = (run(1), run(4));
    let strip = |e: &Evaluation| {
        e.ranked.iter().map(|c| (c.index, c.val_score, c.test_score, c.strategy.clone())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.ranked.len() + a.failed.len(), 8);
    assert!(a.ranked.windows(2).all(|w| w[0].val_score >= w[1].val_score));
    assert!(a.ranked[0].test_score.is_some());
    assert!(a.ranked[1..].iter().all(|c| c.test_score.is_none()));
}

#[test]
fn zero_pretraining_scores_the_random_encoder() {
    let bundle = synth_classification(6, 32, 3, 0.3, 5).unwrap();
    let cfg = SearchConfig { pretrain_iters: 0, ..small_config() };
    let st = Strategy::ggs();
    let ev = evaluate_candidates(std::slice::from_ref(&st), &bundle, &cfg).unwrap();
    let seed = strategy_seed(cfg.eval_seed, &st).unwrap();
    let params = init_encoder(&cfg.encoder.config(1), derive(seed, "init", 0)).unwrap();
    let baseline = compute_reward(&params, &bundle, &cfg.train).unwrap();
    assert_eq!(ev.ranked[0].val_score, baseline);
}

#[test]
fn failing_candidates_are_excluded() {
    let bundle = synth_classification(6, 32, 3, 0.3, 5).unwrap();
    let cfg = SearchConfig { pretrain_iters: 1, ..small_config() };
    let mut bad = Strategy::ggs();
    bad.temperature = 0.5; // off grid
    let ev = evaluate_candidates(&[Strategy::ggs(), bad], &bundle, &cfg).unwrap();
    assert_eq!(ev.ranked.len(), 1);
    assert_eq!(ev.failed.len(), 1);
    assert_eq!(ev.failed[0].index, 1);
}

fn scored(s: Strategy, score: f64) -> ScoredStrategy {
    ScoredStrategy { strategy: s, score }
}

#[test]
fn ggs_of_identical_strategies_is_that_strategy() {
    let s = Strategy { jitter_p: 0.3, temporal: true, ..Strategy::ggs() }.canonical();
    let sets = vec![vec![scored(s.clone(), 0.9)], vec![scored(s.clone(), -0.2)], vec![scored(s.clone(), 0.7)]];
    let out = compose_ggs(&sets, 0.01, |_| panic!("no evaluation needed")).unwrap();
    assert_eq!(out.strategy, s);
    assert_eq!(out.shared.len(), 18);
    assert!(out.decisions.is_empty());
}

#[test]
fn ggs_resolves_a_single_disputed_branch() {
    let at = |t: f64| Strategy { temperature: t, ..Strategy::ggs() };
    let sets = vec![vec![scored(at(0.1), 0.9)], vec![scored(at(1.0), 0.8)], vec![scored(at(10.0), 0.7)]];
    // Temperature 1 is best on average but drops too much on task 0.
    let eval = |s: &Strategy| -> Result<Vec<f64>> {
        Ok(match s.temperature {
            0.1 => vec![0.90, 0.70, 0.70],
            1.0 => vec![0.80, 0.95, 0.95],
            _ => vec![0.895, 0.75, 0.74],
        })
    };
    let out = compose_ggs(&sets, 0.01, eval).unwrap();
    assert_eq!(out.shared.len(), 17);
    assert_eq!(out.decisions.len(), 1);
    assert_eq!(out.decisions[0].branch, "temperature");
    assert!(out.decisions[0].survivors.is_empty());
    assert_eq!(out.strategy.temperature, 1.0, "falls back to the best mean");
    let out = compose_ggs(&sets, 0.3, eval).unwrap();
    assert_eq!(out.strategy.temperature, 1.0);
    let eval2 = |s: &Strategy| -> Result<Vec<f64>> {
        Ok(match s.temperature {
            0.1 => vec![0.90, 0.70, 0.70],
            1.0 => vec![0.80, 0.95, 0.95],
            _ => vec![0.895, 0.945, 0.948],
        })
    };
    let out = compose_ggs(&sets, 0.01, eval2).unwrap();
    assert_eq!(out.decisions[0].survivors, vec![3]);
    assert_eq!(out.strategy.temperature, 10.0);
}

#[test]
fn ggs_prefers_the_most_agreeing_triple() {
    let a = Strategy::ggs();
    let b = Strategy { jitter_p: 0.5, crop_p: 0.9, norm: Norm::L2, ..Strategy::ggs() };
    let sets = vec![
        vec![scored(b.clone(), 0.99), scored(a.clone(), 0.5)],
        vec![scored(a.clone(), 0.5)],
        vec![scored(a.clone(), 0.5), scored(b, 0.99)],
    ];
    let out = compose_ggs(&sets, 0.01, |_| Ok(vec![0.0])).unwrap();
    assert_eq!(out.triple, [1, 0, 0]);
    assert_eq!(out.strategy, a.canonical());
}

#[test]
fn ggs_guards_list_sizes() {
    let s = scored(Strategy::ggs(), 0.0);
    assert!(compose_ggs(&[vec![s.clone()], vec![s.clone()]], 0.01, |_| Ok(vec![0.0])).is_err());
    let big = vec![s.clone(); MAX_GGS_TOPK + 1];
    assert!(compose_ggs(&[big, vec![s.clone()], vec![s]], 0.01, |_| Ok(vec![0.0])).is_err());
}

#[test]
fn complexity_model_matches_measured_phase_one() {
    let bundle = synth_classification(10, 32, 3, 0.3, 6).unwrap();
    let cfg = SearchConfig { max_iters: 6, pretrain_iters: 2, ..small_config() };
    let out = search_dataset(&bundle, &SearchSpace::full(), &cfg).unwrap();
    let cands: Vec<Strategy> = out.state.candidates.iter().map(|c| c.strategy.clone()).collect();
    let ev = evaluate_candidates(&cands, &bundle, &cfg).unwrap();
    let report = complexity_report(&out.timings, out.wall_secs, cands.len(), cfg.workers, cfg.pretrain_iters, Some(ev.wall_secs));
    assert!(report.phase1_ratio() > 0.5 && report.phase1_ratio() < 2.0, "{report:?}");
    assert!(report.phase2_model_secs > 0.0);
}

#[test]
fn forecast_and_anomaly_probes_run() {
    let cfg = SearchConfig { max_iters: 2, ..small_config() };
    for bundle in [synth_forecast(1000, 1).unwrap(), synth_anomaly(1000, 0.02, 1).unwrap()] {
        let cfg = SearchConfig { epsilon: default_epsilon(bundle.task), ..cfg.clone() };
        let out = search_dataset(&bundle, &SearchSpace::full(), &cfg).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert!(out.trace.iter().all(|r| r.raw_reward.is_finite()));
    }
}

#[test]
fn config_validation_and_hash() {
    assert!(SearchConfig { alpha: 0.0, ..SearchConfig::default() }.validate().is_err());
    assert!(SearchConfig { epsilon: -1.0, ..SearchConfig::default() }.validate().is_err());
    assert_eq!(SearchConfig::for_task(TaskKind::Forecast).epsilon, 0.0001);
    let a = SearchConfig::default();
    assert_eq!(a.hash(), a.clone().hash());
    assert_ne!(a.hash(), SearchConfig { seed: 1, ..a.clone() }.hash());
}
