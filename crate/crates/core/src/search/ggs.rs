//! Composition of one transferable strategy from the top candidates of
//! several tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Branch, Strategy, N_BRANCHES};

/// Largest per-task candidate list accepted (bounds the K³ triples).
pub const MAX_GGS_TOPK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredStrategy {
    pub strategy: Strategy,
    pub score: f64,
}

/// How one disputed branch was resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgsDecision {
    pub branch: String,
    /// Option indices proposed by the chosen triple.
    pub options: Vec<usize>,
    /// Per option, one validation score per task.
    pub scores: Vec<Vec<f64>>,
    /// Options within the drop threshold of the best option on every task.
    pub survivors: Vec<usize>,
    pub chosen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgsOutcome {
    pub strategy: Strategy,
    /// Index into each task's list of the triple that agrees most.
    pub triple: [usize; 3],
    /// Branches on which the whole triple agrees.
    pub shared: Vec<String>,
    pub decisions: Vec<GgsDecision>,
}

/// Pick the triple (one strategy per task) agreeing on the most branches,
/// adopt its shared options, then settle every other branch by scoring each
/// option the triple proposes with `evaluate` (one validation score per task,
/// higher is better). Options that fall more than `drop_threshold` below the
/// best option on any task are discarded; the best surviving option by mean
/// score wins (or the best overall if none survives).
pub fn compose_ggs<F>(sets: &[Vec<ScoredStrategy>], drop_threshold: f64, mut evaluate: F) -> Result<GgsOutcome>
where
    F: FnMut(&Strategy) -> Result<Vec<f64>>,
{
    if sets.len() != 3 {
        return Err(Error::Config(format!("composition needs three candidate lists, got {}", sets.len())));
    }
    if sets.iter().any(|s| s.is_empty() || s.len() > MAX_GGS_TOPK) {
        return Err(Error::Config(format!("each candidate list needs 1..={MAX_GGS_TOPK} entries")));
    }
    if !(drop_threshold >= 0.0) {
        return Err(Error::Config(format!("drop threshold must be >= 0, got {drop_threshold}")));
    }
    let codes: Vec<Vec<[usize; N_BRANCHES]>> = sets
        .iter()
        .map(|s| s.iter().map(|c| c.strategy.encode()).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut best: Option<([usize; 3], usize, f64)> = None;
    for i in 0..sets[0].len() {
        for j in 0..sets[1].len() {
            for k in 0..sets[2].len() {
                let (a, b, c) = (&codes[0][i], &codes[1][j], &codes[2][k]);
                let shared = (0..N_BRANCHES).filter(|&n| a[n] == b[n] && b[n] == c[n]).count();
                let total = sets[0][i].score + sets[1][j].score + sets[2][k].score;
                if best.is_none_or(|(_, s, t)| shared > s || (shared == s && total > t)) {
                    best = Some(([i, j, k], shared, total));
                }
            }
        }
    }
    let (triple, _, _) = best.expect("non-empty lists");
    let members = [codes[0][triple[0]], codes[1][triple[1]], codes[2][triple[2]]];
    let mut draft = members[0];
    let mut shared = Vec::new();
    let mut decisions = Vec::new();
    let mut cache: BTreeMap<[usize; N_BRANCHES], Vec<f64>> = BTreeMap::new();
    for branch in Branch::ALL {
        let n = branch.index();
        let mut options: Vec<usize> = members.iter().map(|m| m[n]).collect();
        options.sort_unstable();
        options.dedup();
        if options.len() == 1 {
            shared.push(branch.name().to_string());
            continue;
        }
        let mut scores = Vec::with_capacity(options.len());
        for &o in &options {
            let mut code = draft;
            code[n] = o;
            let s = match cache.get(&code) {
                Some(s) => s.clone(),
                None => {
                    let s = evaluate(&Strategy::decode(&code)?)?;
                    cache.insert(code, s.clone());
                    s
                }
            };
            scores.push(s);
        }
        let tasks = scores[0].len();
        if tasks == 0 || scores.iter().any(|s| s.len() != tasks) {
            return Err(Error::Usage("evaluator must return the same non-zero number of scores".into()));
        }
        let best_per_task: Vec<f64> =
            (0..tasks).map(|t| scores.iter().map(|s| s[t]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let survivors: Vec<usize> = (0..options.len())
            .filter(|&i| (0..tasks).all(|t| best_per_task[t] - scores[i][t] <= drop_threshold))
            .collect();
        let mean = |i: usize| scores[i].iter().sum::<f64>() / tasks as f64;
        let pick = |pool: &[usize]| {
            pool.iter().copied().fold(None, |acc: Option<usize>, i| match acc {
                Some(a) if mean(a) >= mean(i) => Some(a),
                _ => Some(i),
            })
        };
        let all: Vec<usize> = (0..options.len()).collect();
        let chosen = pick(&survivors).or_else(|| pick(&all)).expect("at least two options");
        draft[n] = options[chosen];
        decisions.push(GgsDecision {
            branch: branch.name().to_string(),
            options: options.clone(),
            scores,
            survivors: survivors.iter().map(|&i| options[i]).collect(),
            chosen: options[chosen],
        });
    }
    Ok(GgsOutcome { strategy: Strategy::decode(&draft)?, triple, shared, decisions })
}
