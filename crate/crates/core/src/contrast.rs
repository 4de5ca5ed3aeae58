//! Similarity functions, multi-scale embedding stacks, pair construction and
//! the contrastive losses that combine them.

use crate::error::{Error, Result};
use crate::numerics::{PairMask, PoolOp, SimKind, Tape, Var};
use crate::space::{LossType, Strategy};

/// Hinge margin of the triplet loss.
pub const TRIPLET_MARGIN: f64 = 1.0;

/// Denominator floor of cosine similarity.
pub const COS_EPS: f64 = 1e-12;

/// Similarity between two vectors (value only).
pub fn similarity(a: &[f64], b: &[f64], kind: SimKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("similarity of {} vs {} dims", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(match kind {
        SimKind::Dot => dot,
        SimKind::Cos => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb + COS_EPS)
        }
        SimKind::Dist => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    })
}

/// Embeddings at successively pooled resolutions. Level 0 is the input.
#[derive(Clone, Debug)]
pub struct ScaleStack {
    pub levels: Vec<Var>,
    pub lengths: Vec<usize>,
    /// Pool width; 0 means a single-level stack.
    pub kernel: usize,
}

impl ScaleStack {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Source window `[start, end)` at level `s - 1` of position `t` at level `s`.
    pub fn parent_window(&self, s: usize, t: usize) -> (usize, usize) {
        debug_assert!(s >= 1 && s < self.levels.len());
        let start = t * self.kernel;
        (start, ((t + 1) * self.kernel).min(self.lengths[s - 1]))
    }
}

/// Pool repeatedly (stride = kernel, partial last window) until length 1.
pub fn hierarchical_scales(tape: &mut Tape, h: Var, kernel: usize, pool: PoolOp) -> Result<ScaleStack> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Dimension(format!("scales need B x T x d with T >= 1, got {shape:?}")));
    }
    if kernel == 1 {
        return Err(Error::Parameter("pool kernel must be 0 or >= 2".into()));
    }
    let mut levels = vec![h];
    let mut lengths = vec![shape[1]];
    if kernel > 0 {
        while *lengths.last().expect("non-empty") > 1 {
            let next = tape.pool1d(*levels.last().expect("non-empty"), kernel, pool)?;
            lengths.push(tape.value(next).dim(1));
            levels.push(next);
        }
    }
    Ok(ScaleStack { levels, lengths, kernel })
}

/// How positive and negative pairs are formed within one resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Same instance in the other view is positive; other instances are negative.
    Instance,
    /// Same timestep in the other view is positive (plus same-view neighbours
    /// when `adjacent`); other timesteps of the instance are negative.
    Temporal { adjacent: bool },
}

fn check_views(tape: &Tape, h1: Var, h2: Var) -> Result<(usize, usize, usize)> {
    let (s1, s2) = (tape.value(h1).shape(), tape.value(h2).shape());
    if s1.len() != 3 || s1 != s2 {
        return Err(Error::Dimension(format!("view embeddings {s1:?} vs {s2:?}")));
    }
    Ok((s1[0], s1[1], s1[2]))
}

/// Similarity tensor and mask for one pairing. `None` when the pairing has
/// no valid anchors (fewer than two instances / timesteps).
fn build_pairs(tape: &mut Tape, h1: Var, h2: Var, sim: SimKind, pairing: Pairing) -> Result<Option<(Var, PairMask)>> {
    let (b, t, _) = check_views(tape, h1, h2)?;
    match pairing {
        Pairing::Instance => {
            if b < 2 {
                return Ok(None);
            }
            let z = tape.concat(&[h1, h2], 0)?;
            let z = tape.transpose(z, 0, 1)?;
            let sims = tape.pairwise_sim(z, z, sim)?;
            let n = 2 * b;
            let mut mask = PairMask::new(n, n);
            for a in 0..n {
                for c in 0..n {
                    if c % b != a % b {
                        mask.set_neg(a, c);
                    }
                }
                mask.set_pos(a, (a + b) % n);
            }
            Ok(Some((sims, mask)))
        }
        Pairing::Temporal { adjacent } => {
            if t < 2 {
                return Ok(None);
            }
            let z = tape.concat(&[h1, h2], 1)?;
            let sims = tape.pairwise_sim(z, z, sim)?;
            let n = 2 * t;
            let mut mask = PairMask::new(n, n);
            for a in 0..n {
                let (view, ta) = (a / t, a % t);
                let near = |tc: usize| adjacent && tc.abs_diff(ta) == 1;
                for c in 0..n {
                    let tc = c % t;
                    if tc != ta && !near(tc) {
                        mask.set_neg(a, c);
                    }
                }
                mask.set_pos(a, (a + t) % n);
                if adjacent {
                    if ta > 0 {
                        mask.set_pos(a, view * t + ta - 1);
                    }
                    if ta + 1 < t {
                        mask.set_pos(a, view * t + ta + 1);
                    }
                }
            }
            Ok(Some((sims, mask)))
        }
    }
}

fn apply_loss(tape: &mut Tape, sims: Var, mask: PairMask, loss: LossType, temperature: f64) -> Result<Var> {
    match loss {
        LossType::InfoNce => tape.masked_infonce(sims, mask, temperature),
        LossType::Triplet => tape.masked_triplet(sims, mask, temperature, TRIPLET_MARGIN),
    }
}

/// One contrast term with an explicit loss form; `None` when skipped.
pub fn pair_loss(
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    strategy: &Strategy,
    pairing: Pairing,
    loss: LossType,
) -> Result<Option<Var>> {
    match build_pairs(tape, h1, h2, strategy.sim, pairing)? {
        None => Ok(None),
        Some((sims, mask)) => apply_loss(tape, sims, mask, loss, strategy.temperature).map(Some),
    }
}

/// Multi-positive InfoNCE averaged over the anchors of both views.
pub fn infonce_loss(tape: &mut Tape, h1: Var, h2: Var, strategy: &Strategy, pairing: Pairing) -> Result<Option<Var>> {
    pair_loss(tape, h1, h2, strategy, pairing, LossType::InfoNce)
}

/// Margin-1 triplet hinge averaged over every (anchor, positive, negative).
pub fn triplet_loss(tape: &mut Tape, h1: Var, h2: Var, strategy: &Strategy, pairing: Pairing) -> Result<Option<Var>> {
    pair_loss(tape, h1, h2, strategy, pairing, LossType::Triplet)
}

/// Consistency between each coarse position and the window it was pooled
/// from, against the other fine positions of the same instance. Anchors
/// whose window covers the whole finer level have no negatives and are left
/// out. `None` when no level pair has a usable anchor.
pub fn cross_scale_loss(tape: &mut Tape, stacks: &[&ScaleStack], strategy: &Strategy) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for stack in stacks {
        for s in 1..stack.depth() {
            let (coarse, fine) = (stack.lengths[s], stack.lengths[s - 1]);
            let mut mask = PairMask::new(coarse, fine);
            let mut usable = false;
            for t in 0..coarse {
                let (lo, hi) = stack.parent_window(s, t);
                if hi - lo == fine {
                    continue;
                }
                usable = true;
                for c in 0..fine {
                    if (lo..hi).contains(&c) {
                        mask.set_pos(t, c);
                    } else {
                        mask.set_neg(t, c);
                    }
                }
            }
            if !usable {
                continue;
            }
            let sims = tape.pairwise_sim(stack.levels[s], stack.levels[s - 1], strategy.sim)?;
            terms.push(apply_loss(tape, sims, mask, strategy.loss_type, strategy.temperature)?);
        }
    }
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64).map(Some)
}

/// Full contrastive objective of a strategy on two aligned, already
/// transformed view embeddings.
///
/// The per-level value is the instance term plus the temporal term (each
/// only when enabled and applicable); levels with no applicable term are
/// left out of the level mean. The cross-scale term is added on top.
pub fn strategy_loss(tape: &mut Tape, h1: Var, h2: Var, strategy: &Strategy) -> Result<Var> {
    check_views(tape, h1, h2)?;
    let s1 = hierarchical_scales(tape, h1, strategy.kernel, strategy.pool)?;
    let s2 = hierarchical_scales(tape, h2, strategy.kernel, strategy.pool)?;
    let mut level_terms = Vec::new();
    for level in 0..s1.depth() {
        let (a, b) = (s1.levels[level], s2.levels[level]);
        let mut parts = Vec::new();
        if strategy.instance {
            parts.extend(pair_loss(tape, a, b, strategy, Pairing::Instance, strategy.loss_type)?);
        }
        if strategy.temporal {
            let pairing = Pairing::Temporal { adjacent: strategy.adjacent };
            parts.extend(pair_loss(tape, a, b, strategy, pairing, strategy.loss_type)?);
        }
        if let Some((&first, rest)) = parts.split_first() {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            level_terms.push(acc);
        }
    }
    let levels = mean_of(tape, &level_terms)?;
    let cross = if strategy.cross_scale && strategy.kernel > 0 {
        cross_scale_loss(tape, &[&s1, &s2], strategy)?
    } else {
        None
    };
    match (levels, cross) {
        (Some(l), Some(c)) => tape.add(l, c),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(Error::NoContrastTerms),
    }
}
