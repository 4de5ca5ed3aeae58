//! The discrete strategy space: 18 independent sub-dimensions covering data
//! augmentation, embedding transformation, pair construction and loss.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::numerics::{PoolOp as Pool, SimKind as Sim};
use crate::rng::seeded;

/// Strength grid shared by every augmentation and embedding perturbation.
/// `0.0` disables the transformation.
pub const P_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
pub const ORDERS: [u8; 5] = [1, 2, 3, 4, 5];
pub const NORMS: [Norm; 3] = [Norm::None, Norm::Layer, Norm::L2];
pub const BOOLS: [bool; 2] = [false, true];
/// Hierarchical pooling kernel; `0` means a single scale.
pub const KERNELS: [usize; 4] = [0, 2, 3, 5];
pub const POOLS: [Pool; 2] = [Pool::Avg, Pool::Max];
pub const LOSSES: [LossType; 2] = [LossType::InfoNce, LossType::Triplet];
pub const SIMS: [Sim; 3] = [Sim::Dot, Sim::Cos, Sim::Dist];
pub const TEMPERATURES: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

pub const N_BRANCHES: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    Layer,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    #[serde(rename = "infonce")]
    InfoNce,
    Triplet,
}

/// One point of the strategy space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub resize_p: f64,
    pub rescale_p: f64,
    pub jitter_p: f64,
    pub point_mask_p: f64,
    pub freq_mask_p: f64,
    pub crop_p: f64,
    pub aug_order: u8,
    pub emb_jitter_p: f64,
    pub emb_mask_p: f64,
    pub norm: Norm,
    pub instance: bool,
    pub temporal: bool,
    pub cross_scale: bool,
    pub kernel: usize,
    pub pool: Pool,
    pub adjacent: bool,
    pub loss_type: LossType,
    pub sim: Sim,
    pub temperature: f64,
}

impl Default for Strategy {
    /// Every branch at its first option, temperature 1.
    fn default() -> Self {
        Self {
            resize_p: 0.0,
            rescale_p: 0.0,
            jitter_p: 0.0,
            point_mask_p: 0.0,
            freq_mask_p: 0.0,
            crop_p: 0.0,
            aug_order: 1,
            emb_jitter_p: 0.0,
            emb_mask_p: 0.0,
            norm: Norm::None,
            instance: true,
            temporal: false,
            cross_scale: false,
            kernel: 0,
            pool: Pool::Avg,
            adjacent: false,
            loss_type: LossType::InfoNce,
            sim: Sim::Dot,
            temperature: 1.0,
        }
    }
}

/// The 18 sampled sub-dimensions, in controller branch order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Resize,
    Rescale,
    Jitter,
    PointMask,
    FreqMask,
    Crop,
    Order,
    EmbJitter,
    EmbMask,
    Norm,
    Temporal,
    CrossScale,
    Kernel,
    Pool,
    Adjacent,
    LossType,
    Sim,
    Temperature,
}

impl Branch {
    pub const ALL: [Branch; N_BRANCHES] = [
        Branch::Resize,
        Branch::Rescale,
        Branch::Jitter,
        Branch::PointMask,
        Branch::FreqMask,
        Branch::Crop,
        Branch::Order,
        Branch::EmbJitter,
        Branch::EmbMask,
        Branch::Norm,
        Branch::Temporal,
        Branch::CrossScale,
        Branch::Kernel,
        Branch::Pool,
        Branch::Adjacent,
        Branch::LossType,
        Branch::Sim,
        Branch::Temperature,
    ];

    /// Data augmentation branches, including the application order.
    pub const AUGMENTATION: [Branch; 7] = [
        Branch::Resize,
        Branch::Rescale,
        Branch::Jitter,
        Branch::PointMask,
        Branch::FreqMask,
        Branch::Crop,
        Branch::Order,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Field name in the serialized strategy.
    pub fn name(self) -> &'static str {
        match self {
            Branch::Resize => "resize_p",
            Branch::Rescale => "rescale_p",
            Branch::Jitter => "jitter_p",
            Branch::PointMask => "point_mask_p",
            Branch::FreqMask => "freq_mask_p",
            Branch::Crop => "crop_p",
            Branch::Order => "aug_order",
            Branch::EmbJitter => "emb_jitter_p",
            Branch::EmbMask => "emb_mask_p",
            Branch::Norm => "norm",
            Branch::Temporal => "temporal",
            Branch::CrossScale => "cross_scale",
            Branch::Kernel => "kernel",
            Branch::Pool => "pool",
            Branch::Adjacent => "adjacent",
            Branch::LossType => "loss_type",
            Branch::Sim => "sim",
            Branch::Temperature => "temperature",
        }
    }

    pub fn from_name(name: &str) -> Option<Branch> {
        Branch::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn option_count(self) -> usize {
        match self {
            Branch::Resize
            | Branch::Rescale
            | Branch::Jitter
            | Branch::PointMask
            | Branch::FreqMask
            | Branch::Crop
            | Branch::EmbJitter
            | Branch::EmbMask => P_GRID.len(),
            Branch::Order => ORDERS.len(),
            Branch::Norm => NORMS.len(),
            Branch::Temporal | Branch::CrossScale | Branch::Adjacent => BOOLS.len(),
            Branch::Kernel => KERNELS.len(),
            Branch::Pool => POOLS.len(),
            Branch::LossType => LOSSES.len(),
            Branch::Sim => SIMS.len(),
            Branch::Temperature => TEMPERATURES.len(),
        }
    }

    fn label(self, option: usize) -> String {
        match self {
            Branch::Order => ORDERS[option].to_string(),
            Branch::Norm => json_label(&NORMS[option]),
            Branch::Temporal | Branch::CrossScale | Branch::Adjacent => BOOLS[option].to_string(),
            Branch::Kernel => KERNELS[option].to_string(),
            Branch::Pool => json_label(&POOLS[option]),
            Branch::LossType => json_label(&LOSSES[option]),
            Branch::Sim => json_label(&SIMS[option]),
            Branch::Temperature => TEMPERATURES[option].to_string(),
            _ => P_GRID[option].to_string(),
        }
    }
}

fn json_label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names and option labels of every branch, in branch order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpaceSpec {
    pub branches: Vec<(String, Vec<String>)>,
}

impl SpaceSpec {
    pub fn full() -> Self {
        let branches = Branch::ALL
            .iter()
            .map(|b| (b.name().to_owned(), (0..b.option_count()).map(|o| b.label(o)).collect()))
            .collect();
        Self { branches }
    }

    pub fn option_counts(&self) -> Vec<usize> {
        self.branches.iter().map(|(_, o)| o.len()).collect()
    }
}

fn grid_index(value: f64, grid: &[f64], field: &'static str) -> Result<usize> {
    grid.iter()
        .position(|g| (g - value).abs() < 1e-9)
        .ok_or(Error::OffGrid { field })
}

fn position<T: PartialEq>(value: &T, options: &[T], field: &'static str) -> Result<usize> {
    options.iter().position(|o| o == value).ok_or(Error::OffGrid { field })
}

impl Strategy {
    /// Table values of the generally good strategy.
    pub fn ggs() -> Self {
        Self {
            resize_p: 0.2,
            rescale_p: 0.3,
            jitter_p: 0.0,
            point_mask_p: 0.2,
            freq_mask_p: 0.0,
            crop_p: 0.2,
            aug_order: 3,
            emb_jitter_p: 0.7,
            emb_mask_p: 0.1,
            norm: Norm::None,
            instance: true,
            temporal: false,
            cross_scale: false,
            kernel: 5,
            pool: Pool::Avg,
            adjacent: false,
            loss_type: LossType::InfoNce,
            sim: Sim::Dist,
            temperature: 1.0,
        }
    }

    /// Option index of every branch.
    pub fn encode(&self) -> Result<[usize; N_BRANCHES]> {
        let mut out = [0usize; N_BRANCHES];
        for b in Branch::ALL {
            out[b.index()] = self.option_of(b)?;
        }
        Ok(out)
    }

    fn option_of(&self, b: Branch) -> Result<usize> {
        let f = b.name();
        match b {
            Branch::Resize => grid_index(self.resize_p, &P_GRID, f),
            Branch::Rescale => grid_index(self.rescale_p, &P_GRID, f),
            Branch::Jitter => grid_index(self.jitter_p, &P_GRID, f),
            Branch::PointMask => grid_index(self.point_mask_p, &P_GRID, f),
            Branch::FreqMask => grid_index(self.freq_mask_p, &P_GRID, f),
            Branch::Crop => grid_index(self.crop_p, &P_GRID, f),
            Branch::Order => position(&self.aug_order, &ORDERS, f),
            Branch::EmbJitter => grid_index(self.emb_jitter_p, &P_GRID, f),
            Branch::EmbMask => grid_index(self.emb_mask_p, &P_GRID, f),
            Branch::Norm => position(&self.norm, &NORMS, f),
            Branch::Temporal => position(&self.temporal, &BOOLS, f),
            Branch::CrossScale => position(&self.cross_scale, &BOOLS, f),
            Branch::Kernel => position(&self.kernel, &KERNELS, f),
            Branch::Pool => position(&self.pool, &POOLS, f),
            Branch::Adjacent => position(&self.adjacent, &BOOLS, f),
            Branch::LossType => position(&self.loss_type, &LOSSES, f),
            Branch::Sim => position(&self.sim, &SIMS, f),
            Branch::Temperature => grid_index(self.temperature, &TEMPERATURES, f),
        }
    }

    /// Build the canonical strategy for an index vector.
    pub fn decode(indices: &[usize]) -> Result<Strategy> {
        if indices.len() != N_BRANCHES {
            return Err(Error::Validation(format!(
                "expected {N_BRANCHES} option indices, got {}",
                indices.len()
            )));
        }
        let mut s = Strategy::default();
        for b in Branch::ALL {
            let i = indices[b.index()];
            if i >= b.option_count() {
                return Err(Error::OffGrid { field: b.name() });
            }
            s.set_option(b, i);
        }
        Ok(s.canonical())
    }

    /// Set branch `b` to its option `i` (no canonicalization).
    pub fn set_option(&mut self, b: Branch, i: usize) {
        match b {
            Branch::Resize => self.resize_p = P_GRID[i],
            Branch::Rescale => self.rescale_p = P_GRID[i],
            Branch::Jitter => self.jitter_p = P_GRID[i],
            Branch::PointMask => self.point_mask_p = P_GRID[i],
            Branch::FreqMask => self.freq_mask_p = P_GRID[i],
            Branch::Crop => self.crop_p = P_GRID[i],
            Branch::Order => self.aug_order = ORDERS[i],
            Branch::EmbJitter => self.emb_jitter_p = P_GRID[i],
            Branch::EmbMask => self.emb_mask_p = P_GRID[i],
            Branch::Norm => self.norm = NORMS[i],
            Branch::Temporal => self.temporal = BOOLS[i],
            Branch::CrossScale => self.cross_scale = BOOLS[i],
            Branch::Kernel => self.kernel = KERNELS[i],
            Branch::Pool => self.pool = POOLS[i],
            Branch::Adjacent => self.adjacent = BOOLS[i],
            Branch::LossType => self.loss_type = LOSSES[i],
            Branch::Sim => self.sim = SIMS[i],
            Branch::Temperature => self.temperature = TEMPERATURES[i],
        }
    }

    /// Clear fields that have no effect: adjacency without temporal contrast,
    /// cross-scale contrast without pooling. Instance contrast is always on.
    pub fn canonical(mut self) -> Strategy {
        self.instance = true;
        if !self.temporal {
            self.adjacent = false;
        }
        if self.kernel == 0 {
            self.cross_scale = false;
        }
        self
    }

    /// Check grid membership of every field and return the canonical form.
    pub fn validate(&self) -> Result<Strategy> {
        let indices = self.encode()?;
        // Snap to the exact grid constants.
        let mut s = Strategy::decode(&indices)?;
        s.instance = true;
        Ok(s)
    }

    /// Strength of each augmentation keyed by name, in field order.
    pub fn augmentation_strengths(&self) -> [(&'static str, f64); 6] {
        [
            ("resize", self.resize_p),
            ("rescale", self.rescale_p),
            ("jitter", self.jitter_p),
            ("point_mask", self.point_mask_p),
            ("freq_mask", self.freq_mask_p),
            ("crop", self.crop_p),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("strategy serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("strategy serializes")
    }

    /// Parse a flat JSON object and validate it.
    pub fn from_json(text: &str) -> Result<Strategy> {
        let raw: Strategy = serde_json::from_str(text)?;
        raw.validate()
    }
}

/// Preset strategy that transfers well across tasks.
pub fn ggs_preset() -> Strategy {
    Strategy::ggs()
}

/// Validate and canonicalize.
pub fn validate(strategy: &Strategy) -> Result<Strategy> {
    strategy.validate()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Pair construction counted as 32 joint options.
    Paper,
    /// Temporal and cross-scale counted as independent binary choices.
    Full,
}

/// Number of strategies in the space.
pub fn space_size(mode: CountMode) -> u128 {
    let p = P_GRID.len() as u128;
    let augment = ORDERS.len() as u128 * p.pow(6);
    let embedding = NORMS.len() as u128 * p * p;
    let pairs: u128 = match mode {
        CountMode::Paper => 32,
        CountMode::Full => 128,
    };
    let loss = (LOSSES.len() * SIMS.len() * TEMPERATURES.len()) as u128;
    augment * embedding * pairs * loss
}

/// Uniform independent draw per branch, canonicalized.
pub fn random_strategy(seed: u64) -> Strategy {
    let mut rng = seeded(seed);
    random_strategy_with(&mut rng)
}

pub fn random_strategy_with<R: Rng + ?Sized>(rng: &mut R) -> Strategy {
    let indices: Vec<usize> = Branch::ALL.iter().map(|b| rng.random_range(0..b.option_count())).collect();
    Strategy::decode(&indices).expect("indices drawn within option counts")
}

/// A sub-space: for each branch, the option indices the controller may choose.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    allowed: Vec<Vec<usize>>,
}

impl SearchSpace {
    pub fn full() -> Self {
        Self { allowed: Branch::ALL.iter().map(|b| (0..b.option_count()).collect()).collect() }
    }

    /// Only the listed branches vary (over the listed options); every other
    /// branch is pinned to its value in `base`.
    pub fn restricted(base: &Strategy, free: &[(Branch, Vec<usize>)]) -> Result<Self> {
        let fixed = base.encode()?;
        let mut allowed: Vec<Vec<usize>> = fixed.iter().map(|&i| vec![i]).collect();
        for (b, options) in free {
            if options.is_empty() || options.iter().any(|&o| o >= b.option_count()) {
                return Err(Error::Config(format!("invalid options {options:?} for branch {b}")));
            }
            allowed[b.index()] = options.clone();
        }
        Ok(Self { allowed })
    }

    /// Augmentation branches free, everything else at the default strategy.
    pub fn augmentation_only() -> Self {
        let free: Vec<(Branch, Vec<usize>)> = Branch::AUGMENTATION
            .iter()
            .map(|&b| (b, (0..b.option_count()).collect()))
            .collect();
        Self::restricted(&Strategy::default(), &free).expect("default strategy is on grid")
    }

    pub fn widths(&self) -> Vec<usize> {
        self.allowed.iter().map(Vec::len).collect()
    }

    /// Translate per-branch choices (positions within the allowed lists) to
    /// full option indices.
    pub fn to_full(&self, local: &[usize]) -> Vec<usize> {
        local.iter().zip(&self.allowed).map(|(&l, a)| a[l]).collect()
    }

    pub fn contains(&self, s: &Strategy) -> bool {
        match s.encode() {
            Ok(idx) => idx.iter().zip(&self.allowed).all(|(i, a)| a.contains(i)),
            Err(_) => false,
        }
    }

    pub fn size(&self) -> u128 {
        self.allowed.iter().map(|a| a.len() as u128).product()
    }

    /// Every strategy of the sub-space in lexicographic choice order. Distinct
    /// choices that canonicalize to the same strategy are listed once.
    pub fn enumerate(&self) -> Result<Vec<Strategy>> {
        if self.size() > 1_000_000 {
            return Err(Error::Config("sub-space too large to enumerate".into()));
        }
        let widths = self.widths();
        let mut local = vec![0usize; N_BRANCHES];
        let mut out: Vec<Strategy> = Vec::new();
        loop {
            let s = Strategy::decode(&self.to_full(&local))?;
            if !out.contains(&s) {
                out.push(s);
            }
            let mut k = N_BRANCHES;
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                local[k] += 1;
                if local[k] < widths[k] {
                    break;
                }
                local[k] = 0;
            }
        }
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::full()
    }
}
