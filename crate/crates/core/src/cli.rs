//! Command line interface of the `autocl` binary.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_encoder, save_encoder};
use crate::encoder::init_encoder;
use crate::error::{Error, Result};
use crate::experiments::{
    run_filter_ablation, run_ggs_transfer, run_space_ablation, run_speed_ablation, save_report, ExperimentConfig,
};
use crate::harness::{resolve_dataset, DatasetBundle, SplitRatios, TaskKind};
use crate::rng::derive;
use crate::search::{
    complexity_report, compose_ggs, evaluate_candidates, evaluate_split, evaluate_strategy, pretrain, search_dataset,
    write_trace, Candidate, CandidateScore, EncoderShape, EvalSplit, ScoredStrategy, SearchConfig, MAX_GGS_TOPK,
};
use crate::space::{ggs_preset, SearchSpace, Strategy};

/// Environment variable that overrides `--seed`.
pub const SEED_ENV: &str = "AUTOCL_SEED";

#[derive(Debug, Parser)]
#[command(name = "autocl", version, about = "Automated contrastive-learning strategy search for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Full,
    DataAugOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationMode {
    NoFilter,
    FullPretrain,
    DataAugOnly,
    GgsTransfer,
}

/// Options shared by commands that read a dataset.
#[derive(Clone, Debug, clap::Args)]
pub struct DataArgs {
    /// Task the dataset is used for.
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// Dataset file, or `synth:<classification|forecast|anomaly>[:k=v,...]`.
    #[arg(long)]
    pub data: String,
    /// Train/val/test ratios such as `60/20/20`; task default when omitted.
    #[arg(long, value_parser = parse_ratios)]
    pub split: Option<SplitRatios>,
}

/// Search configuration overrides.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ConfigArgs {
    /// JSON file with search configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder residual blocks.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Encoder hidden channels.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    pub out_dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phase 1: candidate search; writes trace.jsonl and candidates.json.
    Search {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_enum, default_value = "full")]
        space: SpaceArg,
        /// Disable reward filtering.
        #[arg(long)]
        no_filter: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: pretrain and rank candidates; writes ranking.json.
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        pretrain_iters: Option<usize>,
        /// Defaults to the dataset recorded next to the candidates file.
        #[arg(long, value_parser = parse_task, requires = "data")]
        task: Option<TaskKind>,
        #[arg(long, requires = "task")]
        data: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder under one strategy and save a checkpoint.
    Pretrain {
        /// Strategy JSON file, or `ggs` for the preset.
        #[arg(long)]
        strategy: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compose one strategy from the rankings of three search runs.
    Ggs {
        #[arg(long)]
        topk: usize,
        #[arg(long, num_args = 3, required = true)]
        from: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        drop_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split metrics of a checkpoint as JSON.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation experiment and write its report.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblationMode,
        /// Comma-separated seeds (at least five for no-filter and data-aug-only).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long)]
        iters: Option<usize>,
        /// JSON file with experiment configuration fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ratios(s: &str) -> std::result::Result<SplitRatios, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Everything needed to reload the dataset and settings of a search run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub task: TaskKind,
    pub data: String,
    pub split: SplitRatios,
    pub config: SearchConfig,
}

/// Seed from `AUTOCL_SEED`, else `--seed`, else 0.
pub fn effective_seed(flag: Option<u64>) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} is not an integer: {v:?}"))),
        Err(_) => Ok(flag.unwrap_or(0)),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn build_config(task: TaskKind, args: &ConfigArgs, base: Option<SearchConfig>) -> Result<SearchConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(path), _) => {
            let mut value = serde_json::to_value(SearchConfig::for_task(task))?;
            merge(&mut value, read_json(path)?);
            serde_json::from_value(value)?
        }
        (None, Some(base)) => base,
        (None, None) => SearchConfig::for_task(task),
    };
    let seed = match std::env::var(SEED_ENV) {
        Ok(_) => Some(effective_seed(None)?),
        Err(_) => args.seed,
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.eval_seed = seed;
    }
    let shape = EncoderShape {
        depth: args.depth.unwrap_or(cfg.encoder.depth),
        hidden: args.hidden.unwrap_or(cfg.encoder.hidden),
        out_dim: args.out_dim.unwrap_or(cfg.encoder.out_dim),
    };
    cfg.encoder = shape;
    cfg.validate()?;
    Ok(cfg)
}

/// Overlay the fields of `patch` onto `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn load(data: &DataArgs, seed: u64) -> Result<DatasetBundle> {
    resolve_dataset(&data.data, data.task, data.split, seed)
}

fn load_strategy(spec: &str) -> Result<Strategy> {
    if spec == "ggs" {
        return Ok(ggs_preset());
    }
    Strategy::from_json(&std::fs::read_to_string(spec)?)
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Search { data, iters, space, no_filter, cfg, out } => {
            let mut config = build_config(data.task, &cfg, None)?;
            if let Some(n) = iters {
                config.max_iters = n;
            }
            config.reward_filter = !no_filter;
            let bundle = load(&data, config.seed)?;
            let space = match space {
                SpaceArg::Full => SearchSpace::full(),
                SpaceArg::DataAugOnly => SearchSpace::augmentation_only(),
            };
            std::fs::create_dir_all(&out)?;
            let outcome = search_dataset(&bundle, &space, &config)?;
            write_trace(&out.join("trace.jsonl"), &outcome.trace)?;
            write_json(&out.join("candidates.json"), &outcome.ranked_candidates())?;
            let info = RunInfo { task: data.task, data: data.data, split: bundle.ratios, config };
            write_json(&out.join("run.json"), &info)?;
            save_encoder(&out.join("encoder.ckpt"), &outcome.state.model)?;
            outcome.state.controller.save(&out.join("controller.ckpt"))?;
            let report = complexity_report(&outcome.timings, outcome.wall_secs, outcome.state.candidates.len(), info.config.workers, info.config.pretrain_iters, None);
            write_json(&out.join("complexity.json"), &report)?;
            println!(
                "{} steps, {} candidates, best reward {:.4}",
                outcome.trace.len(),
                outcome.state.candidates.len(),
                outcome.state.r_star.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Evaluate { candidates, workers, pretrain_iters, task, data, cfg, out } => {
            let cands: Vec<Candidate> = read_json(&candidates)?;
            let run_path = candidates.parent().unwrap_or(Path::new(".")).join("run.json");
            let info: Option<RunInfo> = if run_path.exists() { Some(read_json(&run_path)?) } else { None };
            let (task, data_spec, split) = match (task, data, &info) {
                (Some(t), Some(d), _) => (t, d, None),
                (_, _, Some(i)) => (i.task, i.data.clone(), Some(i.split)),
                _ => return Err(Error::Config("no dataset given and no run.json next to the candidates".into())),
            };
            let mut config = build_config(task, &cfg, info.map(|i| i.config))?;
            if let Some(k) = workers {
                config.workers = k;
            }
            if let Some(m) = pretrain_iters {
                config.pretrain_iters = m;
            }
            config.validate()?;
            let bundle = resolve_dataset(&data_spec, task, split, config.seed)?;
            let strategies: Vec<Strategy> = cands.into_iter().map(|c| c.strategy).collect();
            let ev = evaluate_candidates(&strategies, &bundle, &config)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("ranking.json"), &ev.ranked)?;
            write_json(&out.join("failed.json"), &ev.failed)?;
            if let (Some(best), Some(params)) = (ev.ranked.first(), &ev.best_params) {
                std::fs::write(out.join("best_strategy.json"), best.strategy.to_json_pretty())?;
                save_encoder(&out.join("best_encoder.ckpt"), params)?;
                println!("best validation score {:.4} (test {:.4})", best.val_score, best.test_score.unwrap_or(f64::NAN));
            } else {
                println!("every candidate failed");
            }
            let info = RunInfo { task, data: data_spec, split: bundle.ratios, config };
            write_json(&out.join("run.json"), &info)?;
            Ok(())
        }
        Command::Pretrain { strategy, data, epochs, cfg, out } => {
            let mut config = build_config(data.task, &cfg, None)?;
            if let Some(m) = epochs {
                config.pretrain_iters = m;
            }
            let strategy = load_strategy(&strategy)?.validate()?;
            let bundle = load(&data, config.seed)?;
            let mut params = init_encoder(&config.encoder.config(bundle.channels()), derive(config.seed, "encoder", 0))?;
            let mut rng = crate::rng::seeded(derive(config.seed, "pretrain", 0));
            pretrain(&mut params, &bundle, &strategy, config.pretrain_iters, config.pretrain_lr, &config.train, &mut rng)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_encoder(&out, &params)?;
            let val = evaluate_split(&params, &bundle, &config.train, EvalSplit::Val)?;
            println!("{}", serde_json::to_string_pretty(&val.records(EvalSplit::Val))?);
            Ok(())
        }
        Command::Ggs { topk, from, drop_threshold, out } => {
            if topk == 0 || topk > MAX_GGS_TOPK {
                return Err(Error::Config(format!("--topk must be in 1..={MAX_GGS_TOPK}")));
            }
            let mut sets = Vec::new();
            let mut envs = Vec::new();
            for dir in &from {
                let info: RunInfo = read_json(&dir.join("run.json"))?;
                let ranking = dir.join("ranking.json");
                let top: Vec<ScoredStrategy> = if ranking.exists() {
                    let r: Vec<CandidateScore> = read_json(&ranking)?;
                    r.into_iter().take(topk).map(|c| ScoredStrategy { strategy: c.strategy, score: c.val_score }).collect()
                } else {
                    let c: Vec<Candidate> = read_json(&dir.join("candidates.json"))?;
                    c.into_iter().take(topk).map(|c| ScoredStrategy { strategy: c.strategy, score: c.reward }).collect()
                };
                if top.is_empty() {
                    return Err(Error::Data(format!("{} has no candidates", dir.display())));
                }
                let bundle = resolve_dataset(&info.data, info.task, Some(info.split), info.config.seed)?;
                sets.push(top);
                envs.push((bundle, info.config));
            }
            let outcome = compose_ggs(&sets, drop_threshold, |s| {
                envs.iter().map(|(b, c)| Ok(evaluate_strategy(s, b, c)?.val.score())).collect()
            })?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, outcome.strategy.to_json_pretty())?;
            let details = out.with_extension("details.json");
            write_json(&details, &outcome)?;
            println!("composed strategy written to {}", out.display());
            Ok(())
        }
        Command::Report { checkpoint, data, cfg, out } => {
            let config = build_config(data.task, &cfg, None)?;
            let params = load_encoder(&checkpoint)?;
            let bundle = load(&data, config.seed)?;
            let test = evaluate_split(&params, &bundle, &config.train, EvalSplit::Test)?;
            let text = serde_json::to_string_pretty(&test.records(EvalSplit::Test))?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Ablate { mode, seeds, iters, config, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let mut value = serde_json::to_value(ExperimentConfig::default())?;
                    merge(&mut value, read_json(path)?);
                    serde_json::from_value(value)?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(n) = iters {
                cfg.search.max_iters = n;
            }
            let seeds = match std::env::var(SEED_ENV) {
                Ok(_) => {
                    let base = effective_seed(None)?;
                    (0..seeds.len() as u64).map(|i| base + i).collect()
                }
                Err(_) => seeds,
            };
            if seeds.is_empty() {
                return Err(Error::Config("at least one seed is required".into()));
            }
            let report = match mode {
                AblationMode::NoFilter => run_filter_ablation(&seeds, &cfg)?,
                AblationMode::FullPretrain => run_speed_ablation(cfg.search.max_iters, seeds[0], &cfg)?,
                AblationMode::DataAugOnly => run_space_ablation(&seeds, &cfg)?,
                AblationMode::GgsTransfer => run_ggs_transfer(seeds[0], &cfg)?,
            };
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_report(&out, &report)?;
            println!("{}: verdict {}", report.id, report.verdict());
            Ok(())
        }
    }
}
