//! C interface to the `autocl` strategy search.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_open`/`*_run` function and released by the matching `*_free`.
//! Every fallible function returns an [`AutoclStatus`]; on failure a message
//! is available from [`autocl_last_error`] on the same thread. Output
//! pointers are written only on success. Panics never unwind into C: they
//! are caught and reported as [`AutoclStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use autocl::harness::{resolve_dataset, DatasetBundle, TaskKind};
use autocl::encoder::EncoderParams;
use autocl::search::{
    evaluate_candidates, evaluate_strategy, search_dataset, write_trace, Evaluation, SearchConfig, SearchOutcome,
};
use autocl::space::{ggs_preset, random_strategy, SearchSpace};
use autocl::{checkpoint, Error, Strategy};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AutoclStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration, strategy or argument value.
    InvalidArgument = 3,
    /// Malformed or unsuitable data.
    Data = 4,
    /// File system failure.
    Io = 5,
    /// Non-finite values or a failed linear solve.
    Numeric = 6,
    /// An index was past the end of a list.
    OutOfRange = 7,
    /// Internal failure; the library state is still usable.
    Panic = 8,
}

/// Downstream task of a dataset.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AutoclTask {
    Classification = 0,
    Forecast = 1,
    Anomaly = 2,
}

impl From<AutoclTask> for TaskKind {
    fn from(t: AutoclTask) -> Self {
        match t {
            AutoclTask::Classification => TaskKind::Classification,
            AutoclTask::Forecast => TaskKind::Forecast,
            AutoclTask::Anomaly => TaskKind::Anomaly,
        }
    }
}

/// A dataset split into train/validation/test.
pub struct AutoclDataset {
    bundle: DatasetBundle,
}

/// One contrastive-learning strategy.
pub struct AutoclStrategy {
    strategy: Strategy,
}

/// Search and training settings.
pub struct AutoclConfig {
    config: SearchConfig,
}

/// Result of a candidate search.
pub struct AutoclSearch {
    outcome: SearchOutcome<EncoderParams>,
}

/// Result of pretraining and ranking candidates.
pub struct AutoclEvaluation {
    evaluation: Evaluation,
}

struct Failure {
    status: AutoclStatus,
    message: String,
}

impl Failure {
    fn new(status: AutoclStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Parameter(_)
            | Error::OffGrid { .. }
            | Error::Validation(_)
            | Error::Json(_) => AutoclStatus::InvalidArgument,
            Error::Parse { .. } | Error::Data(_) | Error::Dimension(_) | Error::NoContrastTerms => AutoclStatus::Data,
            Error::Io(_) => AutoclStatus::Io,
            Error::Numeric(_) => AutoclStatus::Numeric,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(AutoclStatus::InvalidArgument, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `body`, translating errors and panics into a status code.
fn guard<F>(body: F) -> AutoclStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AutoclStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal error".into());
            set_last_error(&msg);
            AutoclStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(AutoclStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(AutoclStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live object of type `T`.
unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    non_null(p, name)?;
    Ok(&*p)
}

/// # Safety
/// `out` must be null or writable.
unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(AutoclStatus::Data, "string contains a nul byte"))
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Overlay `patch` onto `base`, recursing into objects.
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

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn autocl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn autocl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by the library.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a dataset file, or generate one from a `synth:<name>[:k=v,...]`
/// spec, and split it with the task's default ratios.
///
/// # Safety
/// `spec` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_dataset_open(
    spec: *const c_char,
    task: AutoclTask,
    seed: u64,
    out: *mut *mut AutoclDataset,
) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec = read_str(spec, "spec")?;
        let bundle = resolve_dataset(spec, task.into(), None, seed)?;
        put(out, AutoclDataset { bundle });
        Ok(())
    })
}

/// Number of train, validation and test items (samples or time steps).
///
/// # Safety
/// `dataset` must be a live dataset; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_dataset_split_sizes(
    dataset: *const AutoclDataset,
    train: *mut usize,
    val: *mut usize,
    test: *mut usize,
) -> AutoclStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        non_null(train, "train")?;
        non_null(val, "val")?;
        non_null(test, "test")?;
        let (a, b, c) = d.bundle.split_sizes();
        *train = a;
        *val = b;
        *test = c;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a dataset from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_dataset_free(dataset: *mut AutoclDataset) {
    free_box(dataset);
}

/// The strategy with every branch at its first option.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_default(out: *mut *mut AutoclStrategy) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        put(out, AutoclStrategy { strategy: Strategy::default() });
        Ok(())
    })
}

/// The built-in general-purpose strategy.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_ggs(out: *mut *mut AutoclStrategy) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        put(out, AutoclStrategy { strategy: ggs_preset() });
        Ok(())
    })
}

/// A uniformly random strategy.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_random(seed: u64, out: *mut *mut AutoclStrategy) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        put(out, AutoclStrategy { strategy: random_strategy(seed) });
        Ok(())
    })
}

/// Parse and validate a strategy from JSON.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_from_json(json: *const c_char, out: *mut *mut AutoclStrategy) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        let strategy = Strategy::from_json(read_str(json, "json")?)?;
        put(out, AutoclStrategy { strategy });
        Ok(())
    })
}

/// Serialize a strategy; free the result with [`autocl_string_free`].
///
/// # Safety
/// `strategy` must be a live strategy; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_to_json(strategy: *const AutoclStrategy, out: *mut *mut c_char) -> AutoclStatus {
    guard(|| {
        let s = borrow(strategy, "strategy")?;
        non_null(out, "out")?;
        *out = to_c_string(s.strategy.to_json())?;
        Ok(())
    })
}

/// # Safety
/// `strategy` must be null or a strategy from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_free(strategy: *mut AutoclStrategy) {
    free_box(strategy);
}

/// Settings for `task`. `json` may be null for the defaults, or a JSON object
/// overriding any subset of fields; an omitted `epsilon` keeps the task's
/// default.
///
/// # Safety
/// `json` must be null or a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_config_new(task: AutoclTask, json: *const c_char, out: *mut *mut AutoclConfig) -> AutoclStatus {
    guard(|| {
        non_null(out, "out")?;
        let base = SearchConfig::for_task(task.into());
        let config = if json.is_null() {
            base
        } else {
            let overrides: serde_json::Value = serde_json::from_str(read_str(json, "json")?)?;
            let serde_json::Value::Object(overrides) = overrides else {
                return Err(Failure::new(AutoclStatus::InvalidArgument, "config JSON must be an object"));
            };
            let mut merged = serde_json::to_value(&base)?;
            let fields = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in overrides {
                let field = fields
                    .get_mut(&k)
                    .ok_or_else(|| Failure::new(AutoclStatus::InvalidArgument, format!("unknown config field `{k}`")))?;
                merge(field, v);
            }
            serde_json::from_value(merged)?
        };
        config.validate()?;
        put(out, AutoclConfig { config });
        Ok(())
    })
}

/// Serialize the full settings; free the result with [`autocl_string_free`].
///
/// # Safety
/// `config` must be a live config; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_config_to_json(config: *const AutoclConfig, out: *mut *mut c_char) -> AutoclStatus {
    guard(|| {
        let c = borrow(config, "config")?;
        non_null(out, "out")?;
        *out = to_c_string(serde_json::to_string(&c.config)?)?;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a config from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_config_free(config: *mut AutoclConfig) {
    free_box(config);
}

/// Run the candidate search over the full strategy space.
///
/// # Safety
/// `dataset` and `config` must be live objects; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_search_run(
    dataset: *const AutoclDataset,
    config: *const AutoclConfig,
    out: *mut *mut AutoclSearch,
) -> AutoclStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let c = borrow(config, "config")?;
        non_null(out, "out")?;
        let outcome = search_dataset(&d.bundle, &SearchSpace::full(), &c.config)?;
        put(out, AutoclSearch { outcome });
        Ok(())
    })
}

/// Number of accepted candidates.
///
/// # Safety
/// `search` must be a live search result; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_search_candidate_count(search: *const AutoclSearch, count: *mut usize) -> AutoclStatus {
    guard(|| {
        let s = borrow(search, "search")?;
        non_null(count, "count")?;
        *count = s.outcome.state.candidates.len();
        Ok(())
    })
}

/// Candidate at `rank` (0 = highest reward) and its reward. `reward` may be
/// null.
///
/// # Safety
/// `search` must be a live search result; `out` must be writable; `reward`
/// must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_search_candidate(
    search: *const AutoclSearch,
    rank: usize,
    out: *mut *mut AutoclStrategy,
    reward: *mut f64,
) -> AutoclStatus {
    guard(|| {
        let s = borrow(search, "search")?;
        non_null(out, "out")?;
        let ranked = s.outcome.ranked_candidates();
        let c = ranked.get(rank).ok_or_else(|| {
            Failure::new(AutoclStatus::OutOfRange, format!("rank {rank} of {} candidates", ranked.len()))
        })?;
        if !reward.is_null() {
            *reward = c.reward;
        }
        put(out, AutoclStrategy { strategy: c.strategy.clone() });
        Ok(())
    })
}

/// Write the per-step trace as JSON lines.
///
/// # Safety
/// `search` must be a live search result; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn autocl_search_write_trace(search: *const AutoclSearch, path: *const c_char) -> AutoclStatus {
    guard(|| {
        let s = borrow(search, "search")?;
        let path = read_str(path, "path")?;
        write_trace(Path::new(path), &s.outcome.trace)?;
        Ok(())
    })
}

/// # Safety
/// `search` must be null or a search result from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_search_free(search: *mut AutoclSearch) {
    free_box(search);
}

/// Fully pretrain one strategy and return its validation score (higher is
/// better).
///
/// # Safety
/// `dataset`, `config` and `strategy` must be live; `score` writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_strategy_score(
    dataset: *const AutoclDataset,
    config: *const AutoclConfig,
    strategy: *const AutoclStrategy,
    score: *mut f64,
) -> AutoclStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let c = borrow(config, "config")?;
        let s = borrow(strategy, "strategy")?;
        non_null(score, "score")?;
        *score = evaluate_strategy(&s.strategy, &d.bundle, &c.config)?.val.score();
        Ok(())
    })
}

/// Pretrain and rank `count` strategies.
///
/// # Safety
/// `strategies` must point to `count` live strategy pointers; `dataset` and
/// `config` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluate(
    dataset: *const AutoclDataset,
    config: *const AutoclConfig,
    strategies: *const *const AutoclStrategy,
    count: usize,
    out: *mut *mut AutoclEvaluation,
) -> AutoclStatus {
    guard(|| {
        let d = borrow(dataset, "dataset")?;
        let c = borrow(config, "config")?;
        non_null(out, "out")?;
        if count > 0 {
            non_null(strategies, "strategies")?;
        }
        let mut list = Vec::with_capacity(count);
        for i in 0..count {
            list.push(borrow(*strategies.add(i), "strategies[i]")?.strategy.clone());
        }
        let evaluation = evaluate_candidates(&list, &d.bundle, &c.config)?;
        put(out, AutoclEvaluation { evaluation });
        Ok(())
    })
}

/// Number of successfully ranked strategies.
///
/// # Safety
/// `evaluation` must be live; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluation_count(evaluation: *const AutoclEvaluation, count: *mut usize) -> AutoclStatus {
    guard(|| {
        let e = borrow(evaluation, "evaluation")?;
        non_null(count, "count")?;
        *count = e.evaluation.ranked.len();
        Ok(())
    })
}

/// Entry at `rank` (0 = best): its position in the input list and its
/// validation score. Either output may be null.
///
/// # Safety
/// `evaluation` must be live; outputs null or writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluation_entry(
    evaluation: *const AutoclEvaluation,
    rank: usize,
    index: *mut usize,
    val_score: *mut f64,
) -> AutoclStatus {
    guard(|| {
        let e = borrow(evaluation, "evaluation")?;
        let ranked = &e.evaluation.ranked;
        let entry = ranked.get(rank).ok_or_else(|| {
            Failure::new(AutoclStatus::OutOfRange, format!("rank {rank} of {} entries", ranked.len()))
        })?;
        if !index.is_null() {
            *index = entry.index;
        }
        if !val_score.is_null() {
            *val_score = entry.val_score;
        }
        Ok(())
    })
}

/// Full ranking as JSON; free the result with [`autocl_string_free`].
///
/// # Safety
/// `evaluation` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluation_to_json(evaluation: *const AutoclEvaluation, out: *mut *mut c_char) -> AutoclStatus {
    guard(|| {
        let e = borrow(evaluation, "evaluation")?;
        non_null(out, "out")?;
        *out = to_c_string(serde_json::to_string(&e.evaluation.ranked)?)?;
        Ok(())
    })
}

/// Save the encoder of the best-ranked strategy as a checkpoint file.
///
/// # Safety
/// `evaluation` must be live; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluation_save_best(evaluation: *const AutoclEvaluation, path: *const c_char) -> AutoclStatus {
    guard(|| {
        let e = borrow(evaluation, "evaluation")?;
        let path = read_str(path, "path")?;
        let params = e
            .evaluation
            .best_params
            .as_ref()
            .ok_or_else(|| Failure::new(AutoclStatus::OutOfRange, "no strategy was ranked"))?;
        checkpoint::save_encoder(Path::new(path), params)?;
        Ok(())
    })
}

/// # Safety
/// `evaluation` must be null or an evaluation from this library, not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn autocl_evaluation_free(evaluation: *mut AutoclEvaluation) {
    free_box(evaluation);
}
