//! C interface to `specpar-core`.
//!
//! Every fallible function returns a [`SpecparStatus`]. On failure a message
//! is kept per thread and can be read with [`specpar_last_error`]. Handles
//! are opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use specpar_core::analytics::{
    expected_multi_round, expected_rounds, expected_single_round, psd_bound, speedup_psd,
    speedup_sd,
};
use specpar_core::datastore::{HierarchicalDatastore, NGramIndex};
use specpar_core::harness::{Experiment, ExperimentConfig};
use specpar_core::model::{SamplerConfig, TableModel, TokenId};
use specpar_core::pipeline::{
    run, DraftStrategy, Engine, LatencyConfig, Models, PipelineConfig, RunOutput, Schedule,
};
use specpar_core::SpecparError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecparStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecparDraft {
    None = 0,
    Autoregressive = 1,
    Retrieval = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecparSchedule {
    Pipelined = 0,
    Serial = 1,
}

/// Decoding parameters for `specpar_generate`. Forward latencies are taken
/// from the models' forward costs.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpecparParams {
    pub gamma: usize,
    pub depth: usize,
    pub draft: SpecparDraft,
    pub schedule: SpecparSchedule,
    pub target_retrieval: bool,
    pub rejected_cache: bool,
    pub concurrent: bool,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub t_lookup: f64,
    pub t_sync: f64,
}

/// Closed-form quantities for one `(alpha, gamma, C)` point.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpecparTheory {
    pub e_single: f64,
    pub rounds: f64,
    pub e_multi: f64,
    pub speedup_sd: f64,
    pub speedup_psd: f64,
    pub psd_bound: f64,
}

/// Table model handle.
pub struct SpecparModel(TableModel);

/// Hierarchical datastore handle.
pub struct SpecparDatastore(HierarchicalDatastore);

/// Finished run handle.
pub struct SpecparRun(RunOutput);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(SpecparStatus, String);

impl From<SpecparError> for Fail {
    fn from(e: SpecparError) -> Self {
        let status = match &e {
            SpecparError::Io { .. } => SpecparStatus::Io,
            SpecparError::Parse { .. } | SpecparError::Csv(_) | SpecparError::Json(_) => SpecparStatus::Parse,
            SpecparError::Invariant(_) => SpecparStatus::Internal,
            _ => SpecparStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn fail<T>(status: SpecparStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpecparStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            SpecparStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            SpecparStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(SpecparStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SpecparStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .map_or_else(|| fail(SpecparStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn token_arg(p: *const u32, len: usize, what: &str) -> Result<Vec<TokenId>, Fail> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return fail(SpecparStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len).iter().copied().map(TokenId).collect())
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return fail(SpecparStatus::NullPointer, "output handle pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `tokens` into `buf` and stores the full length in `out_len`.
unsafe fn write_tokens(tokens: &[TokenId], buf: *mut u32, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    if !out_len.is_null() {
        *out_len = tokens.len();
    }
    if cap < tokens.len() {
        return fail(SpecparStatus::BufferTooSmall, format!("need room for {} tokens", tokens.len()));
    }
    if tokens.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return fail(SpecparStatus::NullPointer, "token buffer is null");
    }
    for (i, t) in tokens.iter().enumerate() {
        *buf.add(i) = t.0;
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn specpar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn specpar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model in `model-v1` text format.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specpar_model_load(
    path: *const c_char,
    forward_cost: f64,
    out: *mut *mut SpecparModel,
) -> SpecparStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = TableModel::load(Path::new(path))?;
        if forward_cost.is_nan() || forward_cost < 0.0 {
            return fail(SpecparStatus::InvalidArgument, "forward cost must be >= 0");
        }
        write_out(out, SpecparModel(model.with_forward_cost(forward_cost)))
    })
}

/// Parses a model from `model-v1` text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specpar_model_from_text(
    text: *const c_char,
    forward_cost: f64,
    out: *mut *mut SpecparModel,
) -> SpecparStatus {
    guard(|| {
        let model = TableModel::from_text(str_arg(text, "text")?)?;
        if forward_cost.is_nan() || forward_cost < 0.0 {
            return fail(SpecparStatus::InvalidArgument, "forward cost must be >= 0");
        }
        write_out(out, SpecparModel(model.with_forward_cost(forward_cost)))
    })
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn specpar_model_vocab_size(model: *const SpecparModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vocab_size())
}

/// Writes the next-token distribution for `context` into `probs`, which must
/// hold at least the vocabulary size.
///
/// # Safety
/// `model` must be a live handle, `context` must point to `len` tokens and
/// `probs` to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn specpar_model_forward(
    model: *const SpecparModel,
    context: *const u32,
    len: usize,
    probs: *mut f64,
    cap: usize,
) -> SpecparStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.0;
        let ctx = token_arg(context, len, "context")?;
        if let Some(t) = ctx.iter().find(|t| t.index() >= model.vocab_size()) {
            return Err(SpecparError::TokenOutOfRange { token: t.0, vocab: model.vocab_size() }.into());
        }
        let dist = model.forward(&ctx);
        if cap < dist.len() {
            return fail(SpecparStatus::BufferTooSmall, format!("need room for {} probabilities", dist.len()));
        }
        if probs.is_null() {
            return fail(SpecparStatus::NullPointer, "probs is null");
        }
        ptr::copy_nonoverlapping(dist.as_slice().as_ptr(), probs, dist.len());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specpar_model_free(model: *mut SpecparModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates a datastore, optionally with a prior index file.
///
/// # Safety
/// `prior_path` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn specpar_datastore_new(
    prior_path: *const c_char,
    max_order: usize,
    depth: usize,
    out: *mut *mut SpecparDatastore,
) -> SpecparStatus {
    guard(|| {
        if max_order == 0 {
            return fail(SpecparStatus::InvalidArgument, "max_order must be at least 1");
        }
        let prior = if prior_path.is_null() {
            NGramIndex::new(max_order)
        } else {
            NGramIndex::load(Path::new(str_arg(prior_path, "prior_path")?))?
        };
        write_out(out, SpecparDatastore(HierarchicalDatastore::new(prior, max_order, depth)))
    })
}

/// Retrieves up to `depth` continuation tokens for `context`. The number of
/// candidates is stored in `out_len` even when `cap` is too small.
///
/// # Safety
/// `store` must be a live handle, `context` must point to `len` tokens,
/// `buf` to `cap` slots and `out_len` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn specpar_datastore_lookup(
    store: *const SpecparDatastore,
    context: *const u32,
    len: usize,
    depth: usize,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SpecparStatus {
    guard(|| {
        let store = &ref_arg(store, "store")?.0;
        let ctx = token_arg(context, len, "context")?;
        let hit = store.lookup(&ctx, depth);
        write_tokens(&hit.candidates, buf, cap, out_len)
    })
}

/// Adds accepted tokens to the session layer.
///
/// # Safety
/// `store` must be a live handle and `tokens` must point to `len` tokens.
#[no_mangle]
pub unsafe extern "C" fn specpar_datastore_record(
    store: *mut SpecparDatastore,
    tokens: *const u32,
    len: usize,
    step: u64,
) -> SpecparStatus {
    guard(|| {
        let toks = token_arg(tokens, len, "tokens")?;
        let store = store
            .as_mut()
            .map_or_else(|| fail(SpecparStatus::NullPointer, "store is null"), Ok)?;
        store.0.record_accepted(&toks, step);
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specpar_datastore_free(store: *mut SpecparDatastore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Greedy double-retrieval defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specpar_params_default(out: *mut SpecparParams) -> SpecparStatus {
    guard(|| {
        let out = out
            .as_mut()
            .map_or_else(|| fail(SpecparStatus::NullPointer, "out is null"), Ok)?;
        *out = SpecparParams {
            gamma: 4,
            depth: 10,
            draft: SpecparDraft::Retrieval,
            schedule: SpecparSchedule::Pipelined,
            target_retrieval: true,
            rejected_cache: true,
            concurrent: false,
            temperature: 0.0,
            seed: 0,
            max_new_tokens: 256,
            t_lookup: 0.0,
            t_sync: 0.0,
        };
        Ok(())
    })
}

/// Decodes after `prompt`. The datastore's session layers are reset when the
/// call returns.
///
/// # Safety
/// All handles must be live, `prompt` must point to `len` tokens and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn specpar_generate(
    draft: *const SpecparModel,
    target: *const SpecparModel,
    store: *mut SpecparDatastore,
    prompt: *const u32,
    len: usize,
    params: *const SpecparParams,
    out: *mut *mut SpecparRun,
) -> SpecparStatus {
    guard(|| {
        let draft = &ref_arg(draft, "draft")?.0;
        let target = &ref_arg(target, "target")?.0;
        let p = *ref_arg(params, "params")?;
        let prompt = token_arg(prompt, len, "prompt")?;
        let store = store
            .as_mut()
            .map_or_else(|| fail(SpecparStatus::NullPointer, "store is null"), Ok)?;
        let cfg = PipelineConfig {
            gamma: p.gamma,
            depth: p.depth,
            draft: match p.draft {
                SpecparDraft::None => DraftStrategy::None,
                SpecparDraft::Autoregressive => DraftStrategy::Autoregressive,
                SpecparDraft::Retrieval => DraftStrategy::Retrieval,
            },
            target_retrieval: p.target_retrieval,
            schedule: match p.schedule {
                SpecparSchedule::Pipelined => Schedule::Pipelined,
                SpecparSchedule::Serial => Schedule::Serial,
            },
            rejected_cache: p.rejected_cache,
            engine: if p.concurrent { Engine::Concurrent } else { Engine::Serial },
            sampler: SamplerConfig {
                temperature: p.temperature,
                rng_seed: p.seed,
            },
            max_new_tokens: p.max_new_tokens,
        };
        let latency = LatencyConfig {
            t_target: target.forward_cost(),
            t_draft: draft.forward_cost(),
            t_lookup: p.t_lookup,
            t_sync: p.t_sync,
        };
        let output = run(&prompt, Models { draft, target }, &mut store.0, &cfg, &latency)?;
        write_out(out, SpecparRun(output))
    })
}

/// Builds and runs the experiment described by config text.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_config(config: *const c_char, out: *mut *mut SpecparRun) -> SpecparStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(str_arg(config, "config")?)?;
        let output = Experiment::build(&cfg)?.run_method(cfg.method)?;
        write_out(out, SpecparRun(output))
    })
}

/// Copies the generated tokens into `buf`.
///
/// # Safety
/// `run` must be a live handle, `buf` must point to `cap` slots and
/// `out_len` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_tokens(
    run: *const SpecparRun,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SpecparStatus {
    guard(|| write_tokens(&ref_arg(run, "run")?.0.tokens, buf, cap, out_len))
}

/// Simulated speedup over target-only decoding; NaN for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_speedup(run: *const SpecparRun) -> f64 {
    run.as_ref().map_or(f64::NAN, |r| r.0.metrics.speedup)
}

/// Mean tokens committed between rejections; NaN for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_mean_accepted(run: *const SpecparRun) -> f64 {
    run.as_ref().map_or(f64::NAN, |r| r.0.metrics.mean_accepted)
}

/// Simulated clock at the end of the run; NaN for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_clock(run: *const SpecparRun) -> f64 {
    run.as_ref().map_or(f64::NAN, |r| r.0.metrics.clock)
}

/// Number of rounds; 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_rounds(run: *const SpecparRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.metrics.rounds)
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specpar_run_free(run: *mut SpecparRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Closed forms at one parameter point. Fails when `alpha` is 1, since no
/// round is ever rejected.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specpar_analyze(alpha: f64, gamma: usize, c: f64, out: *mut SpecparTheory) -> SpecparStatus {
    guard(|| {
        let out = out
            .as_mut()
            .map_or_else(|| fail(SpecparStatus::NullPointer, "out is null"), Ok)?;
        if !(0.0..=1.0).contains(&alpha) || gamma == 0 || c.is_nan() || c <= 0.0 {
            return fail(SpecparStatus::InvalidArgument, "need alpha in [0, 1], gamma >= 1, C > 0");
        }
        *out = SpecparTheory {
            e_single: expected_single_round(alpha, gamma),
            rounds: expected_rounds(alpha, gamma)?,
            e_multi: expected_multi_round(alpha, gamma)?,
            speedup_sd: speedup_sd(alpha, gamma, c)?,
            speedup_psd: speedup_psd(alpha, gamma, c)?,
            psd_bound: psd_bound(alpha, gamma, c)?,
        };
        Ok(())
    })
}
