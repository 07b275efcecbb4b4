//! Round orchestration, rollback, the simulated clock, and run metrics.
//!
//! Each round has a draft side and a target side. In the pipelined schedule
//! both run on the same frozen snapshot: the draft side extends
//! `committed ++ speculative`, while the target side scores the speculative
//! tokens plus a datastore lookup in one forward. The orchestrator then
//! verifies everything not yet verified, commits, and updates the datastore.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{mpsc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{HierarchicalDatastore, Source};
use crate::error::{Result, SpecparError};
use crate::model::{eos, CostMeter, ProbVector, SamplerConfig, TableModel, TokenId};
use crate::speculation::{
    iterative_draft, mean_matched, score_candidates, DraftChain, Retrieval, RetrievalResult, Side,
};
use crate::verification::{guided_output, verify_against_target, GuidanceChain, OutcomeKind};

/// Simulated cost of each primitive, in abstract time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub t_target: f64,
    pub t_draft: f64,
    pub t_lookup: f64,
    pub t_sync: f64,
}

impl LatencyConfig {
    pub fn new(t_target: f64, t_draft: f64) -> Self {
        LatencyConfig {
            t_target,
            t_draft,
            t_lookup: 0.0,
            t_sync: 0.0,
        }
    }

    /// Speed ratio `C = t_target / t_draft`.
    pub fn speed_ratio(&self) -> f64 {
        self.t_target / self.t_draft
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.t_target, self.t_draft, self.t_lookup, self.t_sync];
        if all.iter().any(|t| !t.is_finite() || *t < 0.0) || self.t_draft <= 0.0 {
            return Err(SpecparError::InvalidConfig(format!(
                "latencies must be finite and non-negative with t_draft > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// How the draft side produces tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftStrategy {
    /// No draft model; the target decodes alone.
    None,
    /// `gamma` plain draft forwards.
    Autoregressive,
    /// `gamma` retrieval forwards.
    Retrieval,
}

/// Whether the two sides overlap within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Draft for the next round while the target verifies.
    Pipelined,
    /// Draft, then verify.
    Serial,
}

/// Execution engine. Both produce bit-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Serial,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gamma: usize,
    pub depth: usize,
    pub draft: DraftStrategy,
    pub target_retrieval: bool,
    pub schedule: Schedule,
    pub rejected_cache: bool,
    pub engine: Engine,
    pub sampler: SamplerConfig,
    pub max_new_tokens: usize,
}

impl PipelineConfig {
    /// Double-sided retrieval, pipelined.
    pub fn double(gamma: usize, depth: usize, max_new_tokens: usize) -> Self {
        PipelineConfig {
            gamma,
            depth,
            draft: DraftStrategy::Retrieval,
            target_retrieval: true,
            schedule: Schedule::Pipelined,
            rejected_cache: true,
            engine: Engine::Serial,
            sampler: SamplerConfig::greedy(),
            max_new_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(SpecparError::InvalidConfig("gamma must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(SpecparError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        let retrieval = self.draft == DraftStrategy::Retrieval || self.target_retrieval;
        if retrieval && self.depth == 0 {
            return Err(SpecparError::InvalidConfig("depth must be at least 1".into()));
        }
        let t = self.sampler.temperature;
        if !t.is_finite() || t < 0.0 {
            return Err(SpecparError::InvalidConfig(format!("bad temperature {t}")));
        }
        Ok(())
    }
}

/// The two models of a run.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub draft: &'a TableModel,
    pub target: &'a TableModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PreVerify,
    PostVerify,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub committed: Vec<TokenId>,
    pub prompt_len: usize,
    pub speculative: Vec<TokenId>,
    /// Draft distribution for each speculative token.
    pub speculative_probs: Vec<ProbVector>,
    pub mode: Mode,
    pub prev_tokens: usize,
    pub round: u64,
    pub clock: f64,
    pub seed: u64,
    pub finished: bool,
}

impl PipelineState {
    pub fn new(prompt: &[TokenId], gamma: usize, seed: u64) -> Self {
        PipelineState {
            committed: prompt.to_vec(),
            prompt_len: prompt.len(),
            speculative: Vec::new(),
            speculative_probs: Vec::new(),
            mode: Mode::PreVerify,
            prev_tokens: gamma,
            round: 0,
            clock: 0.0,
            seed,
            finished: false,
        }
    }

    /// `committed ++ speculative`.
    pub fn context(&self) -> Vec<TokenId> {
        let mut c = self.committed.clone();
        c.extend_from_slice(&self.speculative);
        c
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.committed[self.prompt_len..]
    }

    /// Truncates the working context to `keep_len` tokens. Committed tokens
    /// can never be rolled back.
    pub fn rollback(&mut self, keep_len: usize, gamma: usize) -> Result<()> {
        let total = self.committed.len() + self.speculative.len();
        if keep_len < self.committed.len() || keep_len > total {
            return Err(SpecparError::Invariant(format!(
                "rollback to {keep_len} outside [{}, {total}]",
                self.committed.len()
            )));
        }
        let keep = keep_len - self.committed.len();
        self.speculative.truncate(keep);
        self.speculative_probs.truncate(keep);
        self.sync_mode(gamma);
        Ok(())
    }

    fn sync_mode(&mut self, gamma: usize) {
        if self.speculative.is_empty() {
            self.mode = Mode::PreVerify;
            self.prev_tokens = gamma;
        } else {
            self.mode = Mode::PostVerify;
            self.prev_tokens = self.speculative.len();
        }
    }

    fn check(&self, gamma: usize) -> Result<()> {
        let ok = self.speculative.len() == self.speculative_probs.len()
            && match self.mode {
                Mode::PreVerify => self.speculative.is_empty() && self.prev_tokens == gamma,
                Mode::PostVerify => {
                    !self.speculative.is_empty() && self.prev_tokens == self.speculative.len()
                }
            };
        if ok {
            Ok(())
        } else {
            Err(SpecparError::Invariant(format!(
                "mode {:?} with prev_tokens {} and {} speculative tokens",
                self.mode,
                self.prev_tokens,
                self.speculative.len()
            )))
        }
    }
}

/// One retrieval forward as seen in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEvent {
    pub round: u64,
    pub side: Side,
    pub source: Source,
    pub candidates: usize,
    pub matched_len: usize,
    pub emitted: Vec<TokenId>,
    /// False for plain forwards that did no lookup.
    pub looked_up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEvent {
    pub round: u64,
    pub kind: OutcomeKind,
    pub accepted_len: usize,
    pub committed_len: usize,
    pub bonus_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub mode: Mode,
    pub prev_tokens: usize,
    pub draft_len: usize,
    pub guidance_len: usize,
    pub retrievals: Vec<RetrievalEvent>,
    pub verify: Option<VerifyEvent>,
    pub committed: Vec<TokenId>,
    pub speculative_len: usize,
    pub draft_forwards: u64,
    pub draft_time: f64,
    pub target_time: f64,
    pub clock_delta: f64,
    pub clock: f64,
}

impl RoundTrace {
    pub fn is_rejection(&self) -> bool {
        self.verify.as_ref().is_some_and(|v| v.kind.is_rejection())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tokens: usize,
    pub rounds: usize,
    pub rejections: usize,
    /// Mean tokens committed between consecutive rejections.
    pub mean_accepted: f64,
    /// Mean matched length of draft-side retrieval forwards.
    pub amt: f64,
    pub amt_target: f64,
    pub hit_rate: f64,
    pub clock: f64,
    pub speedup: f64,
    /// Mean draft-derived tokens committed per segment.
    pub e_ld: f64,
    /// Mean guidance bonus tokens committed per segment.
    pub e_bonus: f64,
    /// Mean rounds per segment.
    pub rounds_per_segment: f64,
    /// Mean draft forwards per round.
    pub draft_forwards: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub tokens: Vec<TokenId>,
    pub metrics: RunMetrics,
    pub traces: Vec<RoundTrace>,
}

/// Derives run metrics from round traces.
pub fn compute_metrics(traces: &[RoundTrace], latency: &LatencyConfig) -> RunMetrics {
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let (mut run, mut bonus) = (0usize, 0usize);
    for t in traces {
        run += t.committed.len();
        bonus += t.verify.as_ref().map_or(0, |v| v.bonus_len.min(t.committed.len()));
        if t.is_rejection() {
            segments.push((run, bonus));
            run = 0;
            bonus = 0;
        }
    }
    if run > 0 {
        segments.push((run, bonus));
    }
    let nseg = segments.len().max(1) as f64;
    let tokens: usize = traces.iter().map(|t| t.committed.len()).sum();
    let total_bonus: usize = segments.iter().map(|s| s.1).sum();

    // Sum equal deltas by multiplication so repeated identical rounds give
    // the same float as a direct product.
    let mut buckets: BTreeMap<u64, usize> = BTreeMap::new();
    for t in traces {
        *buckets.entry(t.clock_delta.to_bits()).or_default() += 1;
    }
    let clock: f64 = buckets
        .iter()
        .map(|(bits, n)| f64::from_bits(*bits) * *n as f64)
        .sum();

    let retrievals = || traces.iter().flat_map(|t| t.retrievals.iter());
    let lookups = retrievals().filter(|r| r.looked_up).count();
    let hits = retrievals()
        .filter(|r| r.looked_up && r.source.is_layer_hit())
        .count();
    let draft_forwards: u64 = traces.iter().map(|t| t.draft_forwards).sum();

    RunMetrics {
        tokens,
        rounds: traces.len(),
        rejections: traces.iter().filter(|t| t.is_rejection()).count(),
        mean_accepted: if segments.is_empty() {
            0.0
        } else {
            tokens as f64 / nseg
        },
        amt: mean_matched(
            retrievals()
                .filter(|r| r.side == Side::Draft)
                .map(|r| r.matched_len),
        ),
        amt_target: mean_matched(
            retrievals()
                .filter(|r| r.side == Side::Target)
                .map(|r| r.matched_len),
        ),
        hit_rate: if lookups == 0 {
            0.0
        } else {
            hits as f64 / lookups as f64
        },
        clock,
        speedup: if clock > 0.0 {
            tokens as f64 * latency.t_target / clock
        } else {
            0.0
        },
        e_ld: (tokens - total_bonus) as f64 / nseg,
        e_bonus: total_bonus as f64 / nseg,
        rounds_per_segment: traces.len() as f64 / nseg,
        draft_forwards: if traces.is_empty() {
            0.0
        } else {
            draft_forwards as f64 / traces.len() as f64
        },
    }
}

/// Writes the trace as JSON lines tagged by `event`.
pub fn write_trace_jsonl<W: Write>(traces: &[RoundTrace], mut out: W) -> Result<()> {
    #[derive(Serialize)]
    #[serde(tag = "event", rename_all = "snake_case")]
    enum Line<'a> {
        Retrieval(&'a RetrievalEvent),
        Verify(&'a VerifyEvent),
        Round(&'a RoundTrace),
    }
    let mut emit = |line: Line<'_>| -> Result<()> {
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")
            .map_err(|e| SpecparError::io("<trace>", e))
    };
    for t in traces {
        for r in &t.retrievals {
            emit(Line::Retrieval(r))?;
        }
        if let Some(v) = &t.verify {
            emit(Line::Verify(v))?;
        }
        emit(Line::Round(t))?;
    }
    Ok(())
}

const STREAM_DRAFT: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_VERIFY: u64 = 3;

fn round_rng(seed: u64, round: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round << 2 | stream);
    rng
}

struct DraftJob {
    context: Vec<TokenId>,
    round: u64,
}

struct DraftOutput {
    chain: DraftChain,
    meter: CostMeter,
}

struct TargetJob {
    committed: Vec<TokenId>,
    forced: Vec<TokenId>,
    lookup: bool,
    round: u64,
}

struct TargetOutput {
    result: RetrievalResult,
    meter: CostMeter,
}

/// Read-only context shared by both sides.
#[derive(Clone, Copy)]
struct Sides<'a> {
    models: Models<'a>,
    cfg: &'a PipelineConfig,
    latency: &'a LatencyConfig,
    seed: u64,
}

impl Sides<'_> {
    fn draft(&self, store: &HierarchicalDatastore, job: &DraftJob) -> Result<DraftOutput> {
        let mut meter = CostMeter::default();
        let stop = eos(self.models.draft.vocab_size());
        if job.context.last() == Some(&stop) {
            return Ok(DraftOutput {
                chain: DraftChain::default(),
                meter,
            });
        }
        let mut rng = round_rng(self.seed, job.round, STREAM_DRAFT);
        let retrieval = (self.cfg.draft == DraftStrategy::Retrieval).then_some(Retrieval {
            store,
            depth: self.cfg.depth,
            lookup_cost: self.latency.t_lookup,
        });
        let chain = iterative_draft(
            self.models.draft,
            retrieval,
            &job.context,
            self.cfg.gamma,
            &self.cfg.sampler,
            Some(stop),
            &mut rng,
            &mut meter,
        )?;
        Ok(DraftOutput { chain, meter })
    }

    fn target(&self, store: &HierarchicalDatastore, job: &TargetJob) -> Result<TargetOutput> {
        let mut meter = CostMeter::default();
        let mut rng = round_rng(self.seed, job.round, STREAM_TARGET);
        let mut candidates = job.forced.clone();
        let mut source = Source::Miss;
        if job.lookup {
            meter.charge_lookup(self.latency.t_lookup);
            let mut ctx = job.committed.clone();
            ctx.extend_from_slice(&job.forced);
            let found = store.lookup(&ctx, self.cfg.depth);
            source = found.source;
            candidates.extend(found.candidates);
        }
        let result = score_candidates(
            self.models.target,
            &job.committed,
            candidates,
            source,
            &self.cfg.sampler,
            &mut rng,
            &mut meter,
        )?;
        Ok(TargetOutput { result, meter })
    }
}

/// Runs side jobs and owns write access to the datastore between rounds.
trait Exec {
    fn draft(&mut self, job: DraftJob) -> Result<DraftOutput>;
    fn target(&mut self, job: TargetJob) -> Result<TargetOutput>;
    fn both(&mut self, d: DraftJob, t: TargetJob) -> Result<(DraftOutput, TargetOutput)>;
    fn with_store<R>(&mut self, f: impl FnOnce(&mut HierarchicalDatastore) -> R) -> R;
}

struct SerialExec<'a> {
    sides: Sides<'a>,
    store: &'a mut HierarchicalDatastore,
}

impl Exec for SerialExec<'_> {
    fn draft(&mut self, job: DraftJob) -> Result<DraftOutput> {
        self.sides.draft(self.store, &job)
    }

    fn target(&mut self, job: TargetJob) -> Result<TargetOutput> {
        self.sides.target(self.store, &job)
    }

    fn both(&mut self, d: DraftJob, t: TargetJob) -> Result<(DraftOutput, TargetOutput)> {
        Ok((self.draft(d)?, self.target(t)?))
    }

    fn with_store<R>(&mut self, f: impl FnOnce(&mut HierarchicalDatastore) -> R) -> R {
        f(self.store)
    }
}

type Reply<T> = mpsc::Sender<Result<T>>;

struct ConcurrentExec<'s> {
    store: &'s RwLock<&'s mut HierarchicalDatastore>,
    draft_tx: mpsc::Sender<(DraftJob, Reply<DraftOutput>)>,
    target_tx: mpsc::Sender<(TargetJob, Reply<TargetOutput>)>,
}

fn worker_gone<T>() -> Result<T> {
    Err(SpecparError::Invariant("worker thread exited".into()))
}

impl Exec for ConcurrentExec<'_> {
    fn draft(&mut self, job: DraftJob) -> Result<DraftOutput> {
        let (tx, rx) = mpsc::channel();
        if self.draft_tx.send((job, tx)).is_err() {
            return worker_gone();
        }
        rx.recv().or_else(|_| worker_gone())?
    }

    fn target(&mut self, job: TargetJob) -> Result<TargetOutput> {
        let (tx, rx) = mpsc::channel();
        if self.target_tx.send((job, tx)).is_err() {
            return worker_gone();
        }
        rx.recv().or_else(|_| worker_gone())?
    }

    fn both(&mut self, d: DraftJob, t: TargetJob) -> Result<(DraftOutput, TargetOutput)> {
        let (dtx, drx) = mpsc::channel();
        let (ttx, trx) = mpsc::channel();
        if self.draft_tx.send((d, dtx)).is_err() || self.target_tx.send((t, ttx)).is_err() {
            return worker_gone();
        }
        let d = drx.recv().or_else(|_| worker_gone())?;
        let t = trx.recv().or_else(|_| worker_gone())?;
        Ok((d?, t?))
    }

    fn with_store<R>(&mut self, f: impl FnOnce(&mut HierarchicalDatastore) -> R) -> R {
        let mut guard = self.store.write().unwrap_or_else(|e| e.into_inner());
        f(&mut guard)
    }
}

fn last_n(tokens: &[TokenId], n: usize) -> &[TokenId] {
    &tokens[tokens.len().saturating_sub(n)..]
}

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn execute_round<E: Exec>(
    exec: &mut E,
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    latency: &LatencyConfig,
    vocab_size: usize,
) -> Result<RoundTrace> {
    state.check(cfg.gamma)?;
    if state.finished {
        return Err(SpecparError::Invariant("round started after end of sequence".into()));
    }
    let round = state.round;
    let mode = state.mode;
    let prev_tokens = state.prev_tokens;
    let lookup = cfg.target_retrieval;

    let (draft, target) = match (cfg.draft, cfg.schedule) {
        (DraftStrategy::None, _) => {
            let t = exec.target(TargetJob {
                committed: state.committed.clone(),
                forced: Vec::new(),
                lookup,
                round,
            })?;
            (None, t)
        }
        (_, Schedule::Pipelined) => {
            let (d, t) = exec.both(
                DraftJob {
                    context: state.context(),
                    round,
                },
                TargetJob {
                    committed: state.committed.clone(),
                    forced: state.speculative.clone(),
                    lookup,
                    round,
                },
            )?;
            (Some(d), t)
        }
        (_, Schedule::Serial) => {
            let d = exec.draft(DraftJob {
                context: state.context(),
                round,
            })?;
            let mut forced = state.speculative.clone();
            forced.extend_from_slice(&d.chain.tokens);
            let t = exec.target(TargetJob {
                committed: state.committed.clone(),
                forced,
                lookup,
                round,
            })?;
            (Some(d), t)
        }
    };

    let draft_time = draft.as_ref().map_or(0.0, |d| d.meter.time);
    let target_time = target.meter.time;
    let clock_delta = match (&draft, cfg.schedule) {
        (None, _) => target_time,
        (Some(_), Schedule::Serial) => draft_time + target_time,
        (Some(_), Schedule::Pipelined) => draft_time.max(target_time) + latency.t_sync,
    };

    let mut retrievals = Vec::new();
    if let Some(d) = &draft {
        for seg in &d.chain.segments {
            retrievals.push(RetrievalEvent {
                round,
                side: Side::Draft,
                source: seg.source,
                candidates: seg.candidates.len(),
                matched_len: seg.matched_len,
                emitted: seg.emitted.clone(),
                looked_up: cfg.draft == DraftStrategy::Retrieval,
            });
        }
    }
    let y = &target.result;
    retrievals.push(RetrievalEvent {
        round,
        side: Side::Target,
        source: y.source,
        candidates: y.candidates.len(),
        matched_len: y.matched_len,
        emitted: y.emitted.clone(),
        looked_up: lookup,
    });
    let guidance_len = y.emitted.len();
    let draft_len = draft.as_ref().map_or(0, |d| d.chain.tokens.len());
    let draft_forwards = draft.as_ref().map_or(0, |d| d.meter.forwards);

    let mut pending = std::mem::take(&mut state.speculative);
    let mut pending_probs = std::mem::take(&mut state.speculative_probs);
    if let Some(d) = draft {
        pending.extend(d.chain.tokens);
        pending_probs.extend(d.chain.probs);
    }

    let scored = target.result.candidates.clone();
    let guidance = GuidanceChain::from(target.result);
    let mut keep_from = None;
    let (mut new_tokens, verify) = if pending.is_empty() {
        (guidance.tokens.clone(), None)
    } else {
        let v = (common_prefix(&scored, &pending) + 1).min(pending.len());
        let mut rng = round_rng(state.seed, round, STREAM_VERIFY);
        let first_reject = verify_against_target(
            &pending[..v],
            &pending_probs[..v],
            &guidance.probs[..v],
            &cfg.sampler,
            &mut rng,
        )?;
        let outcome = guided_output(
            &pending[..v],
            &pending_probs[..v],
            &guidance,
            first_reject,
            &cfg.sampler,
            &mut rng,
        )?;
        if outcome.kind == OutcomeKind::AllAccepted && v < pending.len() {
            keep_from = Some(v);
        }
        (outcome.committed.clone(), Some(outcome))
    };
    if new_tokens.is_empty() {
        return Err(SpecparError::Invariant(format!("round {round} committed nothing")));
    }

    let stop = eos(vocab_size);
    let remaining = cfg.max_new_tokens.saturating_sub(state.generated().len());
    if let Some(pos) = new_tokens.iter().position(|&t| t == stop) {
        new_tokens.truncate(pos + 1);
        state.finished = true;
    }
    if new_tokens.len() >= remaining {
        new_tokens.truncate(remaining);
        state.finished = true;
    }

    let step = round + 1;
    let order = exec.with_store(|s| s.max_order());
    let old_len = state.committed.len();
    let rejected_chain = verify.as_ref().and_then(|o| {
        o.kind.is_rejection().then(|| {
            let i = o.accepted_len;
            let mut ctx = state.committed.clone();
            ctx.extend_from_slice(&pending[..i]);
            let mut chain = last_n(&ctx, order).to_vec();
            chain.extend_from_slice(&pending[i..]);
            chain
        })
    });
    let mut accepted = last_n(&state.committed, order).to_vec();
    accepted.extend_from_slice(&new_tokens);
    state.committed.extend_from_slice(&new_tokens);
    exec.with_store(|store| {
        store.record_accepted(&accepted, step);
        if cfg.rejected_cache {
            if let Some(chain) = &rejected_chain {
                store.record_rejected(chain, step);
            }
        }
    });

    if let (Some(a), false) = (keep_from, state.finished) {
        state.speculative = pending.split_off(a);
        state.speculative_probs = pending_probs.split_off(a);
    }
    state.sync_mode(cfg.gamma);
    state.round += 1;
    state.clock += clock_delta;

    let committed = state.committed[old_len..].to_vec();
    Ok(RoundTrace {
        round,
        mode,
        prev_tokens,
        draft_len,
        guidance_len,
        retrievals,
        verify: verify.map(|o| VerifyEvent {
            round,
            kind: o.kind,
            accepted_len: o.accepted_len,
            committed_len: committed.len(),
            bonus_len: o.bonus_len(),
        }),
        committed,
        speculative_len: state.speculative.len(),
        draft_forwards,
        draft_time,
        target_time,
        clock_delta,
        clock: state.clock,
    })
}

fn validate_run(models: Models<'_>, cfg: &PipelineConfig, latency: &LatencyConfig) -> Result<()> {
    cfg.validate()?;
    latency.validate()?;
    if models.draft.vocab_size() != models.target.vocab_size() {
        return Err(SpecparError::InvalidConfig(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            models.draft.vocab_size(),
            models.target.vocab_size()
        )));
    }
    if models.target.forward_cost() != latency.t_target
        || (cfg.draft != DraftStrategy::None && models.draft.forward_cost() != latency.t_draft)
    {
        return Err(SpecparError::InvalidConfig(
            "model forward costs must equal t_target and t_draft".into(),
        ));
    }
    Ok(())
}

/// Runs a single round with the serial engine.
pub fn run_round(
    state: &mut PipelineState,
    models: Models<'_>,
    store: &mut HierarchicalDatastore,
    cfg: &PipelineConfig,
    latency: &LatencyConfig,
) -> Result<RoundTrace> {
    validate_run(models, cfg, latency)?;
    let sides = Sides {
        models,
        cfg,
        latency,
        seed: state.seed,
    };
    let mut exec = SerialExec { sides, store };
    execute_round(&mut exec, state, cfg, latency, models.target.vocab_size())
}

fn drive<E: Exec>(
    exec: &mut E,
    prompt: &[TokenId],
    cfg: &PipelineConfig,
    latency: &LatencyConfig,
    vocab_size: usize,
) -> Result<RunOutput> {
    let mut state = PipelineState::new(prompt, cfg.gamma, cfg.sampler.rng_seed);
    exec.with_store(|s| s.record_accepted(prompt, 0));
    let mut traces = Vec::new();
    let result: Result<()> = (|| {
        while !state.finished {
            traces.push(execute_round(exec, &mut state, cfg, latency, vocab_size)?);
        }
        Ok(())
    })();
    exec.with_store(|s| s.flush_session());
    result?;
    Ok(RunOutput {
        tokens: state.generated().to_vec(),
        metrics: compute_metrics(&traces, latency),
        traces,
    })
}

/// Generates up to `cfg.max_new_tokens` tokens after `prompt`.
///
/// The session layers of `store` are seeded with the prompt and flushed on
/// return, so the same store can be reused across runs.
pub fn run(
    prompt: &[TokenId],
    models: Models<'_>,
    store: &mut HierarchicalDatastore,
    cfg: &PipelineConfig,
    latency: &LatencyConfig,
) -> Result<RunOutput> {
    validate_run(models, cfg, latency)?;
    for t in prompt {
        if t.index() >= models.target.vocab_size() {
            return Err(SpecparError::TokenOutOfRange {
                token: t.0,
                vocab: models.target.vocab_size(),
            });
        }
    }
    let sides = Sides {
        models,
        cfg,
        latency,
        seed: cfg.sampler.rng_seed,
    };
    let vocab = models.target.vocab_size();
    match cfg.engine {
        Engine::Serial => drive(&mut SerialExec { sides, store }, prompt, cfg, latency, vocab),
        Engine::Concurrent => {
            let lock = RwLock::new(store);
            std::thread::scope(|scope| {
                let (draft_tx, draft_rx) = mpsc::channel::<(DraftJob, Reply<DraftOutput>)>();
                let (target_tx, target_rx) = mpsc::channel::<(TargetJob, Reply<TargetOutput>)>();
                let lock = &lock;
                scope.spawn(move || {
                    for (job, reply) in draft_rx {
                        let store = lock.read().unwrap_or_else(|e| e.into_inner());
                        let _ = reply.send(sides.draft(&store, &job));
                    }
                });
                scope.spawn(move || {
                    for (job, reply) in target_rx {
                        let store = lock.read().unwrap_or_else(|e| e.into_inner());
                        let _ = reply.send(sides.target(&store, &job));
                    }
                });
                let mut exec = ConcurrentExec {
                    store: lock,
                    draft_tx,
                    target_tx,
                };
                drive(&mut exec, prompt, cfg, latency, vocab)
            })
        }
    }
}
