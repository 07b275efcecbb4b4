//! Retrieval forward and the iterative retrieval drafter.
//!
//! A retrieval forward looks up up to `d` candidate tokens, scores all of
//! them with one batched forward pass, keeps the longest prefix the model
//! itself would have produced, and appends one token of the model's own.
//! Chaining `gamma` of these lets a model emit far more than `gamma` tokens
//! for `gamma` forward passes whenever the datastore predicts well.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{HierarchicalDatastore, LookupResult, Source};
use crate::error::Result;
use crate::model::{sample_weights, CostMeter, ProbVector, SamplerConfig, TableModel, TokenId};

/// Result of one retrieval forward.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Candidates scored by the forward pass.
    pub candidates: Vec<TokenId>,
    /// `candidates[..matched_len]` followed by the model's own token.
    pub emitted: Vec<TokenId>,
    pub matched_len: usize,
    /// Sampling distribution at every candidate position plus one; entry `k`
    /// is conditioned on `context ++ candidates[..k]`. Tempered when `T > 0`.
    pub path_probs: Vec<ProbVector>,
    pub source: Source,
}

impl RetrievalResult {
    /// Distributions aligned with `emitted`.
    pub fn probs(&self) -> &[ProbVector] {
        &self.path_probs[..=self.matched_len]
    }
}

/// Scores `candidates` in a single forward pass and keeps the accepted prefix.
///
/// Greedy: a candidate is kept while it equals the argmax. Stochastic: the
/// candidate is treated as a point-mass proposal, kept with probability
/// `p(candidate)`, and a rejection is corrected from `p` with the candidate
/// zeroed out. Either way `emitted` is distributed exactly as the model's own
/// sampling would be.
pub fn score_candidates<R: Rng + ?Sized>(
    model: &TableModel,
    context: &[TokenId],
    candidates: Vec<TokenId>,
    source: Source,
    cfg: &SamplerConfig,
    rng: &mut R,
    meter: &mut CostMeter,
) -> Result<RetrievalResult> {
    let dists = model.forward_batch_metered(context, &candidates, meter);
    let path_probs: Vec<ProbVector> = if cfg.is_greedy() {
        dists.into_iter().cloned().collect()
    } else {
        dists
            .into_iter()
            .map(|d| cfg.tempered(d))
            .collect::<Result<_>>()?
    };

    let mut matched = 0;
    let mut tail = None;
    for (k, &cand) in candidates.iter().enumerate() {
        let p = &path_probs[k];
        if cfg.is_greedy() {
            if cand == p.argmax() {
                matched += 1;
                continue;
            }
            let _: f64 = rng.gen();
            tail = Some(p.argmax());
        } else {
            let u: f64 = rng.gen();
            if u < p.get(cand) {
                matched += 1;
                continue;
            }
            let mut residual = p.as_slice().to_vec();
            residual[cand.index()] = 0.0;
            tail = Some(sample_weights(&residual, rng)?);
        }
        break;
    }
    let tail = match tail {
        Some(t) => t,
        None if cfg.is_greedy() => {
            let _: f64 = rng.gen();
            path_probs[matched].argmax()
        }
        None => sample_weights(path_probs[matched].as_slice(), rng)?,
    };

    let mut emitted = candidates[..matched].to_vec();
    emitted.push(tail);
    Ok(RetrievalResult {
        candidates,
        emitted,
        matched_len: matched,
        path_probs,
        source,
    })
}

/// Datastore access parameters for one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval<'a> {
    pub store: &'a HierarchicalDatastore,
    pub depth: usize,
    pub lookup_cost: f64,
}

/// One retrieval forward: datastore lookup, then [`score_candidates`].
/// A miss degenerates to an ordinary single-token model step.
pub fn retrieval_forward<R: Rng + ?Sized>(
    model: &TableModel,
    retrieval: Retrieval<'_>,
    context: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut R,
    meter: &mut CostMeter,
) -> Result<RetrievalResult> {
    meter.charge_lookup(retrieval.lookup_cost);
    let LookupResult {
        candidates, source, ..
    } = retrieval.store.lookup(context, retrieval.depth);
    score_candidates(model, context, candidates, source, cfg, rng, meter)
}

/// A chain of `gamma` retrieval forwards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DraftChain {
    pub segments: Vec<RetrievalResult>,
    pub tokens: Vec<TokenId>,
    /// Draft distribution at every position of `tokens`.
    pub probs: Vec<ProbVector>,
}

impl DraftChain {
    pub fn total_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn matched_lens(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().map(|s| s.matched_len)
    }
}

/// Runs `gamma` retrieval forwards, feeding each emission back into the
/// context. With `retrieval = None` every step is a plain autoregressive step
/// and no lookup is charged. Drafting stops early once `stop` is emitted.
#[allow(clippy::too_many_arguments)]
pub fn iterative_draft<R: Rng + ?Sized>(
    model: &TableModel,
    retrieval: Option<Retrieval<'_>>,
    context: &[TokenId],
    gamma: usize,
    cfg: &SamplerConfig,
    stop: Option<TokenId>,
    rng: &mut R,
    meter: &mut CostMeter,
) -> Result<DraftChain> {
    let mut work = context.to_vec();
    let mut chain = DraftChain::default();
    for _ in 0..gamma {
        let mut seg = match retrieval {
            Some(r) => retrieval_forward(model, r, &work, cfg, rng, meter)?,
            None => score_candidates(model, &work, Vec::new(), Source::Miss, cfg, rng, meter)?,
        };
        let stop_at = stop.and_then(|s| seg.emitted.iter().position(|&t| t == s));
        if let Some(pos) = stop_at {
            seg.emitted.truncate(pos + 1);
        }
        work.extend_from_slice(&seg.emitted);
        chain.tokens.extend_from_slice(&seg.emitted);
        chain
            .probs
            .extend_from_slice(&seg.path_probs[..seg.emitted.len()]);
        chain.segments.push(seg);
        if stop_at.is_some() {
            break;
        }
    }
    Ok(chain)
}

/// Mean matched length over retrieval forwards; 0 for an empty trace.
pub fn measure_amt<'a>(traces: impl IntoIterator<Item = &'a RetrievalResult>) -> f64 {
    mean_matched(traces.into_iter().map(|r| r.matched_len))
}

pub(crate) fn mean_matched(lens: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = lens.fold((0usize, 0usize), |(s, n), l| (s + l, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Which side of the pipeline ran a retrieval forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Draft,
    Target,
}
