//! Acceptance tests, residual correction, and the guidance rule that turns a
//! target retrieval forward into corrections and extensions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecparError};
use crate::model::{sample_weights, ProbVector, SamplerConfig, TokenId};
use crate::speculation::RetrievalResult;

/// Output of one target retrieval forward, used as guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceChain {
    /// `y_1 .. y_{s+1}`.
    pub tokens: Vec<TokenId>,
    /// Target distribution at every scored position; at least `tokens.len()`
    /// entries.
    pub probs: Vec<ProbVector>,
    pub matched_len: usize,
}

impl From<RetrievalResult> for GuidanceChain {
    fn from(r: RetrievalResult) -> Self {
        GuidanceChain {
            tokens: r.emitted,
            probs: r.path_probs,
            matched_len: r.matched_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    AllAccepted,
    Correction,
    Extension,
    ResidualCorrection,
}

impl OutcomeKind {
    pub fn is_rejection(self) -> bool {
        matches!(self, OutcomeKind::Correction | OutcomeKind::ResidualCorrection)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    /// Draft tokens kept before any correction.
    pub accepted_len: usize,
    pub committed: Vec<TokenId>,
    pub kind: OutcomeKind,
}

impl VerifyOutcome {
    /// Tokens committed beyond the accepted draft prefix and its correction.
    pub fn bonus_len(&self) -> usize {
        let base = self.accepted_len + usize::from(self.kind.is_rejection());
        self.committed.len().saturating_sub(base)
    }
}

/// `min(1, p[x] / q[x])`.
pub fn accept_prob(p: &ProbVector, q: &ProbVector, x: TokenId) -> Result<f64> {
    let qx = q.get(x);
    if qx <= 0.0 {
        return Err(SpecparError::ZeroDraftMass(x.0));
    }
    Ok((p.get(x) / qx).min(1.0))
}

/// `norm(max(0, p - q))`.
pub fn residual_distribution(p: &ProbVector, q: &ProbVector) -> Result<ProbVector> {
    let weights: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(SpecparError::ZeroResidual);
    }
    Ok(ProbVector::normalized(weights.into_iter().map(|w| w / total).collect()))
}

/// Draws from `norm(max(0, p - q))`.
pub fn residual_sample<R: Rng + ?Sized>(p: &ProbVector, q: &ProbVector, rng: &mut R) -> Result<TokenId> {
    let r = residual_distribution(p, q)?;
    sample_weights(r.as_slice(), rng)
}

/// First rejected draft position, or `None` if every token is accepted.
///
/// Greedy mode compares against the target argmax and consumes no draws.
/// Stochastic mode consumes one uniform per examined position.
pub fn verify_against_target<R: Rng + ?Sized>(
    draft_tokens: &[TokenId],
    draft_probs: &[ProbVector],
    target_probs: &[ProbVector],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Option<usize>> {
    if target_probs.len() < draft_tokens.len() || draft_probs.len() < draft_tokens.len() {
        return Err(SpecparError::Invariant(format!(
            "verifying {} tokens with {} target and {} draft distributions",
            draft_tokens.len(),
            target_probs.len(),
            draft_probs.len()
        )));
    }
    for (k, &x) in draft_tokens.iter().enumerate() {
        if cfg.is_greedy() {
            if x != target_probs[k].argmax() {
                return Ok(Some(k));
            }
        } else {
            let a = accept_prob(&target_probs[k], &draft_probs[k], x)?;
            let u: f64 = rng.gen();
            if u >= a {
                return Ok(Some(k));
            }
        }
    }
    Ok(None)
}

/// Combines a verification result with target guidance.
///
/// Greedy rejection at `i` commits `draft[..i]` followed by `guidance[i..]`;
/// if the guidance is shorter than `i + 1` only the target's own correction
/// is used. Greedy acceptance commits the draft plus any guidance surplus,
/// provided the guidance covers the entire draft. Stochastic rejection draws
/// one residual token and discards the guidance.
pub fn guided_output<R: Rng + ?Sized>(
    draft_tokens: &[TokenId],
    draft_probs: &[ProbVector],
    guidance: &GuidanceChain,
    first_reject: Option<usize>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<VerifyOutcome> {
    let Some(i) = first_reject else {
        let n = draft_tokens.len();
        let covered = cfg.is_greedy()
            && guidance.tokens.len() > n
            && guidance.tokens[..n] == *draft_tokens;
        return Ok(if covered {
            VerifyOutcome {
                accepted_len: n,
                committed: guidance.tokens.clone(),
                kind: OutcomeKind::Extension,
            }
        } else {
            VerifyOutcome {
                accepted_len: n,
                committed: draft_tokens.to_vec(),
                kind: OutcomeKind::AllAccepted,
            }
        });
    };
    if i >= draft_tokens.len() {
        return Err(SpecparError::Invariant(format!(
            "reject position {i} beyond draft of {}",
            draft_tokens.len()
        )));
    }

    let mut committed = draft_tokens[..i].to_vec();
    let kind = if cfg.is_greedy() {
        if i < guidance.tokens.len() && guidance.tokens[..i] == draft_tokens[..i] {
            committed.extend_from_slice(&guidance.tokens[i..]);
        } else {
            let p = guidance.probs.get(i).ok_or_else(|| {
                SpecparError::Invariant(format!("no target distribution at position {i}"))
            })?;
            committed.push(p.argmax());
        }
        OutcomeKind::Correction
    } else {
        let p = guidance.probs.get(i).ok_or_else(|| {
            SpecparError::Invariant(format!("no target distribution at position {i}"))
        })?;
        committed.push(residual_sample(p, &draft_probs[i], rng)?);
        OutcomeKind::ResidualCorrection
    };
    Ok(VerifyOutcome {
        accepted_len: i,
        committed,
        kind,
    })
}
