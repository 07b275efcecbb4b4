//! Closed-form speedup theory for speculative and pipelined speculative
//! decoding, with Monte Carlo and discrete-event estimators to check it.
//!
//! Notation: `alpha` is the per-token acceptance rate, `gamma` the draft
//! length, `c` the speed ratio `t_target / t_draft`, and `k` the expected
//! number of rounds up to and including the first round with a rejection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecparError};

const ONE_EPS: f64 = 1e-12;

fn near_one(alpha: f64) -> bool {
    (1.0 - alpha).abs() < ONE_EPS
}

/// Inputs to the retrieval-scaled speedup model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub alpha: f64,
    pub gamma: usize,
    pub c: f64,
    /// Average matched tokens per retrieval forward.
    pub amt: f64,
    /// Expected draft-derived tokens committed per segment.
    pub e_ld: f64,
    /// Expected guidance bonus tokens per segment.
    pub e_bonus: f64,
}

impl TheoryParams {
    pub fn new(alpha: f64, gamma: usize, c: f64) -> Self {
        TheoryParams {
            alpha,
            gamma,
            c,
            amt: 0.0,
            e_ld: 0.0,
            e_bonus: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SpecparError::InvalidConfig(what.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.gamma == 0 {
            return bad("gamma must be at least 1");
        }
        if !self.c.is_finite() || self.c <= 0.0 {
            return bad("c must be positive");
        }
        if !(self.amt >= 0.0 && self.e_ld >= 0.0 && self.e_bonus >= 0.0) {
            return bad("amt, e_ld and e_bonus must be non-negative");
        }
        Ok(())
    }
}

/// Expected tokens from one round: `(1 - alpha^(gamma+1)) / (1 - alpha)`.
pub fn expected_single_round(alpha: f64, gamma: usize) -> f64 {
    if near_one(alpha) {
        return gamma as f64 + 1.0;
    }
    (1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha)
}

/// Expected rounds up to the first rejection: `1 / (1 - alpha^gamma)`.
pub fn expected_rounds(alpha: f64, gamma: usize) -> Result<f64> {
    let ag = alpha.powi(gamma as i32);
    if near_one(alpha) || ag >= 1.0 {
        return Err(SpecparError::NoRejection);
    }
    Ok(1.0 / (1.0 - ag))
}

/// Expected tokens over `k` rounds: `(k-1)(gamma+1) + E[L_s]`.
pub fn expected_multi_round(alpha: f64, gamma: usize) -> Result<f64> {
    let k = expected_rounds(alpha, gamma)?;
    Ok((k - 1.0) * (gamma as f64 + 1.0) + expected_single_round(alpha, gamma))
}

/// Draft-then-verify speedup `E[L_k] C / (k (gamma + C))`.
pub fn speedup_sd(alpha: f64, gamma: usize, c: f64) -> Result<f64> {
    let g = gamma as f64;
    if near_one(alpha) {
        return Ok((g + 1.0) * c / (g + c));
    }
    let k = expected_rounds(alpha, gamma)?;
    Ok(expected_multi_round(alpha, gamma)? * c / (k * (g + c)))
}

/// Pipelined speedup `(E[L_k] - k + 1) C / (k gamma + C)`.
pub fn speedup_psd(alpha: f64, gamma: usize, c: f64) -> Result<f64> {
    if near_one(alpha) {
        return Ok(c);
    }
    let k = expected_rounds(alpha, gamma)?;
    let l = expected_multi_round(alpha, gamma)? - k + 1.0;
    Ok(l * c / (k * gamma as f64 + c))
}

/// `k gamma C / (k gamma + C)`, the intermediate bound on the pipelined
/// speedup; tends to `C` as `alpha -> 1`.
pub fn psd_bound(alpha: f64, gamma: usize, c: f64) -> Result<f64> {
    if near_one(alpha) {
        return Ok(c);
    }
    let kg = expected_rounds(alpha, gamma)? * gamma as f64;
    Ok(kg * c / (kg + c))
}

/// Retrieval-scaled speedup
/// `(E[L_d] + E[L_bonus]) C' / (k gamma + C')` with `C' = C (1 + AMT)`.
///
/// `gamma` is the number of draft tokens per round. With retrieval drafting
/// that is the forward count times `1 + AMT`.
pub fn speedup_double(params: &TheoryParams, k: f64, gamma: f64) -> f64 {
    let c_eff = params.c * (1.0 + params.amt);
    (params.e_ld + params.e_bonus) * c_eff / (k * gamma + c_eff)
}

/// Monte Carlo estimates of `(E[L_s], k, E[L_k])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub single: f64,
    pub rounds: f64,
    pub multi: f64,
}

/// Simulates i.i.d. Bernoulli(`alpha`) acceptance streams.
///
/// Each trial runs rounds of `gamma` proposals until a round contains a
/// rejection, giving a round count `K`. A further independent round yields
/// `L`, and the trial contributes `L` to the single-round estimate, `K` to
/// the round estimate and `(K-1)(gamma+1) + L` to the multi-round estimate.
pub fn mc_oracle(alpha: f64, gamma: usize, trials: u64, seed: u64) -> McEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gamma as u64;
    let round = |rng: &mut ChaCha8Rng| -> u64 {
        let mut a = 0;
        while a < g && rng.gen::<f64>() < alpha {
            a += 1;
        }
        a
    };
    let (mut single, mut rounds, mut multi) = (0u64, 0u64, 0u64);
    for _ in 0..trials {
        let mut k = 1;
        while round(&mut rng) == g {
            k += 1;
        }
        let l = round(&mut rng) + 1;
        single += l;
        rounds += k;
        multi += (k - 1) * (g + 1) + l;
    }
    let n = trials.max(1) as f64;
    McEstimate {
        single: single as f64 / n,
        rounds: rounds as f64 / n,
        multi: multi as f64 / n,
    }
}

/// Aggregate of a latency simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesResult {
    pub tokens: f64,
    pub time: f64,
    /// `tokens * t_target / time`, with `t_draft = 1` and `t_target = C`.
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    Serial,
    Pipelined,
}

fn simulate(alpha: f64, gamma: usize, c: f64, episodes: u64, seed: u64, schedule: Schedule) -> DesResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gamma as u64;
    let round = |rng: &mut ChaCha8Rng| -> u64 {
        let mut a = 0;
        while a < g && rng.gen::<f64>() < alpha {
            a += 1;
        }
        a
    };
    let (t_draft, t_target) = (1.0, c);
    let (mut tokens, mut time) = (0u64, 0.0f64);
    for _ in 0..episodes {
        // Event loop over rounds of one episode; the episode ends with the
        // first round that rejects.
        let mut clock = 0.0;
        let mut ks = 0u64;
        loop {
            ks += 1;
            let a = round(&mut rng);
            match schedule {
                Schedule::Serial => clock += g as f64 * t_draft + t_target,
                Schedule::Pipelined => clock += g as f64 * t_draft,
            }
            if a < g {
                break;
            }
        }
        if schedule == Schedule::Pipelined {
            clock += t_target;
        }
        let last = round(&mut rng) + 1;
        tokens += match schedule {
            Schedule::Serial => (ks - 1) * (g + 1) + last,
            Schedule::Pipelined => (ks - 1) * g + last,
        };
        time += clock;
    }
    let tokens = tokens as f64;
    DesResult {
        tokens,
        time,
        speedup: tokens * t_target / time,
    }
}

/// Simulated draft-then-verify decoding: every round drafts `gamma` tokens
/// and then waits for one target forward.
pub fn simulate_sd(alpha: f64, gamma: usize, c: f64, episodes: u64, seed: u64) -> DesResult {
    simulate(alpha, gamma, c, episodes, seed, Schedule::Serial)
}

/// Simulated pipelined decoding: target forwards hide behind drafting, so an
/// episode costs its drafting time plus one exposed target forward.
pub fn simulate_psd(alpha: f64, gamma: usize, c: f64, episodes: u64, seed: u64) -> DesResult {
    simulate(alpha, gamma, c, episodes, seed, Schedule::Pipelined)
}

/// One row of the theory surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub alpha: f64,
    pub gamma: usize,
    pub c: f64,
    pub e_single: f64,
    pub k: f64,
    pub e_multi: f64,
    pub s_sd: f64,
    pub s_psd: f64,
    pub bound: f64,
}

/// All closed forms at one point. `alpha = 1` reports the limits.
pub fn theory_row(alpha: f64, gamma: usize, c: f64) -> TheoryRow {
    let k = expected_rounds(alpha, gamma).unwrap_or(f64::INFINITY);
    TheoryRow {
        alpha,
        gamma,
        c,
        e_single: expected_single_round(alpha, gamma),
        k,
        e_multi: expected_multi_round(alpha, gamma).unwrap_or(f64::INFINITY),
        s_sd: speedup_sd(alpha, gamma, c).unwrap_or(f64::NAN),
        s_psd: speedup_psd(alpha, gamma, c).unwrap_or(f64::NAN),
        bound: psd_bound(alpha, gamma, c).unwrap_or(f64::NAN),
    }
}

/// Closed forms over the cartesian product of the inputs.
pub fn theory_surface(alphas: &[f64], gammas: &[usize], cs: &[f64]) -> Vec<TheoryRow> {
    let mut rows = Vec::with_capacity(alphas.len() * gammas.len() * cs.len());
    for &a in alphas {
        for &g in gammas {
            for &c in cs {
                rows.push(theory_row(a, g, c));
            }
        }
    }
    rows
}
