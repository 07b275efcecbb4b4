//! Table-based token models standing in for the draft and target LLMs.
//!
//! A [`TableModel`] maps the last `order` tokens of a context to a fixed
//! next-token distribution. Forward passes are pure, so "rolling back" a
//! model is nothing more than truncating the context handed to it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecparError};

/// Reserved begin-of-sequence id, used to left-pad short contexts.
pub const BOS: TokenId = TokenId(0);

/// Tolerance on the total mass of a [`ProbVector`].
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Converts raw ids into a token sequence.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

/// End-of-sequence id for a vocabulary of size `vocab_size`.
pub fn eos(vocab_size: usize) -> TokenId {
    TokenId(vocab_size as u32 - 1)
}

/// A validated distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(SpecparError::InvalidDistribution("empty vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(SpecparError::InvalidDistribution(format!(
                "entry {bad} is negative or not finite"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(SpecparError::InvalidDistribution(format!(
                "mass {total} differs from 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// All mass on one token.
    pub fn point_mass(vocab_size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        ProbVector(probs)
    }

    pub fn uniform(vocab_size: usize) -> Self {
        ProbVector(vec![1.0 / vocab_size as f64; vocab_size])
    }

    /// Wraps weights that already sum to one up to rounding.
    pub(crate) fn normalized(probs: Vec<f64>) -> Self {
        ProbVector(probs)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }
}

/// Temperature and seed for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            temperature: 0.0,
            rng_seed: 0,
        }
    }

    pub fn stochastic(temperature: f64, rng_seed: u64) -> Self {
        SamplerConfig {
            temperature,
            rng_seed,
        }
    }

    #[inline]
    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    /// The distribution the sampler actually draws from: `p^(1/T)`
    /// renormalized. `T = 1` returns `dist` untouched and `T = 0` returns the
    /// point mass on the argmax.
    pub fn tempered(&self, dist: &ProbVector) -> Result<ProbVector> {
        if self.is_greedy() {
            if dist.as_slice().iter().all(|&p| p == 0.0) {
                return Err(SpecparError::DegenerateDistribution);
            }
            return Ok(ProbVector::point_mass(dist.len(), dist.argmax()));
        }
        if self.temperature == 1.0 {
            return Ok(dist.clone());
        }
        let max = dist.as_slice().iter().copied().fold(0.0f64, f64::max);
        if max == 0.0 {
            return Err(SpecparError::DegenerateDistribution);
        }
        let inv_t = 1.0 / self.temperature;
        let weights: Vec<f64> = dist
            .as_slice()
            .iter()
            .map(|&p| if p == 0.0 { 0.0 } else { (p / max).powf(inv_t) })
            .collect();
        let total: f64 = weights.iter().sum();
        Ok(ProbVector(weights.into_iter().map(|w| w / total).collect()))
    }
}

/// Draws one token from `weights` (need not be normalized) with one uniform
/// draw.
pub(crate) fn sample_weights<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<TokenId> {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen();
    if total.is_nan() || total <= 0.0 {
        return Err(SpecparError::DegenerateDistribution);
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return Ok(TokenId(i as u32));
            }
        }
    }
    Ok(TokenId(last_positive as u32))
}

/// Samples a token from `dist` under `cfg`, consuming exactly one draw.
pub fn sample<R: Rng + ?Sized>(dist: &ProbVector, cfg: &SamplerConfig, rng: &mut R) -> Result<TokenId> {
    if cfg.is_greedy() {
        let _: f64 = rng.gen();
        if dist.as_slice().iter().all(|&p| p == 0.0) {
            return Err(SpecparError::DegenerateDistribution);
        }
        return Ok(dist.argmax());
    }
    let tempered = cfg.tempered(dist)?;
    sample_weights(tempered.as_slice(), rng)
}

/// Accumulates simulated time for one side of a round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostMeter {
    pub forwards: u64,
    pub lookups: u64,
    pub time: f64,
}

impl CostMeter {
    pub fn charge_forward(&mut self, cost: f64) {
        self.forwards += 1;
        self.time += cost;
    }

    pub fn charge_lookup(&mut self, cost: f64) {
        self.lookups += 1;
        self.time += cost;
    }
}

/// Deterministic order-`m` conditional table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab_size: usize,
    order: usize,
    smoothing: f64,
    table: HashMap<Vec<TokenId>, ProbVector>,
    fallback: ProbVector,
    forward_cost: f64,
}

impl TableModel {
    pub fn new(
        vocab_size: usize,
        order: usize,
        table: HashMap<Vec<TokenId>, ProbVector>,
        fallback: ProbVector,
        forward_cost: f64,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(SpecparError::InvalidConfig("vocabulary needs at least 2 tokens".into()));
        }
        if order == 0 {
            return Err(SpecparError::InvalidConfig("model order must be >= 1".into()));
        }
        if forward_cost.is_nan() || forward_cost < 0.0 {
            return Err(SpecparError::InvalidConfig("forward cost must be >= 0".into()));
        }
        if fallback.len() != vocab_size {
            return Err(SpecparError::InvalidDistribution("fallback has wrong length".into()));
        }
        for (window, row) in &table {
            if window.len() != order {
                return Err(SpecparError::InvalidConfig(format!(
                    "window of length {} in an order-{order} model",
                    window.len()
                )));
            }
            if let Some(t) = window.iter().find(|t| t.index() >= vocab_size) {
                return Err(SpecparError::TokenOutOfRange {
                    token: t.0,
                    vocab: vocab_size,
                });
            }
            if row.len() != vocab_size {
                return Err(SpecparError::InvalidDistribution("row has wrong length".into()));
            }
        }
        Ok(TableModel {
            vocab_size,
            order,
            smoothing: 0.0,
            table,
            fallback,
            forward_cost,
        })
    }

    /// Order-1 model where `next = (last + 1) mod V` with certainty.
    pub fn cycle(vocab_size: usize, forward_cost: f64) -> Self {
        let table = (0..vocab_size as u32)
            .map(|t| {
                let next = TokenId((t + 1) % vocab_size as u32);
                (vec![TokenId(t)], ProbVector::point_mass(vocab_size, next))
            })
            .collect();
        TableModel::new(
            vocab_size,
            1,
            table,
            ProbVector::uniform(vocab_size),
            forward_cost,
        )
        .expect("cycle model is well formed")
    }

    pub fn with_forward_cost(mut self, cost: f64) -> Self {
        self.forward_cost = cost;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn forward_cost(&self) -> f64 {
        self.forward_cost
    }

    pub fn fallback(&self) -> &ProbVector {
        &self.fallback
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &ProbVector)> {
        self.table.iter().map(|(w, p)| (w.as_slice(), p))
    }

    pub fn num_rows(&self) -> usize {
        self.table.len()
    }

    /// Next-token distribution given the last `order` tokens of `context`.
    /// Contexts shorter than the order are left-padded with [`BOS`].
    pub fn forward(&self, context: &[TokenId]) -> &ProbVector {
        let hit = if context.len() >= self.order {
            self.table.get(&context[context.len() - self.order..])
        } else {
            let mut window = vec![BOS; self.order - context.len()];
            window.extend_from_slice(context);
            self.table.get(window.as_slice())
        };
        hit.unwrap_or(&self.fallback)
    }

    pub fn forward_metered(&self, context: &[TokenId], meter: &mut CostMeter) -> &ProbVector {
        meter.charge_forward(self.forward_cost);
        self.forward(context)
    }

    /// One parallel pass over `candidates`: entry `k` is
    /// `forward(context ++ candidates[..k])`, so the result has
    /// `candidates.len() + 1` entries.
    pub fn forward_batch(&self, context: &[TokenId], candidates: &[TokenId]) -> Vec<&ProbVector> {
        let tail_len = context.len().min(self.order);
        let mut ext = Vec::with_capacity(tail_len + candidates.len());
        ext.extend_from_slice(&context[context.len() - tail_len..]);
        ext.extend_from_slice(candidates);
        (0..=candidates.len())
            .map(|k| self.forward(&ext[..tail_len + k]))
            .collect()
    }

    /// [`Self::forward_batch`], charging a single forward cost.
    pub fn forward_batch_metered(
        &self,
        context: &[TokenId],
        candidates: &[TokenId],
        meter: &mut CostMeter,
    ) -> Vec<&ProbVector> {
        meter.charge_forward(self.forward_cost);
        self.forward_batch(context, candidates)
    }

    /// Serializes to the `model-v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "model-v1 {} {} {}", self.vocab_size, self.order, self.smoothing).unwrap();
        let sorted: BTreeMap<&Vec<TokenId>, &ProbVector> = self.table.iter().collect();
        for (window, row) in sorted {
            for t in window {
                write!(out, "{t} ").unwrap();
            }
            out.push(':');
            write_probs(&mut out, row);
            out.push('\n');
        }
        out.push_str("fallback :");
        write_probs(&mut out, &self.fallback);
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| SpecparError::parse(1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "model-v1" {
            return Err(SpecparError::parse(1, "expected `model-v1 <V> <m> <smoothing>`"));
        }
        let vocab_size: usize = fields[1].parse().map_err(|_| SpecparError::parse(1, "bad V"))?;
        let order: usize = fields[2].parse().map_err(|_| SpecparError::parse(1, "bad m"))?;
        let smoothing: f64 = fields[3]
            .parse()
            .map_err(|_| SpecparError::parse(1, "bad smoothing"))?;

        let mut table = HashMap::new();
        let mut fallback = None;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let (lhs, rhs) = line
                .split_once(':')
                .ok_or_else(|| SpecparError::parse(lineno, "missing ':'"))?;
            let probs = rhs
                .split_whitespace()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| SpecparError::parse(lineno, e.to_string()))?;
            if probs.len() != vocab_size {
                return Err(SpecparError::parse(lineno, "wrong number of probabilities"));
            }
            let row = ProbVector::new(probs).map_err(|e| SpecparError::parse(lineno, e.to_string()))?;
            if lhs.trim() == "fallback" {
                fallback = Some(row);
                continue;
            }
            let window = lhs
                .split_whitespace()
                .map(|t| t.parse::<u32>().map(TokenId))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| SpecparError::parse(lineno, e.to_string()))?;
            table.insert(window, row);
        }
        let fallback = fallback.ok_or_else(|| SpecparError::parse(0, "missing fallback line"))?;
        let mut model = TableModel::new(vocab_size, order, table, fallback, 1.0)?;
        model.smoothing = smoothing;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SpecparError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecparError::io(path, e))?;
        Self::from_text(&text)
    }
}

fn write_probs(out: &mut String, row: &ProbVector) {
    for p in row.as_slice() {
        // 17 significant digits round-trip every f64 exactly.
        write!(out, " {p:.16e}").unwrap();
    }
}

/// Builds an order-`order` model from continuation counts with add-`smoothing`
/// normalization. Windows are taken strictly inside each sequence (no
/// padding). The fallback row is the smoothed unigram of all tokens.
pub fn build_model_from_corpus(
    corpus: &[Vec<TokenId>],
    vocab_size: usize,
    order: usize,
    smoothing: f64,
) -> Result<TableModel> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(SpecparError::EmptyCorpus);
    }
    if smoothing.is_nan() || smoothing < 0.0 {
        return Err(SpecparError::InvalidConfig("smoothing must be >= 0".into()));
    }
    if order == 0 {
        return Err(SpecparError::InvalidConfig("model order must be >= 1".into()));
    }
    let mut counts: HashMap<Vec<TokenId>, Vec<u64>> = HashMap::new();
    let mut unigram = vec![0u64; vocab_size];
    for seq in corpus {
        for &t in seq {
            if t.index() >= vocab_size {
                return Err(SpecparError::TokenOutOfRange {
                    token: t.0,
                    vocab: vocab_size,
                });
            }
            unigram[t.index()] += 1;
        }
        for w in seq.windows(order + 1) {
            let row = counts
                .entry(w[..order].to_vec())
                .or_insert_with(|| vec![0; vocab_size]);
            row[w[order].index()] += 1;
        }
    }
    let normalize = |row: &[u64]| -> ProbVector {
        let total: u64 = row.iter().sum();
        let denom = total as f64 + smoothing * vocab_size as f64;
        ProbVector(row.iter().map(|&c| (c as f64 + smoothing) / denom).collect())
    };
    let table = counts
        .iter()
        .map(|(w, row)| (w.clone(), normalize(row)))
        .collect();
    let mut model = TableModel::new(vocab_size, order, table, normalize(&unigram), 1.0)?;
    model.smoothing = smoothing;
    Ok(model)
}
