//! Hierarchical n-gram retrieval datastore.
//!
//! Three occurrence-pointer indices are searched in priority order: a static
//! prior, the dynamic layer holding target-verified output, and a layer of
//! rejected draft chains. When none of them matches, the context itself is
//! scanned prompt-lookup style.
//!
//! Selection order is lexicographic: longer suffix match first, then layer
//! (prior > dynamic > rejected > context), then the most recent insertion
//! step. Only occurrences followed by at least one token count as hits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpecparError};
use crate::model::TokenId;

pub const DEFAULT_MAX_ORDER: usize = 3;
pub const DEFAULT_DEPTH: usize = 10;

/// Where a lookup found its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Prior,
    Dynamic,
    Rejected,
    ContextFallback,
    Miss,
}

impl Source {
    /// True when one of the three stored layers answered.
    pub fn is_layer_hit(self) -> bool {
        matches!(self, Source::Prior | Source::Dynamic | Source::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub seq: u32,
    /// Position of the n-gram's last token inside the sequence.
    pub end: u32,
    pub step: u64,
}

impl Occurrence {
    #[inline]
    fn recency_key(&self) -> (u64, u32, u32) {
        (self.step, self.seq, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupResult {
    pub candidates: Vec<TokenId>,
    pub source: Source,
    pub matched_order: usize,
}

impl LookupResult {
    pub fn miss() -> Self {
        LookupResult {
            candidates: Vec::new(),
            source: Source::Miss,
            matched_order: 0,
        }
    }
}

/// Append-only store of token sequences with every n-gram (1 ≤ n ≤ N)
/// indexed by its occurrences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NGramIndex {
    max_order: usize,
    sequences: Vec<Vec<TokenId>>,
    index: HashMap<Vec<TokenId>, Vec<Occurrence>>,
    entries: usize,
}

impl NGramIndex {
    pub fn new(max_order: usize) -> Self {
        NGramIndex {
            max_order,
            ..Default::default()
        }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total number of occurrence references held by the index.
    pub fn entry_count(&self) -> usize {
        self.entries
    }

    pub fn occurrences(&self, ngram: &[TokenId]) -> &[Occurrence] {
        self.index.get(ngram).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, tokens: &[TokenId], step: u64) {
        if tokens.is_empty() {
            return;
        }
        let seq = self.sequences.len() as u32;
        for end in 0..tokens.len() {
            for n in 1..=self.max_order.min(end + 1) {
                let key = &tokens[end + 1 - n..=end];
                let occ = Occurrence {
                    seq,
                    end: end as u32,
                    step,
                };
                match self.index.get_mut(key) {
                    Some(list) => list.push(occ),
                    None => {
                        self.index.insert(key.to_vec(), vec![occ]);
                    }
                }
                self.entries += 1;
            }
        }
        self.sequences.push(tokens.to_vec());
    }

    /// Most recent occurrence of `ngram` that has a continuation.
    pub fn best_hit(&self, ngram: &[TokenId]) -> Option<Occurrence> {
        self.occurrences(ngram)
            .iter()
            .filter(|o| (o.end as usize + 1) < self.sequences[o.seq as usize].len())
            .max_by_key(|o| o.recency_key())
            .copied()
    }

    /// Up to `depth` tokens following an occurrence.
    pub fn continuation(&self, occ: Occurrence, depth: usize) -> &[TokenId] {
        let seq = &self.sequences[occ.seq as usize];
        let start = occ.end as usize + 1;
        &seq[start..(start + depth).min(seq.len())]
    }

    pub fn clear(&mut self) {
        self.sequences.clear();
        self.index.clear();
        self.entries = 0;
    }

    /// `dstore-v1` text: a header line then one sequence per line. Sequence
    /// `i` is re-inserted with step `i` on load.
    pub fn to_text(&self) -> String {
        let mut out = format!("dstore-v1 {} {}\n", self.max_order, self.sequences.len());
        for seq in &self.sequences {
            let mut first = true;
            for t in seq {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{t}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SpecparError::parse(1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "dstore-v1" {
            return Err(SpecparError::parse(1, "expected `dstore-v1 <N> <count>`"));
        }
        let max_order: usize = fields[1].parse().map_err(|_| SpecparError::parse(1, "bad N"))?;
        let count: usize = fields[2].parse().map_err(|_| SpecparError::parse(1, "bad count"))?;
        let mut index = NGramIndex::new(max_order);
        for (i, line) in lines.enumerate() {
            let seq = parse_token_line(line).map_err(|msg| SpecparError::parse(i + 2, msg))?;
            if seq.is_empty() {
                continue;
            }
            let step = index.sequences.len() as u64;
            index.insert(&seq, step);
        }
        if index.sequences.len() != count {
            return Err(SpecparError::parse(
                0,
                format!("header promises {count} sequences, found {}", index.sequences.len()),
            ));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SpecparError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecparError::io(path, e))?;
        Self::from_text(&text)
    }
}

pub(crate) fn parse_token_line(line: &str) -> std::result::Result<Vec<TokenId>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<u32>().map(TokenId).map_err(|e| e.to_string()))
        .collect()
}

/// Index holding the first `rounds` corpus sequences; `rounds = 0` gives an
/// empty prior.
pub fn build_prior(corpora: &[Vec<TokenId>], max_order: usize, rounds: usize) -> NGramIndex {
    let mut index = NGramIndex::new(max_order);
    for (i, seq) in corpora.iter().take(rounds).enumerate() {
        index.insert(seq, i as u64);
    }
    index
}

/// Prior, dynamic and rejected layers shared by the draft and target sides.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalDatastore {
    prior: NGramIndex,
    dynamic: NGramIndex,
    rejected: NGramIndex,
    max_order: usize,
    depth: usize,
    step_counter: u64,
}

impl HierarchicalDatastore {
    pub fn new(prior: NGramIndex, max_order: usize, depth: usize) -> Self {
        HierarchicalDatastore {
            prior,
            dynamic: NGramIndex::new(max_order),
            rejected: NGramIndex::new(max_order),
            max_order,
            depth,
            step_counter: 0,
        }
    }

    pub fn empty(max_order: usize, depth: usize) -> Self {
        Self::new(NGramIndex::new(max_order), max_order, depth)
    }

    pub fn prior(&self) -> &NGramIndex {
        &self.prior
    }

    pub fn dynamic(&self) -> &NGramIndex {
        &self.dynamic
    }

    pub fn rejected(&self) -> &NGramIndex {
        &self.rejected
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    fn layers(&self) -> [(Source, &NGramIndex); 3] {
        [
            (Source::Prior, &self.prior),
            (Source::Dynamic, &self.dynamic),
            (Source::Rejected, &self.rejected),
        ]
    }

    pub fn lookup(&self, context: &[TokenId], depth: usize) -> LookupResult {
        if context.is_empty() || depth == 0 {
            return LookupResult::miss();
        }
        for n in (1..=self.max_order.min(context.len())).rev() {
            let suffix = &context[context.len() - n..];
            for (source, layer) in self.layers() {
                if let Some(occ) = layer.best_hit(suffix) {
                    return LookupResult {
                        candidates: layer.continuation(occ, depth).to_vec(),
                        source,
                        matched_order: n,
                    };
                }
            }
        }
        context_fallback(context, self.max_order, depth)
    }

    fn bump(&mut self, step: u64) {
        self.step_counter = self.step_counter.max(step + 1);
    }

    pub fn record_accepted(&mut self, tokens: &[TokenId], step: u64) {
        if tokens.is_empty() {
            return;
        }
        self.dynamic.insert(tokens, step);
        self.bump(step);
    }

    /// Stores a discarded chain, keyed by the context that preceded it.
    pub fn record_rejected(&mut self, chain: &[TokenId], step: u64) {
        if chain.is_empty() {
            return;
        }
        self.rejected.insert(chain, step);
        self.bump(step);
    }

    pub fn flush_session(&mut self) {
        self.dynamic.clear();
        self.rejected.clear();
        self.step_counter = 0;
    }
}

/// Prompt-lookup scan: the longest suffix n-gram with an earlier occurrence
/// in the context itself, most recent occurrence first.
pub fn context_fallback(context: &[TokenId], max_order: usize, depth: usize) -> LookupResult {
    let len = context.len();
    if len < 2 || depth == 0 {
        return LookupResult::miss();
    }
    for n in (1..=max_order.min(len - 1)).rev() {
        let suffix = &context[len - n..];
        for start in (0..len - n).rev() {
            if &context[start..start + n] == suffix {
                let from = start + n;
                return LookupResult {
                    candidates: context[from..(from + depth).min(len)].to_vec(),
                    source: Source::ContextFallback,
                    matched_order: n,
                };
            }
        }
    }
    LookupResult::miss()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokens;
    use proptest::prelude::*;

    fn prior_with(seqs: &[&[u32]], n: usize) -> NGramIndex {
        let corpus: Vec<Vec<TokenId>> = seqs.iter().map(|s| tokens(s)).collect();
        build_prior(&corpus, n, corpus.len())
    }

    #[test]
    fn insert_indexes_bigram_end() {
        let mut idx = NGramIndex::new(2);
        idx.insert(&tokens(&[5, 6, 7, 8, 9]), 0);
        let occ = idx.occurrences(&tokens(&[6, 7]));
        assert_eq!(occ, &[Occurrence { seq: 0, end: 2, step: 0 }]);
    }

    #[test]
    fn duplicate_insert_keeps_both() {
        let mut idx = NGramIndex::new(2);
        idx.insert(&tokens(&[5, 6, 7]), 1);
        idx.insert(&tokens(&[5, 6, 7]), 4);
        let steps: Vec<u64> = idx.occurrences(&tokens(&[6, 7])).iter().map(|o| o.step).collect();
        assert_eq!(steps, vec![1, 4]);
    }

    #[test]
    fn entry_count_matches_formula() {
        let mut idx = NGramIndex::new(3);
        let (k, l) = (7usize, 12usize);
        for i in 0..k {
            let seq: Vec<TokenId> = (0..l).map(|j| TokenId(((i * 31 + j * 7) % 5) as u32)).collect();
            idx.insert(&seq, i as u64);
        }
        // Oracle: count every (start, n) window directly.
        let mut expected = 0;
        for seq in idx.sequences() {
            for n in 1..=3 {
                expected += seq.windows(n).count();
            }
        }
        assert_eq!(expected, (1..=3).map(|n| (l - n + 1) * k).sum::<usize>());
        assert_eq!(idx.entry_count(), expected);
    }

    #[test]
    fn lookup_prior_hit() {
        let store = HierarchicalDatastore::new(prior_with(&[&[5, 6, 7, 8, 9]], 2), 2, 10);
        let r = store.lookup(&tokens(&[1, 6, 7]), 2);
        assert_eq!(r.candidates, tokens(&[8, 9]));
        assert_eq!(r.source, Source::Prior);
        assert_eq!(r.matched_order, 2);
    }

    #[test]
    fn layer_priority_beats_recency() {
        let mut store = HierarchicalDatastore::new(prior_with(&[&[5, 6, 7, 8, 9]], 2), 2, 10);
        store.record_accepted(&tokens(&[6, 7, 1, 2]), 100);
        let r = store.lookup(&tokens(&[6, 7]), 2);
        assert_eq!((r.candidates, r.source), (tokens(&[8, 9]), Source::Prior));
    }

    #[test]
    fn context_fallback_scan() {
        let store = HierarchicalDatastore::empty(3, 10);
        let r = store.lookup(&tokens(&[1, 2, 3, 1, 2]), 2);
        assert_eq!(r.candidates, tokens(&[3, 1]));
        assert_eq!(r.source, Source::ContextFallback);
        assert_eq!(r.matched_order, 2);
        assert_eq!(store.lookup(&tokens(&[1, 2, 3]), 2), LookupResult::miss());
    }

    #[test]
    fn accepted_tokens_become_dynamic_hits() {
        let mut store = HierarchicalDatastore::empty(3, 10);
        store.record_accepted(&tokens(&[4, 5, 6]), 0);
        let r = store.lookup(&tokens(&[9, 4, 5]), 3);
        assert_eq!(r.candidates, tokens(&[6]));
        assert_eq!(r.source, Source::Dynamic);
        store.record_accepted(&[], 1);
        assert_eq!(store.dynamic().sequences().len(), 1);
    }

    #[test]
    fn interleaved_accepts_follow_step_order() {
        let mut store = HierarchicalDatastore::empty(2, 10);
        // Steps deliberately inserted out of order.
        let chains: [(&[u32], u64); 4] = [
            (&[1, 2, 10], 3),
            (&[1, 2, 11], 9),
            (&[1, 2, 12], 5),
            (&[1, 2, 13], 7),
        ];
        for (c, s) in chains {
            store.record_accepted(&tokens(c), s);
        }
        // Oracle: scan the chains for the largest step.
        let winner = chains.iter().max_by_key(|(_, s)| *s).unwrap().0[2];
        let r = store.lookup(&tokens(&[1, 2]), 1);
        assert_eq!(r.candidates, tokens(&[winner]));
        assert_eq!(store.step_counter(), 10);
    }

    #[test]
    fn rejected_layer_is_last_resort() {
        let mut store = HierarchicalDatastore::empty(2, 10);
        store.record_rejected(&tokens(&[3, 4, 5, 6]), 0);
        let r = store.lookup(&tokens(&[3, 4]), 4);
        assert_eq!((r.candidates, r.source), (tokens(&[5, 6]), Source::Rejected));
        store.record_accepted(&tokens(&[3, 4, 9]), 1);
        let r = store.lookup(&tokens(&[3, 4]), 4);
        assert_eq!((r.candidates, r.source), (tokens(&[9]), Source::Dynamic));
    }

    #[test]
    fn empty_prior_falls_through() {
        let corpus = vec![tokens(&[1, 2, 3, 4])];
        let prior = build_prior(&corpus, 3, 0);
        assert!(prior.is_empty());
        let store = HierarchicalDatastore::new(prior, 3, 10);
        assert_eq!(store.lookup(&tokens(&[1, 2]), 4).source, Source::Miss);
    }

    #[test]
    fn prior_hits_grow_with_rounds() {
        let corpus: Vec<Vec<TokenId>> = (0..12)
            .map(|i| (0..40).map(|j| TokenId(((i * 13 + j * j) % 9) as u32)).collect())
            .collect();
        let queries: Vec<Vec<TokenId>> = (0..200)
            .map(|q| (0..3).map(|j| TokenId(((q * 7 + j * 5) % 9) as u32)).collect())
            .collect();
        let hits = |k: usize| {
            let store = HierarchicalDatastore::new(build_prior(&corpus, 3, k), 3, 10);
            queries
                .iter()
                .filter(|q| store.lookup(q, 10).source == Source::Prior)
                .count()
        };
        assert!(hits(10) >= hits(5));
        assert!(hits(5) >= hits(0));
    }

    #[test]
    fn prior_size_is_linear_in_rounds() {
        let corpus: Vec<Vec<TokenId>> = (0..16)
            .map(|i| (0..64).map(|j| TokenId(((i + j * 3) % 20) as u32)).collect())
            .collect();
        let size = |k| build_prior(&corpus, 3, k).to_text().len() as f64;
        let per_round = size(8) / 8.0;
        for k in [2, 4, 16] {
            let ratio = size(k) / (per_round * k as f64);
            assert!((ratio - 1.0).abs() < 0.1, "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn flush_keeps_prior() {
        let mut store = HierarchicalDatastore::new(prior_with(&[&[1, 2, 3]], 2), 2, 10);
        let before = store.prior().to_text();
        store.record_accepted(&tokens(&[7, 8, 9]), 0);
        store.record_rejected(&tokens(&[8, 9, 4]), 1);
        store.flush_session();
        assert!(store.dynamic().is_empty() && store.rejected().is_empty());
        assert_eq!(store.prior().to_text(), before);
        assert_eq!(store.prior().entry_count(), 5);
        assert_eq!(store.lookup(&tokens(&[7, 8]), 2).source, Source::Miss);
        assert_eq!(store.lookup(&tokens(&[1, 2]), 2).source, Source::Prior);
    }

    #[test]
    fn dstore_text_round_trip() {
        let prior = prior_with(&[&[1, 2, 3], &[4, 5], &[6]], 3);
        let back = NGramIndex::from_text(&prior.to_text()).unwrap();
        assert_eq!(back, prior);
        assert!(NGramIndex::from_text("dstore-v1 3 2\n1 2\n").is_err());
        assert!(NGramIndex::from_text("dstore-v1 3 1\n1 x\n").is_err());
    }

    /// Brute-force selection: enumerate every (n, layer, occurrence) that
    /// matches and has a continuation, take the lexicographic maximum.
    type Rank = (usize, u8, (u64, u32, u32));

    fn oracle_lookup(store: &HierarchicalDatastore, ctx: &[TokenId], depth: usize) -> LookupResult {
        let mut best: Option<(Rank, Vec<TokenId>, Source)> = None;
        let layers = [
            (Source::Prior, store.prior(), 3u8),
            (Source::Dynamic, store.dynamic(), 2),
            (Source::Rejected, store.rejected(), 1),
        ];
        for (source, layer, rank) in layers {
            for (si, seq) in layer.sequences().iter().enumerate() {
                for end in 0..seq.len().saturating_sub(1) {
                    for n in 1..=store.max_order().min(ctx.len()).min(end + 1) {
                        if seq[end + 1 - n..=end] != ctx[ctx.len() - n..] {
                            continue;
                        }
                        let occ = layer
                            .occurrences(&seq[end + 1 - n..=end])
                            .iter()
                            .find(|o| o.seq as usize == si && o.end as usize == end)
                            .unwrap();
                        let key = (n, rank, occ.recency_key());
                        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                            let cont = seq[end + 1..(end + 1 + depth).min(seq.len())].to_vec();
                            best = Some((key, cont, source));
                        }
                    }
                }
            }
        }
        match best {
            Some(((n, _, _), candidates, source)) => LookupResult {
                candidates,
                source,
                matched_order: n,
            },
            None => context_fallback(ctx, store.max_order(), depth),
        }
    }

    proptest! {
        #[test]
        fn lookup_matches_exhaustive_priority_order(
            prior in prop::collection::vec(prop::collection::vec(0u32..4, 1..8), 0..4),
            dynamic in prop::collection::vec((prop::collection::vec(0u32..4, 1..8), 0u64..6), 0..4),
            rejected in prop::collection::vec((prop::collection::vec(0u32..4, 1..8), 0u64..6), 0..4),
            ctx in prop::collection::vec(0u32..4, 1..7),
            depth in 1usize..5,
        ) {
            let prior: Vec<Vec<TokenId>> = prior.iter().map(|s| tokens(s)).collect();
            let mut store = HierarchicalDatastore::new(build_prior(&prior, 3, prior.len()), 3, depth);
            for (s, step) in &dynamic {
                store.record_accepted(&tokens(s), *step);
            }
            for (s, step) in &rejected {
                store.record_rejected(&tokens(s), *step);
            }
            let ctx = tokens(&ctx);
            let got = store.lookup(&ctx, depth);
            prop_assert_eq!(&got, &oracle_lookup(&store, &ctx, depth));
            prop_assert!(got.candidates.len() <= depth);
            if got.source == Source::Miss {
                prop_assert!(got.candidates.is_empty());
            }
        }
    }
}
