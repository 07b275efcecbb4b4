//! Experiment plumbing: synthetic corpora, the config file, the decoding
//! methods compared in reports, ablations, depth sweeps and report output.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{speedup_double, TheoryParams};
use crate::datastore::{build_prior, parse_token_line, HierarchicalDatastore, NGramIndex};
use crate::error::{Result, SpecparError};
use crate::model::{build_model_from_corpus, SamplerConfig, TableModel, TokenId};
use crate::pipeline::{
    run, DraftStrategy, Engine, LatencyConfig, Models, PipelineConfig, RunMetrics, RunOutput,
    Schedule,
};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "SPECPAR_SEED";

/// Generates `docs` documents totalling about `length` tokens.
///
/// Text is built in spans of `span` tokens. After the first span, each span
/// replays a uniformly chosen earlier fresh span with probability `rho` and
/// is otherwise fresh uniform tokens. Tokens avoid 0 (BOS) and `vocab - 1`
/// (EOS).
pub fn gen_corpus(
    vocab: usize,
    rho: f64,
    length: usize,
    docs: usize,
    span: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    if vocab < 3 {
        return Err(SpecparError::InvalidConfig("vocab must be at least 3".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(SpecparError::InvalidConfig(format!("rho {rho} outside [0, 1]")));
    }
    if docs == 0 || span == 0 || length < docs {
        return Err(SpecparError::InvalidConfig(
            "need docs >= 1, span >= 1 and length >= docs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = vocab as u32 - 1;
    let mut bank: Vec<Vec<TokenId>> = Vec::new();
    let mut text: Vec<TokenId> = Vec::with_capacity(length + span);
    while text.len() < length {
        let replay = !bank.is_empty() && rng.gen::<f64>() < rho;
        if replay {
            let i = rng.gen_range(0..bank.len());
            text.extend_from_slice(&bank[i]);
        } else {
            let fresh: Vec<TokenId> = (0..span).map(|_| TokenId(rng.gen_range(1..hi))).collect();
            text.extend_from_slice(&fresh);
            bank.push(fresh);
        }
    }
    text.truncate(length);
    let per = length / docs;
    let mut out: Vec<Vec<TokenId>> = text.chunks(per).map(<[TokenId]>::to_vec).collect();
    while out.len() > docs {
        let tail = out.pop().unwrap_or_default();
        if let Some(last) = out.last_mut() {
            last.extend(tail);
        }
    }
    Ok(out)
}

/// One document per line, tokens separated by spaces.
pub fn corpus_to_text(corpus: &[Vec<TokenId>]) -> String {
    let mut s = String::new();
    for doc in corpus {
        let line: Vec<String> = doc.iter().map(|t| t.0.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn corpus_from_text(text: &str) -> Result<Vec<Vec<TokenId>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_token_line(l).map_err(|m| SpecparError::parse(i + 1, m)))
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| SpecparError::io(path, e))?;
    corpus_from_text(&text)
}

pub fn write_corpus(path: &Path, corpus: &[Vec<TokenId>]) -> Result<()> {
    std::fs::write(path, corpus_to_text(corpus)).map_err(|e| SpecparError::io(path, e))
}

/// Decoding strategies compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    VanillaAR,
    StandardSD,
    /// Pipelined draft-when-verify with an autoregressive drafter.
    PSD,
    TargetRetrieval,
    DraftRetrieval,
    Double,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::VanillaAR,
        Method::StandardSD,
        Method::PSD,
        Method::TargetRetrieval,
        Method::DraftRetrieval,
        Method::Double,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaAR => "vanilla_ar",
            Method::StandardSD => "standard_sd",
            Method::PSD => "psd",
            Method::TargetRetrieval => "target_retrieval",
            Method::DraftRetrieval => "draft_retrieval",
            Method::Double => "double",
        }
    }

    fn shape(self) -> (DraftStrategy, Schedule, bool) {
        match self {
            Method::VanillaAR => (DraftStrategy::None, Schedule::Serial, false),
            Method::StandardSD => (DraftStrategy::Autoregressive, Schedule::Serial, false),
            Method::PSD => (DraftStrategy::Autoregressive, Schedule::Pipelined, false),
            Method::TargetRetrieval => (DraftStrategy::None, Schedule::Serial, true),
            Method::DraftRetrieval => (DraftStrategy::Retrieval, Schedule::Serial, false),
            Method::Double => (DraftStrategy::Retrieval, Schedule::Pipelined, true),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SpecparError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| SpecparError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vocab: usize,
    pub rho: f64,
    pub corpus_len: usize,
    pub docs: usize,
    pub span: usize,
    pub draft_order: usize,
    pub target_order: usize,
    /// Share of the training documents the draft model sees.
    pub draft_fraction: f64,
    pub smoothing: f64,
    pub latency: LatencyConfig,
    /// Draft forwards per round; `None` means `ceil(C)`.
    pub gamma: Option<usize>,
    pub depth: usize,
    pub ngram: usize,
    /// Documents loaded into the prior layer.
    pub prior_k: usize,
    pub rejected_cache: bool,
    pub temperature: f64,
    pub seed: u64,
    pub method: Method,
    pub engine: Engine,
    pub max_new_tokens: usize,
    pub prompt_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            vocab: 64,
            rho: 0.5,
            corpus_len: 8000,
            docs: 8,
            span: 8,
            draft_order: 1,
            target_order: 2,
            draft_fraction: 0.5,
            smoothing: 0.01,
            latency: LatencyConfig::new(4.0, 1.0),
            gamma: None,
            depth: 10,
            ngram: 3,
            prior_k: 4,
            rejected_cache: true,
            temperature: 0.0,
            seed: 0,
            method: Method::Double,
            engine: Engine::Serial,
            max_new_tokens: 256,
            prompt_len: 16,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| SpecparError::parse(line, format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(SpecparError::parse(line, format!("bad boolean {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| SpecparError::parse(line, "expected key = value"))?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecparError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Line number is used in error messages only.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "vocab" => self.vocab = parse_value(key, value, line)?,
            "rho" => self.rho = parse_value(key, value, line)?,
            "corpus_len" => self.corpus_len = parse_value(key, value, line)?,
            "docs" => self.docs = parse_value(key, value, line)?,
            "span" => self.span = parse_value(key, value, line)?,
            "draft_order" => self.draft_order = parse_value(key, value, line)?,
            "target_order" => self.target_order = parse_value(key, value, line)?,
            "draft_fraction" => self.draft_fraction = parse_value(key, value, line)?,
            "smoothing" => self.smoothing = parse_value(key, value, line)?,
            "t_target" => self.latency.t_target = parse_value(key, value, line)?,
            "t_draft" => self.latency.t_draft = parse_value(key, value, line)?,
            "t_lookup" => self.latency.t_lookup = parse_value(key, value, line)?,
            "t_sync" => self.latency.t_sync = parse_value(key, value, line)?,
            "gamma" => {
                self.gamma = if value == "auto" {
                    None
                } else {
                    Some(parse_value(key, value, line)?)
                }
            }
            "depth" => self.depth = parse_value(key, value, line)?,
            "ngram" => self.ngram = parse_value(key, value, line)?,
            "prior_k" => self.prior_k = parse_value(key, value, line)?,
            "rejected_cache" => self.rejected_cache = parse_bool(key, value, line)?,
            "temperature" => self.temperature = parse_value(key, value, line)?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "method" => self.method = value.parse()?,
            "engine" => {
                self.engine = match value {
                    "serial" => Engine::Serial,
                    "concurrent" => Engine::Concurrent,
                    _ => return Err(SpecparError::parse(line, format!("unknown engine {value:?}"))),
                }
            }
            "max_new_tokens" => self.max_new_tokens = parse_value(key, value, line)?,
            "prompt_len" => self.prompt_len = parse_value(key, value, line)?,
            _ => return Err(SpecparError::parse(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Replaces the seed with `SPECPAR_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| SpecparError::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let engine = match self.engine {
            Engine::Serial => "serial",
            Engine::Concurrent => "concurrent",
        };
        let gamma = self.gamma.map_or("auto".to_string(), |g| g.to_string());
        let pairs: [(&str, String); 24] = [
            ("vocab", self.vocab.to_string()),
            ("rho", self.rho.to_string()),
            ("corpus_len", self.corpus_len.to_string()),
            ("docs", self.docs.to_string()),
            ("span", self.span.to_string()),
            ("draft_order", self.draft_order.to_string()),
            ("target_order", self.target_order.to_string()),
            ("draft_fraction", self.draft_fraction.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("t_target", self.latency.t_target.to_string()),
            ("t_draft", self.latency.t_draft.to_string()),
            ("t_lookup", self.latency.t_lookup.to_string()),
            ("t_sync", self.latency.t_sync.to_string()),
            ("gamma", gamma),
            ("depth", self.depth.to_string()),
            ("ngram", self.ngram.to_string()),
            ("prior_k", self.prior_k.to_string()),
            ("rejected_cache", self.rejected_cache.to_string()),
            ("temperature", self.temperature.to_string()),
            ("seed", self.seed.to_string()),
            ("method", self.method.to_string()),
            ("engine", engine.to_string()),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("prompt_len", self.prompt_len.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpecparError::InvalidConfig(m));
        if self.vocab < 3 {
            return bad("vocab must be at least 3".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.docs < 2 {
            return bad("need at least 2 documents (one is held out for the prompt)".into());
        }
        if self.prior_k >= self.docs {
            return bad("prior_k must be smaller than docs".into());
        }
        if !(self.draft_fraction > 0.0 && self.draft_fraction <= 1.0) {
            return bad("draft_fraction must lie in (0, 1]".into());
        }
        if self.draft_order == 0 || self.target_order == 0 || self.ngram == 0 {
            return bad("orders must be at least 1".into());
        }
        if self.prompt_len == 0 || self.prompt_len >= self.corpus_len / self.docs {
            return bad("prompt_len must be positive and shorter than a document".into());
        }
        self.latency.validate()?;
        self.pipeline_config(self.method).validate()
    }

    /// `gamma`, defaulting to `ceil(C)`.
    pub fn effective_gamma(&self) -> usize {
        self.gamma
            .unwrap_or_else(|| self.latency.speed_ratio().ceil().max(1.0) as usize)
    }

    pub fn pipeline_config(&self, method: Method) -> PipelineConfig {
        let (draft, schedule, target_retrieval) = method.shape();
        PipelineConfig {
            gamma: self.effective_gamma(),
            depth: self.depth,
            draft,
            target_retrieval,
            schedule,
            rejected_cache: self.rejected_cache,
            engine: self.engine,
            sampler: SamplerConfig {
                temperature: self.temperature,
                rng_seed: self.seed,
            },
            max_new_tokens: self.max_new_tokens,
        }
    }
}

/// Corpus, models, prior and prompt built from a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub corpus: Vec<Vec<TokenId>>,
    pub draft: TableModel,
    pub target: TableModel,
    pub prior: NGramIndex,
    pub prompt: Vec<TokenId>,
}

impl Experiment {
    /// Documents `0..docs-1` train the models; the last document is held out
    /// and its head is the prompt.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = gen_corpus(
            config.vocab,
            config.rho,
            config.corpus_len,
            config.docs,
            config.span,
            config.seed,
        )?;
        let train = &corpus[..corpus.len() - 1];
        let draft_docs = ((train.len() as f64 * config.draft_fraction).ceil() as usize).clamp(1, train.len());
        let lat = &config.latency;
        let target = build_model_from_corpus(train, config.vocab, config.target_order, config.smoothing)?
            .with_forward_cost(lat.t_target);
        let draft = build_model_from_corpus(&train[..draft_docs], config.vocab, config.draft_order, config.smoothing)?
            .with_forward_cost(lat.t_draft);
        let prior = build_prior(train, config.ngram, config.prior_k);
        let prompt = corpus[corpus.len() - 1][..config.prompt_len].to_vec();
        Ok(Experiment {
            config: config.clone(),
            corpus,
            draft,
            target,
            prior,
            prompt,
        })
    }

    pub fn store(&self) -> HierarchicalDatastore {
        HierarchicalDatastore::new(self.prior.clone(), self.config.ngram, self.config.depth)
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            draft: &self.draft,
            target: &self.target,
        }
    }

    pub fn run_with(&self, pipeline: &PipelineConfig, store: &mut HierarchicalDatastore) -> Result<RunOutput> {
        run(&self.prompt, self.models(), store, pipeline, &self.config.latency)
    }

    pub fn run_method(&self, method: Method) -> Result<RunOutput> {
        self.run_with(&self.config.pipeline_config(method), &mut self.store())
    }
}

/// Speedup predicted by the retrieval-scaled model from measured run
/// statistics. `None` without a rejection-free segment structure to use.
pub fn predict_speedup(metrics: &RunMetrics, latency: &LatencyConfig) -> Option<f64> {
    if metrics.rounds == 0 || metrics.draft_forwards == 0.0 {
        return None;
    }
    let mut params = TheoryParams::new(0.0, 1, latency.speed_ratio());
    params.amt = metrics.amt;
    params.e_ld = metrics.e_ld;
    params.e_bonus = metrics.e_bonus;
    let gamma_tokens = metrics.draft_forwards * (1.0 + metrics.amt);
    Some(speedup_double(&params, metrics.rounds_per_segment, gamma_tokens))
}

/// One report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: Method,
    pub mean_accepted: f64,
    pub amt: f64,
    pub speedup: f64,
    pub predicted: Option<f64>,
    pub hit_rate: f64,
    pub tokens: usize,
    pub rounds: usize,
    pub clock: f64,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, method: Method, out: &RunOutput, latency: &LatencyConfig) -> Self {
        let m = &out.metrics;
        ReportRow {
            label: label.into(),
            method,
            mean_accepted: m.mean_accepted,
            amt: m.amt,
            speedup: m.speedup,
            predicted: match method {
                Method::Double => predict_speedup(m, latency),
                _ => None,
            },
            hit_rate: m.hit_rate,
            tokens: m.tokens,
            rounds: m.rounds,
            clock: m.clock,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    /// Generated tokens per row, in row order.
    pub outputs: Vec<Vec<TokenId>>,
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned plain-text table preceded by the config echo.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(s, "# speed_ratio = {}", self.config.latency.speed_ratio());
        s.push_str(&render_table(&self.rows));
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.3}"))
}

/// Aligned text table of report rows.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["label", "method", "M", "AMT", "speedup", "predicted", "hit_rate", "tokens", "rounds"];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.method.to_string(),
                format!("{:.3}", r.mean_accepted),
                format!("{:.3}", r.amt),
                format!("{:.3}", r.speedup),
                fmt_opt(r.predicted),
                format!("{:.3}", r.hit_rate),
                r.tokens.to_string(),
                r.rounds.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(s, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in &body {
        line(row.iter().map(String::as_str).collect());
    }
    s
}

/// Writes rows as CSV. An empty slice writes the header alone.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["label", "method", "mean_accepted", "amt", "speedup", "predicted", "hit_rate", "tokens", "rounds", "clock"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| SpecparError::io("<csv>", e))
}

pub fn read_report_csv<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(SpecparError::from))
        .collect()
}

/// Writes `<stem>.csv` and `<stem>.txt` next to each other.
pub fn emit_report(report: &Report, csv_path: &Path) -> Result<()> {
    let file = std::fs::File::create(csv_path).map_err(|e| SpecparError::io(csv_path, e))?;
    write_report_csv(&report.rows, file)?;
    let txt = csv_path.with_extension("txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| SpecparError::io(&txt, e))
}

fn assemble(config: &ExperimentConfig, cells: Vec<(ReportRow, Vec<TokenId>)>) -> Report {
    let (rows, outputs) = cells.into_iter().unzip();
    Report {
        config: config.clone(),
        rows,
        outputs,
    }
}

/// Runs every method in `methods` on the same experiment.
pub fn compare_methods(config: &ExperimentConfig, methods: &[Method]) -> Result<Report> {
    let exp = Experiment::build(config)?;
    let cells = methods
        .par_iter()
        .map(|&m| {
            let out = exp.run_method(m)?;
            Ok((ReportRow::new(m.name(), m, &out, &config.latency), out.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(config, cells))
}

/// Runs the configured method.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Report, RunOutput)> {
    let exp = Experiment::build(config)?;
    let out = exp.run_method(config.method)?;
    let row = ReportRow::new(config.method.name(), config.method, &out, &config.latency);
    Ok((assemble(config, vec![(row, out.tokens.clone())]), out))
}

/// Components of the full method that an ablation can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub draft_retrieval: bool,
    pub target_retrieval: bool,
    pub rejected_cache: bool,
    /// Overrides the number of prior documents.
    pub prior_k: Option<usize>,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        draft_retrieval: true,
        target_retrieval: true,
        rejected_cache: true,
        prior_k: None,
    };
}

/// The standard ablation set.
pub fn default_ablations() -> Vec<(String, Toggles)> {
    let full = Toggles::FULL;
    vec![
        ("full".into(), full),
        ("no_draft_retrieval".into(), Toggles { draft_retrieval: false, ..full }),
        ("no_target_retrieval".into(), Toggles { target_retrieval: false, ..full }),
        ("no_rejected_cache".into(), Toggles { rejected_cache: false, ..full }),
        ("prior_k0".into(), Toggles { prior_k: Some(0), ..full }),
    ]
}

/// Runs the full pipelined method with components removed.
pub fn ablate(config: &ExperimentConfig, variants: &[(String, Toggles)]) -> Result<Report> {
    let exp = Experiment::build(config)?;
    let cells = variants
        .par_iter()
        .map(|(label, t)| {
            let mut pc = config.pipeline_config(Method::Double);
            if !t.draft_retrieval {
                pc.draft = DraftStrategy::Autoregressive;
            }
            pc.target_retrieval = t.target_retrieval;
            pc.rejected_cache = t.rejected_cache;
            let prior = match t.prior_k {
                Some(k) => build_prior(&exp.corpus[..exp.corpus.len() - 1], config.ngram, k),
                None => exp.prior.clone(),
            };
            let mut store = HierarchicalDatastore::new(prior, config.ngram, config.depth);
            let out = exp.run_with(&pc, &mut store)?;
            Ok((ReportRow::new(label.clone(), Method::Double, &out, &config.latency), out.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(config, cells))
}

/// Runs the full pipelined method at each retrieval depth.
pub fn sweep_depth(config: &ExperimentConfig, depths: &[usize]) -> Result<Report> {
    let exp = Experiment::build(config)?;
    let cells = depths
        .par_iter()
        .map(|&d| {
            let mut pc = config.pipeline_config(Method::Double);
            pc.depth = d;
            let mut store = HierarchicalDatastore::new(exp.prior.clone(), config.ngram, d);
            let out = exp.run_with(&pc, &mut store)?;
            Ok((ReportRow::new(format!("d={d}"), Method::Double, &out, &config.latency), out.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(config, cells))
}

/// Fraction of positions `i >= n` whose preceding `n`-gram occurred earlier
/// in the same sequence.
pub fn self_match_rate(seq: &[TokenId], n: usize) -> f64 {
    let mut seen: BTreeMap<&[TokenId], ()> = BTreeMap::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in n..seq.len() {
        let g = &seq[i - n..i];
        total += 1;
        if seen.insert(g, ()).is_some() {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::eos;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            vocab: 32,
            rho: 0.9,
            corpus_len: 4000,
            docs: 6,
            prior_k: 3,
            max_new_tokens: 128,
            latency: LatencyConfig::new(1.6, 1.0),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn corpus_is_reproducible_and_in_range() {
        let a = gen_corpus(16, 0.5, 1000, 4, 8, 3).unwrap();
        let b = gen_corpus(16, 0.5, 1000, 4, 8, 3).unwrap();
        assert_eq!(corpus_to_text(&a), corpus_to_text(&b));
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 1000);
        let stop = eos(16);
        assert!(a.iter().flatten().all(|&t| t != TokenId(0) && t != stop));
        assert_eq!(corpus_from_text(&corpus_to_text(&a)).unwrap(), a);
    }

    #[test]
    fn rho_one_is_a_single_motif() {
        let c = gen_corpus(64, 1.0, 800, 2, 8, 1).unwrap();
        let flat: Vec<TokenId> = c.concat();
        for i in 8..flat.len() {
            assert_eq!(flat[i], flat[i % 8]);
        }
    }

    #[test]
    fn rho_raises_self_matching() {
        let rate = |rho| {
            let c = gen_corpus(64, rho, 4000, 1, 8, 7).unwrap();
            self_match_rate(&c[0], 3)
        };
        let (r0, r5, r9) = (rate(0.0), rate(0.5), rate(0.9));
        // With 62 symbols a fresh trigram repeats with probability ~1/62^3.
        assert!(r0 < 0.02, "{r0}");
        assert!(r0 < r5 && r5 < r9);
    }

    #[test]
    fn config_parse_and_echo() {
        let text = "# demo\nvocab = 16\nrho = 0.25\nmethod = psd\nt_target = 2.8  # ratio\ngamma = 3\nrejected_cache = off\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.vocab, 16);
        assert_eq!(cfg.method, Method::PSD);
        assert_eq!(cfg.effective_gamma(), 3);
        assert!(!cfg.rejected_cache);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(ExperimentConfig::parse("nope = 1").is_err());
        assert!(ExperimentConfig::parse("vocab").is_err());
        assert!(ExperimentConfig::parse("rho = 2").is_err());
    }

    #[test]
    fn gamma_defaults_to_ceil_ratio() {
        let mut cfg = ExperimentConfig::default();
        cfg.latency = LatencyConfig::new(1.6, 1.0);
        assert_eq!(cfg.effective_gamma(), 2);
        cfg.latency = LatencyConfig::new(5.0, 1.0);
        assert_eq!(cfg.effective_gamma(), 5);
    }

    #[test]
    fn all_methods_agree_under_greedy() {
        let report = compare_methods(&small(), &Method::ALL).unwrap();
        for out in &report.outputs[1..] {
            assert_eq!(out, &report.outputs[0]);
        }
        assert_eq!(report.row("vanilla_ar").unwrap().speedup, 1.0);
        let c = small().latency.speed_ratio();
        assert!(report.row("psd").unwrap().speedup <= c);
        assert!(report.row("double").unwrap().speedup > report.row("psd").unwrap().speedup);
    }

    #[test]
    fn reports_round_trip_through_csv() {
        let report = compare_methods(&small(), &[Method::VanillaAR, Method::Double]).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&report.rows, &mut buf).unwrap();
        assert_eq!(read_report_csv(&buf[..]).unwrap(), report.rows);
        let mut again = Vec::new();
        write_report_csv(&report.rows, &mut again).unwrap();
        assert_eq!(buf, again);

        let mut empty = Vec::new();
        write_report_csv(&[], &mut empty).unwrap();
        let text = String::from_utf8(empty).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("label,method,"));
        assert!(read_report_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn text_table_is_aligned() {
        let report = compare_methods(&small(), &[Method::VanillaAR, Method::PSD]).unwrap();
        let table = render_table(&report.rows);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert_eq!(widths.len(), 3);
        assert!(report.to_text().contains("# seed = 0"));
    }

    #[test]
    fn report_is_pure_function_of_config() {
        let a = ablate(&small(), &default_ablations()).unwrap();
        let b = ablate(&small(), &default_ablations()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = ExperimentConfig::default();
        std::env::set_var(SEED_ENV, "42");
        cfg.apply_env_seed().unwrap();
        std::env::remove_var(SEED_ENV);
        assert_eq!(cfg.seed, 42);
    }
}
