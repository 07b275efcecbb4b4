use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use specpar_core::analytics::{
    expected_multi_round, expected_rounds, expected_single_round, psd_bound, speedup_double,
    speedup_psd, speedup_sd, theory_surface, TheoryParams,
};
use specpar_core::datastore::build_prior;
use specpar_core::harness::{
    ablate, compare_methods, default_ablations, emit_report, gen_corpus, read_corpus,
    run_experiment, sweep_depth, write_corpus, ExperimentConfig, Method, Report, SEED_ENV,
};
use specpar_core::pipeline::write_trace_jsonl;
use specpar_core::SpecparError;

#[derive(Parser)]
#[command(name = "specpar", version, about = "Parallel speculative decoding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, one document per line.
    GenCorpus {
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 8000)]
        length: usize,
        #[arg(long, default_value_t = 8)]
        docs: usize,
        #[arg(long, default_value_t = 8)]
        span: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a prior n-gram index from the first K documents of a corpus.
    BuildPrior {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        ngram: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Compare every method instead of the configured one.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full method with components disabled.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep retrieval depth, or emit the closed-form speedup surface.
    Sweep {
        #[arg(long, required_unless_present = "theory")]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10,15,20")]
        depths: Vec<usize>,
        /// Emit the theory surface instead of running experiments.
        #[arg(long)]
        theory: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the closed-form quantities for one parameter point.
    Analyze {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        gamma: usize,
        #[arg(long)]
        c: f64,
        #[arg(long, default_value_t = 0.0)]
        amt: f64,
        #[arg(long)]
        eld: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        ebonus: f64,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn finish(report: &Report, csv: Option<&PathBuf>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = csv {
        emit_report(report, path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn real() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus { vocab, rho, length, docs, span, seed, out } => {
            let seed = match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?}"))?,
                Err(_) => seed,
            };
            let corpus = gen_corpus(vocab, rho, length, docs, span, seed)?;
            write_corpus(&out, &corpus)?;
            eprintln!("wrote {} documents to {}", corpus.len(), out.display());
        }
        Command::BuildPrior { corpus, rounds, ngram, out } => {
            let docs = read_corpus(&corpus)?;
            let prior = build_prior(&docs, ngram, rounds);
            prior.save(&out)?;
            eprintln!("indexed {} sequences ({} entries) into {}", prior.sequences().len(), prior.entry_count(), out.display());
        }
        Command::Run { config, all, trace, csv } => {
            let cfg = load_config(&config)?;
            if all {
                finish(&compare_methods(&cfg, &Method::ALL)?, csv.as_ref())?;
            } else {
                let (report, out) = run_experiment(&cfg)?;
                if let Some(path) = &trace {
                    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    write_trace_jsonl(&out.traces, BufWriter::new(f))?;
                    eprintln!("wrote {} rounds to {}", out.traces.len(), path.display());
                }
                finish(&report, csv.as_ref())?;
            }
        }
        Command::Ablate { config, csv } => {
            let cfg = load_config(&config)?;
            finish(&ablate(&cfg, &default_ablations())?, csv.as_ref())?;
        }
        Command::Sweep { config, depths, theory, csv } => {
            if theory {
                let alphas: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
                let rows = theory_surface(&alphas, &[1, 2, 3, 4, 6, 8], &[1.6, 2.8, 4.0, 5.0]);
                let mut w = csv::Writer::from_writer(match &csv {
                    Some(p) => Box::new(File::create(p)?) as Box<dyn std::io::Write>,
                    None => Box::new(std::io::stdout()),
                });
                for r in rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            } else {
                let path = config.context("--config is required")?;
                let cfg = load_config(&path)?;
                finish(&sweep_depth(&cfg, &depths)?, csv.as_ref())?;
            }
        }
        Command::Analyze { alpha, gamma, c, amt, eld, ebonus } => {
            let mut p = TheoryParams::new(alpha, gamma, c);
            p.amt = amt;
            p.e_bonus = ebonus;
            p.validate()?;
            let e_ls = expected_single_round(alpha, gamma);
            let show = |v: std::result::Result<f64, SpecparError>| v.map_or_else(|e| e.to_string(), |x| format!("{x:.6}"));
            println!("{:<10} {e_ls:.6}", "E[L_s]");
            println!("{:<10} {}", "k", show(expected_rounds(alpha, gamma)));
            println!("{:<10} {}", "E[L_k]", show(expected_multi_round(alpha, gamma)));
            println!("{:<10} {}", "S_SD", show(speedup_sd(alpha, gamma, c)));
            println!("{:<10} {}", "S_PSD", show(speedup_psd(alpha, gamma, c)));
            println!("{:<10} {}", "bound", show(psd_bound(alpha, gamma, c)));
            if let Ok(k) = expected_rounds(alpha, gamma) {
                p.e_ld = eld.unwrap_or(expected_multi_round(alpha, gamma)? - k + 1.0);
                let g = gamma as f64 * (1.0 + amt);
                println!("{:<10} {:.6}", "S_DOUBLE", speedup_double(&p, k, g));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
