//! Command-line driver: scenario runs, coverage studies, beta sweeps,
//! offline artifact builds, and the oracle self test.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 runtime invariant
//! violation or failed check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specvoc::config::ResolvedConfig;
use specvoc::harness::{self, ScenarioScript, Variant};
use specvoc::models::load_embeddings;
use specvoc::retrieval::{build_graph, RetrievalArm};
use specvoc::selfcheck::{run_selftest, Fault};
use specvoc::vocab::{build_static, read_corpus, CorpusFormat};
use specvoc::Error;

#[derive(Parser)]
#[command(name = "specvoc", about = "Speculative decoding with an evolving draft vocabulary")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file; flags and overrides take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Convenience override for the config's seed key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (falls back to $SPECVOC_OUT, then ".").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Additional key=value config overrides.
    #[arg(value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script and write metrics.jsonl + summary.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Scenario script file (key-value format).
        #[arg(long)]
        scenario: PathBuf,
        /// Ablation arm: static_only | +hnsw | +graph | no_alignment | full.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Teacher-forced coverage study over the shifted-domain fixture.
    Coverage {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arms (default: all four).
        #[arg(long, default_value = "static,static+hnsw,static+hnsw+graph,full")]
        arms: String,
        /// Stream length per seed.
        #[arg(long, default_value_t = 2000)]
        stream_len: usize,
        /// Comma-separated seeds to average over.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
    /// Curriculum sensitivity sweep on the high-noise synthetic stream.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0.0,0.1,0.3,0.5,0.7")]
        betas: String,
        /// Replay entries fed per arm.
        #[arg(long, default_value_t = 2048)]
        entries: usize,
    },
    /// Build a static vocabulary file from a corpus.
    BuildStatic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus encoding: text | binary.
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a pruned co-occurrence graph CSV from a corpus.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        output: PathBuf,
        /// Optional embedding file whose row count pins the vocabulary size.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Run the oracle checks; exit 0 iff all pass.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Deliberately corrupt an internal path to prove detection works.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn parse_overrides(common: &Common) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".to_string(), seed.to_string()));
    }
    Ok(out)
}

fn resolve(common: &Common) -> Result<ResolvedConfig, Error> {
    let file_text = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?),
        None => None,
    };
    let overrides = parse_overrides(common)?;
    let resolved = ResolvedConfig::resolve(file_text.as_deref(), &overrides)?;
    print!("{}", resolved.render());
    Ok(resolved)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("SPECVOC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn corpus_format(s: &str) -> Result<CorpusFormat, Error> {
    match s {
        "text" => Ok(CorpusFormat::Text),
        "binary" => Ok(CorpusFormat::Binary),
        other => Err(Error::Config(format!("corpus format must be text|binary, got {other:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| Error::Config(format!("bad {what} entry {p:?}"))))
        .collect()
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common, scenario, variant } => {
            let resolved = resolve(&common)?;
            let variant = Variant::parse(&variant)?;
            let text = std::fs::read_to_string(&scenario).map_err(|e| {
                Error::Config(format!("cannot read scenario {}: {e}", scenario.display()))
            })?;
            let script = ScenarioScript::from_key_values(&text)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let metrics = harness::run_scenario(&script, &resolved.config, variant)?;
            let runs = vec![metrics];
            harness::write_metrics_jsonl(dir.join("metrics.jsonl"), &resolved.hash, &runs)?;
            harness::write_summary_csv(dir.join("summary.csv"), &resolved.hash, &runs)?;
            println!(
                "variant {} ({} requests): MAL {:.4}, throughput {:.4} tok/ms, oov {}, updates {}",
                runs[0].variant,
                runs[0].per_request.len(),
                runs[0].overall_mal,
                runs[0].throughput,
                runs[0].oov_events,
                runs[0].updates,
            );
            println!("wrote {}", dir.join("metrics.jsonl").display());
            println!("wrote {}", dir.join("summary.csv").display());
            Ok(())
        }
        Command::Coverage { common, arms, stream_len, seeds } => {
            let resolved = resolve(&common)?;
            let arm_list: Vec<RetrievalArm> = arms
                .split(',')
                .map(|a| match a.trim() {
                    "static" => Ok(RetrievalArm::Off),
                    "static+hnsw" => Ok(RetrievalArm::Semantic),
                    "static+hnsw+graph" => Ok(RetrievalArm::SemanticGraph),
                    "full" => Ok(RetrievalArm::Full),
                    other => Err(Error::Config(format!("unknown coverage arm {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            let seed_list: Vec<u64> = parse_list(&seeds, "seed")?;
            if seed_list.is_empty() {
                return Err(Error::Config("need at least one seed".into()));
            }
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let ks = [10usize, 50, 256];
            let rows =
                harness::coverage_study(&resolved.config, &harness::standard_domains(), 1, &arm_list, &seed_list, stream_len, &ks)?;
            for r in &rows {
                println!("{:<20} mass {:.4}  oov {}", r.arm, r.covered_mass, r.oov_events);
            }
            harness::write_coverage_csv(dir.join("coverage.csv"), &resolved.hash, &rows)?;
            println!("wrote {}", dir.join("coverage.csv").display());
            Ok(())
        }
        Command::SweepBeta { common, betas, entries } => {
            let resolved = resolve(&common)?;
            let beta_list: Vec<f64> = parse_list(&betas, "beta")?;
            if beta_list.is_empty() {
                return Err(Error::Config("need at least one beta".into()));
            }
            let params = harness::SweepParams {
                entries,
                seed: resolved.config.seed,
                ..Default::default()
            };
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let runs = harness::beta_sweep(&resolved.config, &harness::standard_domains(), &beta_list, &params)?;
            for r in &runs {
                println!(
                    "beta {:<4} updates {:<4} final smoothed loss {:.6}",
                    r.beta,
                    r.updates.len(),
                    r.final_smoothed
                );
            }
            harness::write_beta_sweep_csv(dir.join("beta_sweep.csv"), &resolved.hash, &runs)?;
            println!("wrote {}", dir.join("beta_sweep.csv").display());
            Ok(())
        }
        Command::BuildStatic { common, corpus, format, output } => {
            let resolved = resolve(&common)?;
            let fmt = corpus_format(&format)?;
            let tokens = read_corpus(&corpus, fmt)?;
            let vocab = build_static(&tokens, resolved.config.static_size, resolved.config.vocab_size)
                .map_err(|e| Error::Config(e.to_string()))?;
            vocab.save(&output)?;
            println!("wrote {} ({} members)", output.display(), vocab.len());
            Ok(())
        }
        Command::BuildGraph { common, corpus, format, output, embeddings } => {
            let resolved = resolve(&common)?;
            let fmt = corpus_format(&format)?;
            let tokens = read_corpus(&corpus, fmt)?;
            let vocab_size = match embeddings {
                Some(path) => load_embeddings(path)?.rows() as u32,
                None => resolved.config.vocab_size,
            };
            let graph = build_graph(&tokens, resolved.config.graph_thresholds(), vocab_size)
                .map_err(|e| Error::Config(e.to_string()))?;
            graph.save_csv(&output)?;
            println!("wrote {} ({} edges)", output.display(), graph.edge_count());
            Ok(())
        }
        Command::Selftest { common: _, inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some("q-support") => Some(Fault::QSupportViolation),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown fault {other:?} (expected q-support)"
                    )))
                }
            };
            let results = run_selftest(fault);
            let mut all_passed = true;
            for r in &results {
                println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_passed &= r.passed;
            }
            if all_passed {
                Ok(())
            } else {
                Err(Error::Invariant("self test failed".into()))
            }
        }
    }
}
