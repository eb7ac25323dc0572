mod http;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chronolm::pipeline::{decode_prefixes, parse_stages, run, write_fixture, PipelineConfig, RunOptions, Stage};
use chronolm::synthetic::{generate, SyntheticConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chronolm", version, about = "Time-sliced language model laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or `all` of them in order.
    Run {
        stage: String,
        #[arg(long)]
        config: PathBuf,
        /// Limit per-slice stages to one slice label.
        #[arg(long)]
        slice: Option<String>,
        /// Re-run even if inputs are unchanged.
        #[arg(long)]
        force: bool,
    },
    /// Check a config and list every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Top-k single-word completions for each line of a prefix file.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prefix_file: PathBuf,
        #[arg(long)]
        slice: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write a synthetic corpus and a ready-to-run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        words_per_slice: Option<u64>,
    },
}

enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
}

fn load_valid(path: &Path) -> Result<PipelineConfig, Failure> {
    let cfg = PipelineConfig::load(path)
        .with_context(|| format!("cannot load {}", path.display()))
        .map_err(Failure::Validation)?;
    let diagnostics = cfg.diagnostics();
    if diagnostics.is_empty() {
        return Ok(cfg);
    }
    for d in &diagnostics {
        eprintln!("{}: {d}", path.display());
    }
    Err(Failure::Validation(anyhow::anyhow!(
        "{} problem(s) in {}",
        diagnostics.len(),
        path.display()
    )))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { config } => {
            load_valid(&config)?;
            println!("{}: ok", config.display());
        }
        Command::Run {
            stage,
            config,
            slice,
            force,
        } => {
            let stages = parse_stages(&stage).ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                Failure::Validation(anyhow::anyhow!(
                    "unknown stage {stage}; expected all or one of {}",
                    names.join(", ")
                ))
            })?;
            let cfg = load_valid(&config)?;
            let client = match &cfg.attribution {
                Some(a) if !a.endpoint.url.is_empty() && stages.contains(&Stage::Attribute) => {
                    Some(http::ChatClient::new(&a.endpoint).map_err(Failure::Validation)?)
                }
                _ => None,
            };
            let opts = RunOptions {
                slice,
                force,
                generator: client.as_ref().map(|c| c as _),
            };
            let reports = run(&cfg, &stages, &opts).map_err(|e| Failure::Stage(e.into()))?;
            for r in reports {
                let unit = match &r.slice {
                    Some(s) => format!("{} [{s}]", r.stage),
                    None => r.stage.to_string(),
                };
                println!("{unit}: {:?} ({:.1}s)", r.status, r.duration_secs);
            }
        }
        Command::Decode {
            config,
            prefix_file,
            slice,
            k,
        } => {
            let mut cfg = load_valid(&config)?;
            if let Some(k) = k {
                cfg.evaluation.k = k;
                cfg.evaluation.beam_width = cfg.evaluation.beam_width.max(4 * k);
            }
            let text = std::fs::read_to_string(&prefix_file)
                .with_context(|| format!("cannot read {}", prefix_file.display()))
                .map_err(Failure::Validation)?;
            let prefixes: Vec<String> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect();
            let rows = decode_prefixes(&cfg, &prefixes, slice.as_deref()).map_err(|e| Failure::Stage(e.into()))?;
            let mut out = std::io::stdout().lock();
            for row in rows {
                let line = serde_json::to_string(&row).expect("serializable row");
                writeln!(out, "{line}").map_err(|e| Failure::Stage(e.into()))?;
            }
        }
        Command::Synth {
            out,
            seed,
            words_per_slice,
        } => {
            let defaults = SyntheticConfig::default();
            let sc = SyntheticConfig {
                seed,
                words_per_slice: words_per_slice.unwrap_or(defaults.words_per_slice),
                ..defaults
            };
            let corpus = generate(&sc).map_err(|e| Failure::Validation(e.into()))?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("cannot create {}", out.display()))
                .map_err(Failure::Stage)?;
            write_fixture(&corpus, &out).map_err(|e| Failure::Stage(e.into()))?;
            println!("wrote {}", out.join("config.toml").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
