use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use fedgate::config::{self, FileConfig};
use fedgate::output;
use fedgate::runner;

/// Desk-scale simulator for prompt-gated open-set federated active learning.
#[derive(Parser)]
#[command(name = "fedgate", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config's matrix and write CSV reports.
    Run {
        /// TOML experiment config.
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Worker threads; 1 means fully sequential execution.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Output directory for per-run reports and summary.csv.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Parse a config, expand its matrix, and report what would run.
    Validate {
        /// TOML experiment config.
        config: PathBuf,
    },
    /// Rebuild summary.csv from the rounds.csv files under a results dir.
    Summarize {
        /// Directory previously produced by `fedgate run`.
        results: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed_override, parallel, out } => {
            if parallel == 0 {
                bail!("--parallel must be at least 1");
            }
            let file = config::load(&config)?;
            let runs = file.expand(seed_override)?;
            let done = runner::execute_matrix(&file, &runs, parallel, &out)?;
            for run in &done {
                let f = output::run_final(&run.spec, &run.result);
                let pct = |v: Option<f64>| match v {
                    Some(v) => format!("{:.1}", 100.0 * v),
                    None => "-".to_string(),
                };
                println!(
                    "{}: purity {} bma {} ({:.1}s)",
                    run.spec.name,
                    pct(f.purity),
                    pct(f.bma),
                    run.seconds
                );
            }
            println!("wrote {} runs to {}", done.len(), out.display());
            print!("{}", std::fs::read_to_string(out.join("summary.csv"))?);
            Ok(())
        }
        Command::Validate { config } => {
            let file = config::load(&config)?;
            let runs = file.expand(None)?;
            describe_dataset(&file)?;
            println!("matrix expands to {} experiment(s):", runs.len());
            for run in &runs {
                println!("  {}", run.name);
            }
            Ok(())
        }
        Command::Summarize { results } => {
            let mut finals = Vec::new();
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&results)
                .with_context(|| format!("reading {}", results.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("rounds.csv").is_file())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                bail!("no run directories with rounds.csv under {}", results.display());
            }
            for dir in dirs {
                let text = std::fs::read_to_string(dir.join("rounds.csv"))
                    .with_context(|| format!("reading {}/rounds.csv", dir.display()))?;
                finals.push(
                    output::final_from_rounds_csv(&text)
                        .with_context(|| format!("in {}/rounds.csv", dir.display()))?,
                );
            }
            let summary = output::summary_csv(&finals);
            std::fs::write(results.join("summary.csv"), &summary)
                .with_context(|| format!("writing {}/summary.csv", results.display()))?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn describe_dataset(file: &FileConfig) -> Result<()> {
    match &file.dataset.import {
        Some(path) => {
            let ds = fedgate::import::load_dataset(path)?;
            println!(
                "dataset: imported from {} ({} clients, {} classes, {} OOD modes, dim {})",
                path.display(),
                ds.clients.len(),
                ds.num_classes,
                ds.num_ood_modes,
                ds.dim
            );
        }
        None => {
            let spec = file.dataset.to_spec()?;
            spec.validate().map_err(|e| anyhow!("invalid dataset section: {e}"))?;
            println!(
                "dataset: synthetic ({} clients, {} classes, {} OOD modes, dim {})",
                spec.num_clients, spec.num_classes, spec.num_ood_modes, spec.dim
            );
        }
    }
    Ok(())
}
