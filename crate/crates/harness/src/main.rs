use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use osdg_core::pipeline::Variant;
use osdg_harness::commands::{cmd_compare, cmd_run, cmd_stage, Stage};
use osdg_harness::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "osdg",
    version,
    about = "Open-set domain generalization under noisy labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage for every (split, seed) cell and write metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the seed list (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        /// Replace the variant list (repeatable).
        #[arg(long)]
        variant: Vec<String>,
    },
    /// Run one stage of one cell from stored artifacts.
    Stage {
        /// generate, stage1, cluster, flow, meta or evaluate.
        name: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        split: usize,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired per-(split, seed) deltas of candidate minus baseline.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        baseline_variant: Option<String>,
        #[arg(long)]
        candidate_variant: Option<String>,
        /// Write the delta table as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn variant(name: Option<String>) -> Result<Option<Variant>> {
    name.map(|n| n.parse::<Variant>())
        .transpose()
        .map_err(Into::into)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            variant,
        } => {
            let mut cfg = load(&config, out)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if !variant.is_empty() {
                cfg.variants = variant
                    .iter()
                    .map(|v| v.parse())
                    .collect::<Result<_, _>>()?;
            }
            let outcome = cmd_run(&cfg)?;
            println!("{}", outcome.metrics_path.display());
        }
        Command::Stage {
            name,
            config,
            seed,
            split,
            variant: v,
            out,
        } => {
            let cfg = load(&config, out)?;
            let stage: Stage = name.parse()?;
            for p in cmd_stage(stage, &cfg, split, seed, variant(v)?)? {
                println!("{}", p.display());
            }
        }
        Command::Compare {
            baseline,
            candidate,
            baseline_variant,
            candidate_variant,
            out,
        } => {
            let b = load(&baseline, None)?;
            let c = load(&candidate, None)?;
            let report = cmd_compare(
                &b,
                &c,
                variant(baseline_variant)?,
                variant(candidate_variant)?,
            )?;
            match out {
                Some(path) => {
                    std::fs::write(&path, report.to_csv())
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!("{report}");
                }
                None => print!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}
