use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use mfcontrol_cli::{parse_config, run, Outcome, Profile};

/// Train and evaluate entropy-regularised mean-field controls.
#[derive(Debug, Parser)]
#[command(name = "mfcontrol", version)]
struct Args {
    /// TOML config; presets alone are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Preset for keys the config leaves out.
    #[arg(long, default_value = "full", value_parser = ["full", "desk"])]
    profile: String,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    match try_main() {
        Ok(outcome) => {
            println!("{}", outcome.summary());
            if let Outcome::Aborted { diagnostic, .. } = &outcome {
                eprintln!("run aborted; see {}", diagnostic.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> Result<Outcome> {
    let args = Args::parse();
    let profile: Profile = args.profile.parse()?;
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut config = parse_config(&text, profile)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(jobs) = args.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    run(&config)
}
