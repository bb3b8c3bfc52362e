//! Experiment driver. Four subcommands cover the pipeline end to end:
//! `generate` simulates datasets, `train` fits the priors, `evaluate` runs
//! the reconstruction grid, `report` emits plot-ready tables.
//!
//! Exit codes: 0 full success, 1 configuration or pipeline error, 2 when the
//! evaluation grid finished with failed cells.

use clap::{Parser, Subcommand};
use crowdfill::config::ExperimentConfig;
use crowdfill::energy::PriorKind;
use crowdfill::harness;
use crowdfill::opt::alternate::OptimizerKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

fn parse_prior(text: &str) -> Result<PriorKind, String> {
    PriorKind::parse(text).map_err(|e| e.to_string())
}

fn parse_optimizer(text: &str) -> Result<OptimizerKind, String> {
    OptimizerKind::parse(text).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(name = "crowdfill", version, about = "Crowd-trajectory reconstruction experiments")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Keep only config scenarios whose file stem matches (repeatable).
    #[arg(long = "scenario", global = true, value_name = "NAME")]
    scenarios: Vec<String>,
    /// Replace the config's prior list (repeatable).
    #[arg(long = "prior", global = true, value_parser = parse_prior)]
    priors: Vec<PriorKind>,
    /// Replace the config's optimizer list (repeatable).
    #[arg(long = "optimizer", global = true, value_parser = parse_optimizer)]
    optimizers: Vec<OptimizerKind>,
    /// Fraction of frames hidden per agent, strictly inside (0, 1).
    #[arg(long, global = true, value_name = "F")]
    mask_fraction: Option<f64>,
    /// Outer alternation rounds per reconstruction.
    #[arg(long, global = true, value_name = "N")]
    outer_iters: Option<usize>,
    /// Replace the density sweep (repeatable).
    #[arg(long = "density", global = true, value_name = "N")]
    densities: Vec<usize>,
    /// Replace the seed list (repeatable).
    #[arg(long = "seed", global = true, value_name = "N")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long = "out", global = true, value_name = "DIR")]
    out: Option<String>,
    /// Worker threads for the evaluation grid; defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every (scenario, density, seed) run into dataset files.
    Generate,
    /// Fit the per-scenario GP flow fields and the pooled NN regressors.
    Train,
    /// Reconstruct masked runs over the full grid and write result tables.
    Evaluate,
    /// Emit per-figure CSV tables from the evaluation aggregate.
    Report,
}

fn apply_overrides(cli: &Cli, config: &mut ExperimentConfig) -> Result<(), String> {
    if !cli.scenarios.is_empty() {
        let mut keep = Vec::new();
        for name in &cli.scenarios {
            let matched: Vec<String> = config
                .scenarios
                .iter()
                .filter(|path| {
                    Path::new(path)
                        .file_stem()
                        .is_some_and(|stem| stem.to_string_lossy() == name.as_str())
                })
                .cloned()
                .collect();
            if matched.is_empty() {
                return Err(format!("--scenario {name}: no configured scenario file has that stem"));
            }
            for path in matched {
                if !keep.contains(&path) {
                    keep.push(path);
                }
            }
        }
        config.scenarios = keep;
    }
    if !cli.priors.is_empty() {
        config.priors = cli.priors.clone();
    }
    if !cli.optimizers.is_empty() {
        config.optimizers = cli.optimizers.clone();
    }
    if let Some(f) = cli.mask_fraction {
        config.mask_fraction = f;
    }
    if let Some(n) = cli.outer_iters {
        config.outer_iters = n;
    }
    if !cli.densities.is_empty() {
        config.densities = cli.densities.clone();
    }
    if !cli.seeds.is_empty() {
        config.seeds = cli.seeds.clone();
    }
    if let Some(dir) = &cli.out {
        config.out_dir = dir.clone();
    }
    config.validate().map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    let config_path = cli.config.as_deref().ok_or("missing --config PATH")?;
    let mut config = ExperimentConfig::load(config_path).map_err(|e| e.to_string())?;
    apply_overrides(cli, &mut config)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err("--jobs must be at least 1".to_string());
        }
        // A failure here means a pool already exists; the run stays correct.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Generate => {
            let summary = harness::cmd_generate(&config).map_err(|e| e.to_string())?;
            println!("generated {} dataset files under {}", summary.files.len(), config.out_dir);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let summary = harness::cmd_train(&config).map_err(|e| e.to_string())?;
            println!("fitted {} GP flow models", summary.gp_files.len());
            for nn in &summary.nn {
                println!(
                    "trained {} sigma_nn {:.4} val_mse {:.6} epochs {}",
                    nn.path.display(),
                    nn.sigma_nn,
                    nn.val_mse,
                    nn.epochs_run
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate => {
            let summary = harness::cmd_evaluate(&config).map_err(|e| e.to_string())?;
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
            println!("{} cells evaluated, {} failed", summary.cells, summary.failures);
            if summary.failures > 0 {
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Report => {
            let summary = harness::cmd_report(&config).map_err(|e| e.to_string())?;
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
