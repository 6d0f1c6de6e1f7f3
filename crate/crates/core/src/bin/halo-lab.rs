use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use halo_core::experiments::{
    run_boundary_maps, run_evaluate, run_sweep, run_toy_figure, run_train, toy_checks, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "halo-lab", version, about = "Adversarially robust OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override as `path=value`, e.g. `objective.beta1=2`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and evaluate it.
    Train(Common),
    /// Evaluate a checkpoint on all four attack settings.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Entropy, class and detection maps of a 2-D checkpoint.
    BoundaryMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate over the config's parameter grid.
    Sweep(Common),
    /// Train all four toy regimes, write summaries and maps.
    ToyFigure {
        #[command(flatten)]
        common: Common,
        /// Exit nonzero if any qualitative check fails.
        #[arg(long)]
        check: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    for o in &common.overrides {
        cfg = cfg.with_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let (_, results) = run_train(&cfg, &c.out_dir)?;
            for r in results {
                println!(
                    "seed {}: clean acc {:.4}, robust acc {:.4}",
                    r.seed, r.report.clean_accuracy, r.report.robust_accuracy
                );
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let (_, report) = run_evaluate(&cfg, &checkpoint, &common.out_dir)?;
            print!("{}", report.to_csv());
        }
        Command::BoundaryMaps { common, checkpoint } => {
            let cfg = load(&common)?;
            let (m, _) = run_boundary_maps(&cfg, &checkpoint, &common.out_dir)?;
            println!("wrote {} maps to {}", m.files.len(), common.out_dir.display());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let res = run_sweep(&cfg, &c.out_dir)?;
            for f in &res.manifest.failures {
                eprintln!("failed: {}: {}", f.context, f.error);
            }
            println!("{} grid points, {} failures", res.points.len(), res.manifest.failures.len());
        }
        Command::ToyFigure { common, check } => {
            let cfg = load(&common)?;
            let res = run_toy_figure(&cfg, &common.out_dir)?;
            let outcomes = toy_checks(&res, &common.out_dir);
            let mut ok = true;
            for o in &outcomes {
                println!("[{}] {}: {}", if o.passed { "pass" } else { "FAIL" }, o.name, o.detail);
                ok &= o.passed;
            }
            return Ok(ok || !check);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
