//! Command-line interface of the spectral Navier-Stokes toolkit.
//!
//! Exit codes: 0 success, 2 config/input error, 3 data-integrity error,
//! 4 numerical failure (blow-up or training divergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use specns_cli::commands;
use specns_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "specns",
    about = "Spectral Galerkin Navier-Stokes solver, data-free operator-network training, and ensemble statistics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Problem preset (2d-forcing, 2d-initial, 2d-initial-desk, 2d-boundary,
    /// 3d-beltrami, 3d-forcing).
    #[arg(long, global = true, default_value = "2d-initial-desk")]
    preset: String,

    /// Flat key=value configuration file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// PRNG seed for input generation and parameter initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (1 gives bit-reproducible timing-free outputs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the classical solver on generated inputs.
    Solve,
    /// Train the operator networks data-free on generated inputs.
    Train,
    /// Predict trajectories from a trained checkpoint.
    Infer,
    /// Ensemble statistics and timing over many inputs.
    Ensemble,
    /// Temporal-order and spectral-decay sweeps.
    Convergence,
}

fn build_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {path:?}: {e}"))?;
        cfg.apply_file(&text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(2);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("config error: cannot build worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Solve => commands::cmd_solve(&cfg, &pool),
        Command::Train => commands::cmd_train(&cfg, &pool),
        Command::Infer => commands::cmd_infer(&cfg, &pool),
        Command::Ensemble => commands::cmd_ensemble(&cfg, &pool),
        Command::Convergence => commands::cmd_convergence(&cfg, &pool),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
