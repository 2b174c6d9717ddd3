mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{config_error, parse_cutoff, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "kerr-dpt", version, about = "Driven-dissipative Kerr cavity: spectra, sweeps and hysteresis geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV files and summary.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Fock cutoff d, or "auto"; overrides the config.
    #[arg(long, global = true)]
    cutoff: Option<String>,

    /// Seed for synthetic measurement noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Slowest rates γ_q and frequencies ω_q along the scan.
    Spectrum,
    /// Steady-state occupation along the scan.
    Steady,
    /// Semiclassical branches along the scan.
    Meanfield,
    /// Staircase or linear sweep with the configured engine.
    Sweep,
    /// Connection table over the critical region.
    Geometry,
    /// χ± and loop area for each configured velocity.
    Hysteresis,
    /// Connections recovered from branches at three velocities.
    Extract,
    /// Drive sweep compared with the detuning sweep.
    Fsweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Steady => "steady",
            Command::Meanfield => "meanfield",
            Command::Sweep => "sweep",
            Command::Geometry => "geometry",
            Command::Hysteresis => "hysteresis",
            Command::Extract => "extract",
            Command::Fsweep => "fsweep",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(c) = &cli.cutoff {
        parse_cutoff(c)?;
        cfg.cutoff.value = c.clone();
    }
    cfg.cutoff.policy()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = commands::Run {
        cfg,
        out: cli.out.clone(),
        seed: cli.seed,
    };
    let summary = commands::dispatch(cli.command, &ctx)?;
    summary.write(&ctx, cli.command)
}

/// 1 for bad input, 2 for numerical failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(k) = cause.downcast_ref::<kerr_dpt::Error>() {
            return if k.is_numerical() { 2 } else { 1 };
        }
    }
    1
}
