use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use nmqsd_cli::config::{ConfigError, RunConfig};
use nmqsd_cli::exit;
use nmqsd_cli::experiment::{parse_values, run_experiment, sweep, Axis};
use nmqsd_cli::validate::{validate, ValidateOptions};

#[derive(Parser)]
#[command(
    name = "nmqsd",
    version,
    about = "Non-Markovian QSD fidelity runs, sweeps and self-checks"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding output.directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo ensemble plus analytic curve for one configuration.
    Run { config: PathBuf },
    /// One run per value of a parameter, plus a summary table.
    Sweep {
        config: PathBuf,
        /// gamma, tau_over_delta, psi or N.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Checkpoint times for the summary (default: t_end).
        #[arg(long, value_delimiter = ',')]
        at: Vec<f64>,
    },
    /// Numerical self-checks at the configured parameters.
    Validate {
        config: PathBuf,
        /// Scales every noise innovation (fault injection).
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_noise_scale: f64,
    },
}

fn load(path: &Path) -> Result<RunConfig, String> {
    let src = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    RunConfig::parse(&src).map_err(|e| match e.line {
        Some(l) => format!("{}:{l}: {}", path.display(), e.message),
        None => format!("{}: {}", path.display(), e.message),
    })
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {msg}");
    ExitCode::from(exit::CONFIG)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            return config_error("--threads must be >= 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            error!("{e}");
            return ExitCode::from(exit::VALIDATION);
        }
    }
    let path = match &cli.command {
        Command::Run { config }
        | Command::Sweep { config, .. }
        | Command::Validate { config, .. } => config,
    };
    let cfg = match load(path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.directory.clone());

    let result = match cli.command {
        Command::Run { .. } => run_experiment(&cfg, &out).map(|r| {
            println!("{}", r.csv.display());
            r.quality_ok
        }),
        Command::Sweep {
            axis, values, at, ..
        } => {
            let axis = match Axis::parse(&axis) {
                Ok(a) => a,
                Err(e) => return config_error(e),
            };
            let values = match parse_values(&values) {
                Ok(v) => v,
                Err(e) => return config_error(e),
            };
            let at = if at.is_empty() {
                vec![cfg.run.t_end]
            } else {
                at
            };
            if let Some(t) = at.iter().find(|t| !(**t >= 0.0 && **t <= cfg.run.t_end)) {
                return config_error(format!("checkpoint {t} outside [0, run.t_end]"));
            }
            sweep(&cfg, axis, &values, &at, &out).map(|s| {
                println!("{}", s.summary.display());
                s.quality_ok()
            })
        }
        Command::Validate {
            inject_noise_scale, ..
        } => {
            let checks = validate(
                &cfg,
                ValidateOptions {
                    noise_scale: inject_noise_scale,
                },
            );
            for c in &checks {
                println!("{c}");
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
            if failed.is_empty() {
                return ExitCode::from(exit::OK);
            }
            eprintln!("validation failed: {}", failed.join(", "));
            return ExitCode::from(exit::VALIDATION);
        }
    };
    match result {
        Ok(true) => ExitCode::from(exit::OK),
        Ok(false) => {
            eprintln!("more than 1% of the trajectories diverged; reduce run.dt");
            ExitCode::from(exit::QUALITY)
        }
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => config_error(e),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::VALIDATION)
        }
    }
}
