//! `run` and `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use nmqsd::analytic;
use nmqsd::noise::trajectory_seed;
use nmqsd::qsd::{ensemble_fidelity, EnsembleConfig, FidelityCurve, DEFAULT_NORM_GUARD};

use crate::config::{ConfigError, FamilyName, RunConfig};
use crate::output::{metadata, num, write_run, ResultTable};

/// A finished run. `quality_ok` is false when more than 1% of the
/// trajectories diverged.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: ResultTable,
    pub csv: PathBuf,
    pub quality_ok: bool,
}

/// Linear interpolation of an exact curve at `t`.
fn interpolate(curve: &FidelityCurve, t: f64) -> f64 {
    let ts = curve.times();
    let k = ts.partition_point(|&x| x < t);
    if k == 0 {
        return curve.mean[0];
    }
    if k == ts.len() {
        return curve.mean[ts.len() - 1];
    }
    let w = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
    (1.0 - w) * curve.mean[k - 1] + w * curve.mean[k]
}

/// Runs the Monte-Carlo ensemble and, if enabled, the analytic evaluator.
pub fn compute(cfg: &RunConfig) -> Result<(ResultTable, bool)> {
    let dynamics = cfg.dynamics().context("building the dynamics")?;
    let ens = EnsembleConfig {
        n_traj: cfg.run.n_traj,
        master_seed: cfg.run.master_seed,
        initial_state: cfg.initial_state(),
        norm_guard: cfg.run.norm_guard.unwrap_or(DEFAULT_NORM_GUARD),
        sample_stride: cfg.sample_stride(),
        ..Default::default()
    };
    info!(
        "{}: {} trajectories, {} steps",
        cfg.output.label,
        cfg.run.n_traj,
        dynamics.grid().intervals()
    );
    let res = ensemble_fidelity(&dynamics, &ens)?;
    let quality_ok = res.check_quality().is_ok();
    if res.divergent > 0 {
        warn!("{} of {} trajectories diverged", res.divergent, res.total);
    }
    let times = res.fidelity.times().to_vec();

    let fidelity_analytic = if !cfg.analytic.enabled {
        None
    } else if cfg.run.initial_state.is_some() {
        warn!("analytic curve skipped: it assumes the default initial state");
        None
    } else {
        info!("{}: analytic curve", cfg.output.label);
        let curve = analytic::fidelity(&dynamics, cfg.analytic.coarsen)?;
        Some(times.iter().map(|&t| interpolate(&curve, t)).collect())
    };
    let table = ResultTable {
        times,
        fidelity_mc: res.fidelity.mean,
        stderr_mc: res.fidelity.stderr,
        fidelity_analytic,
        n_traj: res.total - res.divergent,
        divergent: res.divergent,
    };
    Ok((table, quality_ok))
}

pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let (table, quality_ok) = compute(cfg)?;
    let csv = write_run(out_dir, cfg, &table)
        .with_context(|| format!("writing results to {}", out_dir.display()))?;
    info!("wrote {}", csv.display());
    Ok(RunOutcome {
        table,
        csv,
        quality_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Gamma,
    TauOverDelta,
    Psi,
    N,
}

impl Axis {
    pub fn parse(name: &str) -> Result<Axis, ConfigError> {
        match name {
            "gamma" => Ok(Axis::Gamma),
            "tau_over_delta" => Ok(Axis::TauOverDelta),
            "psi" => Ok(Axis::Psi),
            "N" => Ok(Axis::N),
            _ => Err(usage(format!(
                "unknown sweep axis '{name}' (expected gamma, tau_over_delta, psi or N)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::TauOverDelta => "tau_over_delta",
            Axis::Psi => "psi",
            Axis::N => "N",
        }
    }
}

fn usage(message: String) -> ConfigError {
    ConfigError {
        line: None,
        message,
    }
}

/// Parses a comma-separated value list.
pub fn parse_values(list: &str) -> Result<Vec<f64>, ConfigError> {
    let values: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(format!("sweep value '{s}' is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(usage("sweep needs at least one value".into()));
    }
    Ok(values)
}

/// The configuration of sweep point `index`, with its own seed and label.
pub fn sweep_point(
    base: &RunConfig,
    axis: Axis,
    index: usize,
    value: f64,
) -> Result<RunConfig, ConfigError> {
    let mut cfg = base.clone();
    match axis {
        Axis::Gamma => cfg.correlation.gamma = value,
        Axis::Psi | Axis::TauOverDelta if !cfg.pulse.enabled => {
            return Err(usage(format!(
                "sweeping {} needs pulse.enabled = true",
                axis.name()
            )));
        }
        Axis::Psi => cfg.pulse.psi = Some(value),
        Axis::TauOverDelta => cfg.pulse.tau = cfg.pulse.delta.map(|d| value * d),
        Axis::N => {
            if cfg.model.family != FamilyName::Multilevel {
                return Err(usage("sweeping N needs the multilevel family".into()));
            }
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(usage(format!("N = {value} is not a positive integer")));
            }
            cfg.model.n = Some(value as usize);
        }
    }
    cfg.run.master_seed = trajectory_seed(base.run.master_seed, index as u64);
    cfg.output.label = format!("{}_{}_{}", base.output.label, axis.name(), value);
    cfg.validate()
        .map_err(|(s, k, m)| usage(format!("sweep point {value}: {s}.{k}: {m}")))?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<RunOutcome>,
    pub summary: PathBuf,
}

impl SweepOutcome {
    pub fn quality_ok(&self) -> bool {
        self.runs.iter().all(|r| r.quality_ok)
    }
}

/// Runs every sweep point and writes `<label>_sweep_<axis>.csv` with the
/// fidelity at each checkpoint time.
pub fn sweep(
    base: &RunConfig,
    axis: Axis,
    values: &[f64],
    checkpoints: &[f64],
    out_dir: &Path,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        bail!(usage("sweep needs at least one value".into()));
    }
    let points: Vec<RunConfig> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| sweep_point(base, axis, i, v))
        .collect::<Result<_, _>>()?;
    let mut runs = Vec::with_capacity(points.len());
    for cfg in &points {
        runs.push(run_experiment(cfg, out_dir)?);
    }

    let mut s = metadata(
        base,
        &[
            ("axis", axis.name().to_string()),
            ("values", format!("{values:?}")),
            ("checkpoints", format!("{checkpoints:?}")),
        ],
    );
    s.push_str(axis.name());
    for t in checkpoints {
        write!(s, ",fidelity_mc@{t},stderr_mc@{t},fidelity_analytic@{t}").unwrap();
    }
    s.push_str(",divergent_count\n");
    for (v, run) in values.iter().zip(&runs) {
        s.push_str(&num(*v));
        for &t in checkpoints {
            let i = run.table.row_near(t);
            let a = run
                .table
                .fidelity_analytic
                .as_ref()
                .map(|a| num(a[i]))
                .unwrap_or_default();
            write!(
                s,
                ",{},{},{a}",
                num(run.table.fidelity_mc[i]),
                num(run.table.stderr_mc[i])
            )
            .unwrap();
        }
        writeln!(s, ",{}", run.table.divergent).unwrap();
    }
    let summary = out_dir.join(format!("{}_sweep_{}.csv", base.output.label, axis.name()));
    fs::write(&summary, s).with_context(|| format!("writing {}", summary.display()))?;
    info!("wrote {}", summary.display());
    Ok(SweepOutcome { runs, summary })
}
