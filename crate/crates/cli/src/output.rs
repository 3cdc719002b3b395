//! CSV tables with `#` metadata headers, and gnuplot scripts.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One run's output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub times: Vec<f64>,
    pub fidelity_mc: Vec<f64>,
    pub stderr_mc: Vec<f64>,
    pub fidelity_analytic: Option<Vec<f64>>,
    /// Trajectories that entered the averages.
    pub n_traj: usize,
    pub divergent: usize,
}

impl ResultTable {
    /// Row closest to `t`.
    pub fn row_near(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Nine significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.8e}")
}

/// `# key = value` lines followed by the configuration echo.
pub fn metadata(cfg: &RunConfig, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    writeln!(s, "# nmqsd {VERSION}").unwrap();
    writeln!(s, "# master_seed = {}", cfg.run.master_seed).unwrap();
    for (k, v) in extra {
        writeln!(s, "# {k} = {v}").unwrap();
    }
    writeln!(s, "# --- config ---").unwrap();
    for line in cfg.to_toml().lines() {
        writeln!(s, "# {line}").unwrap();
    }
    writeln!(s, "# --- end config ---").unwrap();
    s
}

pub fn table_csv(cfg: &RunConfig, table: &ResultTable) -> String {
    let mut s = metadata(cfg, &[]);
    s.push_str("t,fidelity_mc,stderr_mc,fidelity_analytic,n_traj,divergent_count\n");
    for (i, t) in table.times.iter().enumerate() {
        let analytic = table
            .fidelity_analytic
            .as_ref()
            .map(|a| num(a[i]))
            .unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            num(*t),
            num(table.fidelity_mc[i]),
            num(table.stderr_mc[i]),
            analytic,
            table.n_traj,
            table.divergent
        )
        .unwrap();
    }
    s
}

pub fn plot_script(csv_name: &str, title: &str, analytic: bool) -> String {
    let mut s = String::new();
    writeln!(s, "# gnuplot script; run with: gnuplot -p <this file>").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set datafile commentschars '#'").unwrap();
    writeln!(s, "set key autotitle columnheader").unwrap();
    writeln!(s, "set title '{title}' noenhanced").unwrap();
    writeln!(s, "set xlabel 'Gamma t'").unwrap();
    writeln!(s, "set ylabel 'fidelity'").unwrap();
    writeln!(s, "set yrange [0:1.05]").unwrap();
    write!(
        s,
        "plot '{csv_name}' using 1:2:3 with yerrorbars pt 7 ps 0.4 title 'Monte Carlo'"
    )
    .unwrap();
    if analytic {
        write!(
            s,
            ", \\\n     '{csv_name}' using 1:4 with lines lw 2 title 'analytic'"
        )
        .unwrap();
    }
    s.push('\n');
    s
}

/// Writes `<dir>/<label>.csv` and `<dir>/<label>.gp`; returns the CSV path.
pub fn write_run(dir: &Path, cfg: &RunConfig, table: &ResultTable) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let label = &cfg.output.label;
    let csv = dir.join(format!("{label}.csv"));
    fs::write(&csv, table_csv(cfg, table))?;
    let script = plot_script(
        &format!("{label}.csv"),
        label,
        table.fidelity_analytic.is_some(),
    );
    fs::write(dir.join(format!("{label}.gp")), script)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(num(1.0), "1.00000000e0");
        assert_eq!(num(0.123456789123), "1.23456789e-1");
    }

    #[test]
    fn row_near_picks_closest() {
        let t = ResultTable {
            times: vec![0.0, 0.5, 1.0],
            fidelity_mc: vec![1.0; 3],
            stderr_mc: vec![0.0; 3],
            fidelity_analytic: None,
            n_traj: 1,
            divergent: 0,
        };
        assert_eq!(t.row_near(0.7), 1);
        assert_eq!(t.row_near(9.0), 2);
    }
}
