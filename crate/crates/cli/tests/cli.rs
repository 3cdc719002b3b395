use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_nmqsd");

const FREE_TWO_LEVEL: &str = "\
[model]
family = \"two_level\"
omega = 0.2

[correlation]
Gamma = 1.0
gamma = 0.2

[run]
t_end = 5.0
dt = 0.001
n_traj = 2000
master_seed = 11

[output]
label = \"free\"
sample_dt = 0.5
";

fn recipe(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../recipes")
        .join(name);
    fs::read_to_string(path).unwrap()
}

fn set(src: &str, key: &str, value: &str) -> String {
    let mut found = false;
    let out: Vec<String> = src
        .lines()
        .map(|l| {
            if l.split('=').next().map(str::trim) == Some(key) {
                found = true;
                format!("{key} = {value}")
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(found, "no key {key}");
    out.join("\n") + "\n"
}

fn nmqsd(dir: &TempDir, cfg: &str, args: &[&str]) -> Output {
    let path = dir.path().join("run.cfg");
    fs::write(&path, cfg).unwrap();
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"));
    cmd.env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Data rows of a CSV written by the runner, keyed by header name.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Table {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().unwrap().split(',').map(String::from).collect();
        let rows = lines
            .map(|l| l.split(',').map(String::from).collect())
            .collect();
        Table { header, rows }
    }

    fn col(&self, name: &str) -> Vec<f64> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .unwrap_or_else(|| panic!("no column {name}"));
        self.rows.iter().map(|r| r[i].parse().unwrap()).collect()
    }

    fn at(&self, name: &str, t: f64) -> f64 {
        let ts = self.col("t");
        let k = ts.iter().position(|x| (x - t).abs() < 1e-9).unwrap();
        self.col(name)[k]
    }
}

fn out(dir: &TempDir, file: &str) -> PathBuf {
    dir.path().join("out").join(file)
}

#[test]
fn free_run_starts_at_one_and_matches_analytic() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(&dir, FREE_TWO_LEVEL, &["run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = Table::read(&out(&dir, "free.csv"));
    assert_eq!(
        t.header,
        [
            "t",
            "fidelity_mc",
            "stderr_mc",
            "fidelity_analytic",
            "n_traj",
            "divergent_count"
        ]
    );
    assert_eq!(t.rows.len(), 11);
    assert_eq!(t.col("fidelity_mc")[0], 1.0);
    let (mc, se, an) = (
        t.col("fidelity_mc"),
        t.col("stderr_mc"),
        t.col("fidelity_analytic"),
    );
    for i in 1..mc.len() {
        assert!(
            (mc[i] - an[i]).abs() <= 3.0 * se[i],
            "row {i}: {} vs {} ± {}",
            mc[i],
            an[i],
            se[i]
        );
    }
    assert!(t.col("n_traj").iter().all(|&n| n == 2000.0));
    assert!(out(&dir, "free.gp").exists());
}

#[test]
fn output_embeds_config_and_nine_digits() {
    let dir = TempDir::new().unwrap();
    let cfg = set(FREE_TWO_LEVEL, "n_traj", "4");
    assert_eq!(code(&nmqsd(&dir, &cfg, &["run"])), 0);
    let text = fs::read_to_string(out(&dir, "free.csv")).unwrap();
    assert!(text.contains("# master_seed = 11"));
    let embedded: String = text
        .lines()
        .skip_while(|l| *l != "# --- config ---")
        .skip(1)
        .take_while(|l| *l != "# --- end config ---")
        .map(|l| l.strip_prefix("# ").unwrap_or("").to_string() + "\n")
        .collect();
    let again = nmqsd_cli::config::RunConfig::parse(&embedded).unwrap();
    assert_eq!(again.run.n_traj, 4);
    let row = text.lines().find(|l| l.starts_with("5.0")).unwrap();
    let f = row.split(',').nth(1).unwrap();
    assert_eq!(
        f.split('e').next().unwrap().replace('.', "").len(),
        9,
        "{f}"
    );
}

#[test]
fn rerun_from_embedded_config_reproduces_file() {
    let dir = TempDir::new().unwrap();
    let cfg = set(FREE_TWO_LEVEL, "n_traj", "2");
    assert_eq!(code(&nmqsd(&dir, &cfg, &["run"])), 0);
    let first = fs::read_to_string(out(&dir, "free.csv")).unwrap();
    assert_eq!(code(&nmqsd(&dir, &cfg, &["run"])), 0);
    let second = fs::read_to_string(out(&dir, "free.csv")).unwrap();
    assert_eq!(first, second);

    let embedded: String = first
        .lines()
        .skip_while(|l| *l != "# --- config ---")
        .skip(1)
        .take_while(|l| *l != "# --- end config ---")
        .map(|l| l.strip_prefix("# ").unwrap_or("").to_string() + "\n")
        .collect();
    let other = TempDir::new().unwrap();
    assert_eq!(code(&nmqsd(&other, &embedded, &["run"])), 0);
    assert_eq!(first, fs::read_to_string(out(&other, "free.csv")).unwrap());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let cfg = set(FREE_TWO_LEVEL, "n_traj", "300");
    assert_eq!(code(&nmqsd(&dir, &cfg, &["run", "--threads", "1"])), 0);
    let one = fs::read_to_string(out(&dir, "free.csv")).unwrap();
    assert_eq!(code(&nmqsd(&dir, &cfg, &["run", "--threads", "3"])), 0);
    assert_eq!(one, fs::read_to_string(out(&dir, "free.csv")).unwrap());
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = TempDir::new().unwrap();
    let cfg = FREE_TWO_LEVEL.replace("omega = 0.2", "omega = 0.2\nomgea = 0.3");
    let o = nmqsd(&dir, &cfg, &["run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.cfg:4:"), "{}", stderr(&o));
    assert!(!out(&dir, "free.csv").exists());
}

#[test]
fn invalid_value_is_a_config_error_with_line() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(&dir, &set(FREE_TWO_LEVEL, "gamma", "-0.2"), &["run"]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("run.cfg:7: correlation.gamma"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn divergent_trajectories_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = set(FREE_TWO_LEVEL, "n_traj", "50")
        .replace("master_seed = 11", "master_seed = 11\nnorm_guard = 1.01");
    let o = nmqsd(&dir, &cfg, &["run"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let t = Table::read(&out(&dir, "free.csv"));
    assert!(t.col("divergent_count")[0] > 0.0);
}

#[test]
fn sweep_rejects_empty_values_and_bad_axis() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(
        &dir,
        FREE_TWO_LEVEL,
        &["sweep", "--axis", "gamma", "--values", ""],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = nmqsd(
        &dir,
        FREE_TWO_LEVEL,
        &["sweep", "--axis", "omega", "--values", "1"],
    );
    assert_eq!(code(&o), 2);
    let o = nmqsd(
        &dir,
        FREE_TWO_LEVEL,
        &["sweep", "--axis", "psi", "--values", "1"],
    );
    assert_eq!(code(&o), 2, "psi needs pulses");
}

fn pulsed_two_level(n_traj: usize, t_end: f64) -> String {
    let cfg = recipe("twolevel.cfg");
    let cfg = set(&cfg, "n_traj", &n_traj.to_string());
    let cfg = set(&cfg, "t_end", &format!("{t_end:?}"));
    set(&cfg, "sample_dt", "0.5")
}

#[test]
fn tau_sweep_writes_one_table_per_value_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = pulsed_two_level(20, 15.0);
    let o = nmqsd(
        &dir,
        &cfg,
        &[
            "sweep",
            "--axis",
            "tau_over_delta",
            "--values",
            "2,3,6",
            "--at",
            "5,15",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for v in ["2", "3", "6"] {
        assert!(out(&dir, &format!("twolevel_tau_over_delta_{v}.csv")).exists());
    }
    let summary = out(&dir, "twolevel_sweep_tau_over_delta.csv");
    assert!(stdout(&o).contains("twolevel_sweep_tau_over_delta.csv"));
    let t = Table::read(&summary);
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.col("tau_over_delta"), vec![2.0, 3.0, 6.0]);
    assert_eq!(t.col("fidelity_analytic@15").len(), 3);
}

fn free_of(cfg: &str) -> String {
    let pulse = "[pulse]\nenabled = true\ntau = 0.08\ndelta = 0.04\npsi = 2.0\n";
    assert!(cfg.contains(pulse));
    cfg.replace(pulse, "[pulse]\nenabled = false\n")
}

#[test]
fn tau_six_delta_decays_faster_than_free_at_15() {
    let dir = TempDir::new().unwrap();
    let cfg = pulsed_two_level(20, 15.0);
    let o = nmqsd(
        &dir,
        &cfg,
        &[
            "sweep",
            "--axis",
            "tau_over_delta",
            "--values",
            "2,3,6",
            "--at",
            "15",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let controlled =
        Table::read(&out(&dir, "twolevel_sweep_tau_over_delta.csv")).col("fidelity_analytic@15")[2];

    let base = TempDir::new().unwrap();
    let o = nmqsd(&base, &free_of(&cfg), &["run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let free = Table::read(&out(&base, "twolevel.csv")).at("fidelity_analytic", 15.0);
    assert!(
        controlled < free,
        "tau = 6 Delta: {controlled} vs free {free}"
    );
}

#[test]
fn gamma_sweep_free_dynamics_tends_to_one_half() {
    let dir = TempDir::new().unwrap();
    let cfg = free_of(&pulsed_two_level(200, 20.0));
    let o = nmqsd(
        &dir,
        &cfg,
        &[
            "sweep", "--axis", "gamma", "--values", "0.2,2.0", "--at", "20",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = Table::read(&out(&dir, "twolevel_sweep_gamma.csv"));
    for (a, (m, s)) in t
        .col("fidelity_analytic@20")
        .iter()
        .zip(t.col("fidelity_mc@20").iter().zip(t.col("stderr_mc@20")))
    {
        assert!((a - 0.5).abs() <= 0.05, "analytic {a}");
        assert!((m - 0.5).abs() <= 0.05 + 3.0 * s, "mc {m} ± {s}");
    }
}

fn multilevel(n_traj: usize) -> String {
    set(
        &recipe("multilevel.cfg"),
        "n_traj",
        &n_traj.to_string(),
    )
}

#[test]
fn psi_sweep_improves_101_level_fidelity() {
    let dir = TempDir::new().unwrap();
    let cfg = set(&multilevel(10), "sample_dt", "5.0");
    let o = nmqsd(
        &dir,
        &cfg,
        &["sweep", "--axis", "psi", "--values", "1,2,4", "--at", "40"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = Table::read(&out(&dir, "multilevel_sweep_psi.csv")).col("fidelity_analytic@40");
    assert!(f[0] < f[1] && f[1] < f[2], "{f:?}");
}

#[test]
fn multilevel_recipe_holds_fidelity_at_40() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(&dir, &multilevel(100), &["run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = Table::read(&out(&dir, "multilevel.csv"));
    let a = t.at("fidelity_analytic", 40.0);
    let (m, s) = (t.at("fidelity_mc", 40.0), t.at("stderr_mc", 40.0));
    assert!((0.80..=0.90).contains(&a), "analytic {a}");
    assert!(
        (0.80 - 3.0 * s..=0.90 + 3.0 * s).contains(&m),
        "mc {m} ± {s}"
    );
}

#[test]
fn validate_default_config_passes() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(&dir, FREE_TWO_LEVEL, &["validate"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(),
        5
    );
}

#[test]
fn validate_catches_corrupted_noise_variance() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(
        &dir,
        FREE_TWO_LEVEL,
        &["validate", "--inject-noise-scale", "2"],
    );
    assert_eq!(code(&o), 1);
    assert!(
        stdout(&o).contains("FAIL noise correlation"),
        "{}",
        stdout(&o)
    );
    assert!(stderr(&o).contains("noise correlation"));
}

#[test]
fn validate_flags_coarse_step() {
    let dir = TempDir::new().unwrap();
    let o = nmqsd(&dir, &set(FREE_TWO_LEVEL, "dt", "0.1"), &["validate"]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    assert!(text.contains("FAIL two-level amplitude oracle"), "{text}");
    assert!(text.contains("try run.dt <="), "{text}");
}
