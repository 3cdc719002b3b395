//! Run configuration: a sectioned TOML file with a fixed set of keys.
//!
//! Parsing rejects unknown keys, and every value is checked before any
//! computation starts. Errors carry the line of the offending key.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use nmqsd::control::{aligned_grid, PulseTrain};
use nmqsd::models::{Dynamics, ModelSpec};
use nmqsd::noise::CorrelationSpec;
use nmqsd::numerics::TimeGrid;
use nmqsd::C64;

/// A configuration problem, with the 1-based line it points at when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    TwoLevel,
    Qutrit,
    Multilevel,
}

/// A complex amplitude written as a number or as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Real(f64),
    Complex([f64; 2]),
}

impl Amplitude {
    pub fn value(self) -> C64 {
        match self {
            Amplitude::Real(x) => C64::new(x, 0.0),
            Amplitude::Complex([re, im]) => C64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
    pub omega: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSection {
    #[serde(rename = "Gamma")]
    pub dissipation: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub t_end: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<Amplitude>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_guard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_coarsen")]
    pub coarsen: usize,
}

impl Default for AnalyticSection {
    fn default() -> Self {
        AnalyticSection {
            enabled: true,
            coarsen: default_coarsen(),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_coarsen() -> usize {
    nmqsd::analytic::DEFAULT_COARSEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_label")]
    pub label: String,
    /// Spacing of the written rows; defaults to 0.1 (or `dt` if larger).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_dt: Option<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            label: default_label(),
            sample_dt: None,
        }
    }
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_label() -> String {
    "run".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PqSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_basis: Option<Vec<Amplitude>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub correlation: CorrelationSection,
    #[serde(default)]
    pub pulse: PulseSection,
    pub run: RunSection,
    #[serde(default)]
    pub analytic: AnalyticSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub pq: PqSection,
}

const NORM_TOL: f64 = 1e-9;

impl RunConfig {
    /// Parses and validates a configuration file's contents.
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of_offset(src, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate()
            .map_err(|(section, key, message)| ConfigError {
                line: line_of_key(src, section, key),
                message: format!("{section}.{key}: {message}"),
            })?;
        Ok(cfg)
    }

    /// The configuration as TOML, as embedded in output files.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every value. Errors name the offending `(section, key)`.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let m = &self.model;
        if !m.omega.is_finite() {
            return Err(("model", "omega", "must be finite".into()));
        }
        if m.family != FamilyName::Qutrit && m.kappa.is_some() {
            return Err(("model", "kappa", "only used by the qutrit family".into()));
        }
        if m.family != FamilyName::Multilevel && m.n.is_some() {
            return Err(("model", "N", "only used by the multilevel family".into()));
        }
        if m.family == FamilyName::Qutrit && m.kappa.is_none() {
            return Err(("model", "kappa", "required for the qutrit family".into()));
        }
        if m.family == FamilyName::Multilevel && m.n.is_none() {
            return Err(("model", "N", "required for the multilevel family".into()));
        }
        let model = self.model_spec().map_err(|e| {
            let key = if m.family == FamilyName::Qutrit {
                "kappa"
            } else {
                "N"
            };
            ("model", key, e.to_string())
        })?;

        let c = &self.correlation;
        if !(c.dissipation.is_finite() && c.dissipation >= 0.0) {
            return Err(("correlation", "Gamma", "must be finite and >= 0".into()));
        }
        self.correlation_spec()
            .map_err(|e| ("correlation", "gamma", e.to_string()))?;

        let p = &self.pulse;
        if p.enabled {
            for (key, v) in [("tau", p.tau), ("delta", p.delta), ("psi", p.psi)] {
                if v.is_none() {
                    return Err(("pulse", key, "required when pulses are enabled".into()));
                }
            }
        }
        let train = self
            .pulse_train()
            .map_err(|e| ("pulse", "tau", e.to_string()))?;

        let r = &self.run;
        if !(r.t_end.is_finite() && r.t_end > 0.0) {
            return Err(("run", "t_end", "must be > 0".into()));
        }
        if !(r.dt.is_finite() && r.dt > 0.0 && r.dt <= r.t_end) {
            return Err(("run", "dt", "must be > 0 and at most t_end".into()));
        }
        if r.n_traj == 0 {
            return Err(("run", "n_traj", "must be >= 1".into()));
        }
        if let Some(g) = r.norm_guard {
            if !(g > 1.0) {
                return Err(("run", "norm_guard", "must be > 1".into()));
            }
        }
        if let Some(s) = &r.initial_state {
            check_state(s, model.dimension()).map_err(|e| ("run", "initial_state", e))?;
        }
        aligned_grid(&train, r.t_end, r.dt).map_err(|e| ("run", "dt", e.to_string()))?;

        if self.analytic.coarsen == 0 {
            return Err(("analytic", "coarsen", "must be >= 1".into()));
        }
        let o = &self.output;
        if o.label.is_empty() || o.label.contains(['/', '\\']) {
            return Err(("output", "label", "must be a non-empty file name".into()));
        }
        if let Some(s) = o.sample_dt {
            if !(s.is_finite() && s > 0.0) {
                return Err(("output", "sample_dt", "must be > 0".into()));
            }
        }
        if let Some(p) = &self.pq.p_basis {
            check_state(p, model.dimension()).map_err(|e| ("pq", "p_basis", e))?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> nmqsd::Result<ModelSpec> {
        let m = &self.model;
        match m.family {
            FamilyName::TwoLevel => Ok(ModelSpec::two_level(m.omega)),
            FamilyName::Qutrit => ModelSpec::qutrit(m.omega, m.kappa.unwrap_or(f64::NAN)),
            FamilyName::Multilevel => ModelSpec::multilevel(m.omega, m.n.unwrap_or(0)),
        }
    }

    pub fn correlation_spec(&self) -> nmqsd::Result<CorrelationSpec> {
        CorrelationSpec::new(self.correlation.dissipation, self.correlation.gamma)
    }

    pub fn pulse_train(&self) -> nmqsd::Result<PulseTrain> {
        let p = &self.pulse;
        match (p.enabled, p.tau, p.delta, p.psi) {
            (true, Some(tau), Some(delta), Some(psi)) => PulseTrain::new(tau, delta, psi),
            _ => Ok(PulseTrain::disabled()),
        }
    }

    pub fn grid(&self) -> nmqsd::Result<TimeGrid> {
        aligned_grid(&self.pulse_train()?, self.run.t_end, self.run.dt)
    }

    pub fn dynamics(&self) -> nmqsd::Result<Dynamics> {
        Dynamics::new(
            self.model_spec()?,
            self.correlation_spec()?,
            &self.pulse_train()?,
            &self.grid()?,
        )
    }

    pub fn initial_state(&self) -> Option<Vec<C64>> {
        self.run
            .initial_state
            .as_ref()
            .map(|s| s.iter().map(|a| a.value()).collect())
    }

    pub fn p_basis(&self) -> Option<Vec<C64>> {
        self.pq
            .p_basis
            .as_ref()
            .map(|s| s.iter().map(|a| a.value()).collect())
    }

    /// Grid-point stride between written rows.
    pub fn sample_stride(&self) -> usize {
        let s = self.output.sample_dt.unwrap_or(0.1);
        ((s / self.run.dt).round() as usize).max(1)
    }
}

fn check_state(amps: &[Amplitude], dim: usize) -> Result<(), String> {
    if amps.len() != dim {
        return Err(format!("needs {dim} amplitudes, got {}", amps.len()));
    }
    let n2: f64 = amps.iter().map(|a| a.value().norm_sqr()).sum();
    if !((n2 - 1.0).abs() <= NORM_TOL) {
        return Err(format!("must be normalized, |v|^2 = {n2}"));
    }
    Ok(())
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, or of the section header when the
/// key is absent.
fn line_of_key(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = "";
    let mut header = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim().trim_matches('"');
            if (current == section && k == key) || k == format!("{section}.{key}") {
                return Some(i + 1);
            }
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "\
[model]
family = \"two_level\"
omega = 0.2

[correlation]
Gamma = 1.0
gamma = 0.2

[run]
t_end = 2.0
dt = 0.01
n_traj = 10
master_seed = 3
";

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = RunConfig::parse(BASIC).unwrap();
        assert_eq!(cfg.model.family, FamilyName::TwoLevel);
        assert!(!cfg.pulse.enabled);
        assert!(cfg.analytic.enabled);
        assert_eq!(cfg.analytic.coarsen, 4);
        assert_eq!(cfg.output.label, "run");
        assert_eq!(cfg.sample_stride(), 10);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::parse(BASIC).unwrap();
        cfg.run.initial_state = Some(vec![Amplitude::Real(0.6), Amplitude::Complex([0.0, 0.8])]);
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let src = BASIC.replace("omega = 0.2", "omega = 0.2\nomgea = 1");
        let e = RunConfig::parse(&src).unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        assert!(e.message.contains("omgea"), "{e}");
    }

    #[test]
    fn bad_value_reports_key_line() {
        let src = BASIC.replace("dt = 0.01", "dt = -1.0");
        let e = RunConfig::parse(&src).unwrap_err();
        assert_eq!(e.line, Some(11), "{e}");
        assert!(e.message.starts_with("run.dt"), "{e}");
    }

    #[test]
    fn family_keys_are_checked() {
        let src = BASIC.replace("omega = 0.2", "omega = 0.2\nN = 3");
        let e = RunConfig::parse(&src).unwrap_err();
        assert_eq!(e.line, Some(4));
        let src = BASIC.replace("\"two_level\"", "\"qutrit\"");
        let e = RunConfig::parse(&src).unwrap_err();
        assert!(e.message.contains("kappa"), "{e}");
        assert_eq!(e.line, Some(1));
    }

    #[test]
    fn pulses_need_all_keys_and_resolution() {
        let src = format!("{BASIC}\n[pulse]\nenabled = true\ntau = 0.08\ndelta = 0.04\n");
        let e = RunConfig::parse(&src).unwrap_err();
        assert!(e.message.contains("pulse.psi"), "{e}");
        let src = format!("{BASIC}\n[pulse]\nenabled = true\ntau = 0.08\ndelta = 0.04\npsi = 4\n");
        RunConfig::parse(&src).unwrap();
        let e = RunConfig::parse(&src.replace("dt = 0.01", "dt = 0.05")).unwrap_err();
        assert!(e.message.contains("resolve"), "{e}");
        assert_eq!(e.line, Some(11));
    }

    #[test]
    fn states_must_match_dimension_and_norm() {
        let src = format!("{BASIC}\n[pq]\np_basis = [1.0, 0.0, 0.0]\n");
        assert!(RunConfig::parse(&src)
            .unwrap_err()
            .message
            .contains("needs 2"));
        let src = format!("{BASIC}\n[pq]\np_basis = [1.0, 1.0]\n");
        assert!(RunConfig::parse(&src)
            .unwrap_err()
            .message
            .contains("normalized"));
    }

    #[test]
    fn syntax_error_has_a_line() {
        let src = BASIC.replace("gamma = 0.2", "gamma = ");
        let e = RunConfig::parse(&src).unwrap_err();
        assert_eq!(e.line, Some(7), "{e}");
    }
}
