//! Rectangular pulse control `c(t)` and the driven frequency `E(t) = ω + c(t)`.
//!
//! The train switches on for the last `Δ` of every period `τ`: `c(t) = Ψ/Δ`
//! on the windows `(nτ - Δ, nτ]`, `n = 1, 2, ...`, and zero elsewhere. Windows
//! are half-open on the left. Times within `1e-12` (relative to `max(1, t)`)
//! of an edge snap to it.
//!
//! Integrators never evaluate `c` at an edge: [`aligned_grid`] puts every edge
//! on the grid and [`Detuning`] samples each grid interval at its midpoint.

use crate::numerics::TimeGrid;
use crate::{Error, Result};

const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseTrain {
    /// Period `τ`.
    pub tau: f64,
    /// Duration `Δ` of the pulse inside each period.
    pub delta: f64,
    /// Dimensionless area `Ψ`; the amplitude is `Ψ/Δ`.
    pub psi: f64,
    pub enabled: bool,
}

impl PulseTrain {
    pub fn new(tau: f64, delta: f64, psi: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "pulse duration must be > 0, got {delta}"
            )));
        }
        if !(tau.is_finite() && tau >= delta * (1.0 - 1e-12)) {
            return Err(Error::InvalidParameter(format!(
                "pulse period {tau} must be at least the duration {delta}"
            )));
        }
        if !psi.is_finite() {
            return Err(Error::InvalidParameter("pulse area must be finite".into()));
        }
        Ok(PulseTrain {
            tau,
            delta,
            psi,
            enabled: true,
        })
    }

    /// A train that is zero everywhere.
    pub fn disabled() -> Self {
        PulseTrain {
            tau: 1.0,
            delta: 1.0,
            psi: 0.0,
            enabled: false,
        }
    }

    pub fn amplitude(&self) -> f64 {
        if self.enabled {
            self.psi / self.delta
        } else {
            0.0
        }
    }

    /// All window edges `nτ - Δ` and `nτ` in `(0, t_end]`, sorted.
    pub fn edges(&self, t_end: f64) -> Vec<f64> {
        if !self.enabled {
            return Vec::new();
        }
        let tol = EDGE_TOL * t_end.abs().max(1.0);
        let mut out = Vec::new();
        for n in 1.. {
            let close = n as f64 * self.tau;
            let open = close - self.delta;
            if open > t_end + tol {
                break;
            }
            if open > tol && out.last().is_none_or(|&l: &f64| open - l > tol) {
                out.push(open);
            }
            if close <= t_end + tol {
                out.push(close);
            }
        }
        out
    }
}

/// `c(t)`: `Ψ/Δ` inside a window `(nτ - Δ, nτ]`, zero otherwise.
pub fn pulse_value(train: &PulseTrain, t: f64) -> f64 {
    if !train.enabled || t <= 0.0 {
        return 0.0;
    }
    let tol = EDGE_TOL * t.abs().max(1.0);
    // On (or within tolerance of) a closing edge nτ: inside.
    let n_near = (t / train.tau).round();
    if n_near >= 1.0 && (t - n_near * train.tau).abs() <= tol {
        return train.amplitude();
    }
    let n = (t / train.tau).ceil();
    if n >= 1.0 && t > n * train.tau - train.delta + tol {
        train.amplitude()
    } else {
        0.0
    }
}

/// `E(t) = ω + c(t)`.
pub fn effective_detuning(omega: f64, train: &PulseTrain, t: f64) -> f64 {
    omega + pulse_value(train, t)
}

/// A grid on `[0, t_end]` with every pulse edge as an exact point.
pub fn aligned_grid(train: &PulseTrain, t_end: f64, dt_nominal: f64) -> Result<TimeGrid> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidGrid(format!(
            "t_end must be > 0, got {t_end}"
        )));
    }
    if train.enabled && (train.delta < 2.0 * dt_nominal || train.tau < 2.0 * dt_nominal) {
        return Err(Error::InvalidGrid(format!(
            "dt = {dt_nominal} does not resolve the pulses (tau = {}, delta = {}); \
             use dt <= {}",
            train.tau,
            train.delta,
            0.5 * train.delta.min(train.tau)
        )));
    }
    TimeGrid::with_breakpoints(0.0, t_end, dt_nominal, &train.edges(t_end))
}

/// `E(t)` as seen by the integrators: constant on each grid interval, plus its
/// running integral.
#[derive(Debug, Clone)]
pub struct Detuning {
    grid: TimeGrid,
    per_interval: Vec<f64>,
    integral: Vec<f64>,
}

impl Detuning {
    /// Samples `ω + c` at every interval midpoint of `grid`. Exact when the
    /// grid comes from [`aligned_grid`] for the same train.
    pub fn new(omega: f64, train: &PulseTrain, grid: &TimeGrid) -> Self {
        let pts = grid.points();
        let per_interval: Vec<f64> = (0..grid.intervals())
            .map(|k| effective_detuning(omega, train, 0.5 * (pts[k] + pts[k + 1])))
            .collect();
        Self::from_intervals(grid, per_interval)
    }

    /// A detuning with one given value per grid interval.
    pub fn from_intervals(grid: &TimeGrid, per_interval: Vec<f64>) -> Self {
        assert_eq!(per_interval.len(), grid.intervals());
        let mut integral = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        integral.push(acc);
        for (k, e) in per_interval.iter().enumerate() {
            acc += e * grid.spacing(k);
            integral.push(acc);
        }
        Detuning {
            grid: grid.clone(),
            per_interval,
            integral,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `E` on interval `k`.
    pub fn on_interval(&self, k: usize) -> f64 {
        self.per_interval[k]
    }

    pub fn per_interval(&self) -> &[f64] {
        &self.per_interval
    }

    /// `∫_0^{t_k} E` at grid point `k`.
    pub fn integral(&self, k: usize) -> f64 {
        self.integral[k]
    }

    pub fn integrals(&self) -> &[f64] {
        &self.integral
    }

    /// `∫_0^t E` at point `j` of the refined grid.
    pub fn integral_fine(&self, j: usize) -> f64 {
        let k = j / 2;
        if j.is_multiple_of(2) {
            self.integral[k]
        } else {
            self.integral[k] + 0.5 * self.per_interval[k] * self.grid.spacing(k)
        }
    }

    /// `E` on interval `j` of the refined grid.
    pub fn on_fine_interval(&self, j: usize) -> f64 {
        self.per_interval[j / 2]
    }
}
