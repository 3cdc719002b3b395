//! Stochastic trajectories of the linear QSD equation
//! `i∂ψ = H_eff(t, z*) ψ` and ensemble fidelity.
//!
//! Trajectories are stepped with an integrating-factor RK4 on the integration
//! grid. Noise and Riccati coefficients are read at the refined grid points,
//! so stage times never need interpolation. The norm is not conserved pathwise; only its
//! ensemble mean is one.
//!
//! Fidelity `M|<ψ_0|ψ_t>|²` can be taken against `ψ_0` itself ([`Frame::Lab`])
//! or against its free evolution `e^{-i∫H_sys} ψ_0` ([`Frame::Rotating`]).
//! The closed-form evaluators in [`crate::analytic`] use the rotating frame.

use log::{debug, warn};
use rayon::prelude::*;

use crate::models::{Dynamics, Family};
use crate::noise::{sample_path_scaled, trajectory_seed, NoisePath};
use crate::numerics::{cumulative_simpson_midpoints, ComplexSeries, TimeGrid};
use crate::{Error, Result, C64};

pub const DEFAULT_NORM_GUARD: f64 = 1e6;

/// Trajectories per deterministic accumulation block.
const BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    /// Overlap with the fixed initial state.
    Lab,
    /// Overlap with the initial state evolved by `H_sys` alone.
    #[default]
    Rotating,
}

/// One stochastic trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// State at each grid point; shorter than the grid if the trajectory
    /// diverged.
    pub psi: Vec<Vec<C64>>,
    pub seed: u64,
    /// First grid time at which the norm exceeded the guard.
    pub diverged_at: Option<f64>,
}

pub(crate) fn check_noise(dynamics: &Dynamics, noise: &NoisePath) -> Result<()> {
    let fine = dynamics.fine_grid();
    if noise.grid.len() != fine.len() || noise.grid.points() != fine.points() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Steps one trajectory and calls `visit(k, ψ)` at every grid point. Returns
/// the divergence time if the norm left the guard.
///
/// Lawson RK4: `H_sys` is diagonal and constant on each interval, so its
/// phases are applied exactly and RK4 only sees the bath part of `H_eff`.
fn integrate<V>(
    dynamics: &Dynamics,
    z: &[C64],
    psi0: &[C64],
    norm_guard: f64,
    mut visit: V,
) -> Option<f64>
where
    V: FnMut(usize, &[C64]),
{
    let model = &dynamics.model;
    let coeffs = &dynamics.coeffs;
    let weights = model.energy_weights();
    let pts = dynamics.grid().points();
    let n = psi0.len();
    // -i H_eff(E = 0) y
    let bath = |j: usize, y: &[C64], out: &mut [C64]| {
        model.apply_heff(coeffs.at(j), z[j], 0.0, y, out);
        for v in out.iter_mut() {
            *v = C64::new(v.im, -v.re);
        }
    };
    let zero = C64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
        vec![zero; n],
    );
    let mut half = vec![zero; n];
    let mut full = vec![zero; n];
    let mut cached = (f64::NAN, f64::NAN);
    let mut y = psi0.to_vec();
    let guard_sq = norm_guard * norm_guard;
    visit(0, &y);
    for k in 0..pts.len() - 1 {
        let h = pts[k + 1] - pts[k];
        let e = dynamics.detuning.on_interval(k);
        if cached != (e, h) {
            for ((hp, fp), w) in half.iter_mut().zip(&mut full).zip(&weights) {
                *hp = C64::from_polar(1.0, -0.5 * e * w * h);
                *fp = *hp * *hp;
            }
            cached = (e, h);
        }
        let j = 2 * k;
        bath(j, &y, &mut k1);
        for i in 0..n {
            tmp[i] = half[i] * (y[i] + 0.5 * h * k1[i]);
        }
        bath(j + 1, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = half[i] * y[i] + 0.5 * h * k2[i];
        }
        bath(j + 1, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = full[i] * y[i] + h * half[i] * k3[i];
        }
        bath(j + 2, &tmp, &mut k4);
        let mut n2 = 0.0;
        for i in 0..n {
            y[i] = full[i] * (y[i] + h / 6.0 * k1[i])
                + h / 6.0 * (2.0 * half[i] * (k2[i] + k3[i]) + k4[i]);
            n2 += y[i].norm_sqr();
        }
        if !(n2 <= guard_sq) {
            return Some(pts[k + 1]);
        }
        visit(k + 1, &y);
    }
    None
}

fn check_state(dynamics: &Dynamics, psi0: &[C64]) -> Result<()> {
    if psi0.len() != dynamics.model.dimension() {
        return Err(Error::InvalidParameter(format!(
            "initial state has {} amplitudes, model needs {}",
            psi0.len(),
            dynamics.model.dimension()
        )));
    }
    let n2: f64 = psi0.iter().map(|v| v.norm_sqr()).sum();
    if (n2 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "initial state must be normalized, |psi0|^2 = {n2}"
        )));
    }
    Ok(())
}

/// Propagates `psi0` along one noise path sampled on the refined grid.
pub fn propagate_trajectory(
    dynamics: &Dynamics,
    noise: &NoisePath,
    psi0: &[C64],
    norm_guard: f64,
) -> Result<Trajectory> {
    check_noise(dynamics, noise)?;
    check_state(dynamics, psi0)?;
    let mut psi = Vec::with_capacity(dynamics.grid().len());
    let diverged_at = integrate(dynamics, &noise.samples, psi0, norm_guard, |_, y| {
        psi.push(y.to_vec())
    });
    if let Some(t) = diverged_at {
        debug!("trajectory with seed {} diverged at t = {t}", noise.seed);
    }
    Ok(Trajectory {
        grid: dynamics.grid().clone(),
        psi,
        seed: noise.seed,
        diverged_at,
    })
}

/// `<ref|ψ>` at grid point `k`, where `ref` is `psi0` or its free evolution.
pub fn overlap(dynamics: &Dynamics, frame: Frame, psi0: &[C64], k: usize, psi: &[C64]) -> C64 {
    match frame {
        Frame::Lab => psi0.iter().zip(psi).map(|(a, b)| a.conj() * b).sum(),
        Frame::Rotating => {
            let phase = dynamics.detuning.integral(k);
            dynamics
                .model
                .energy_weights()
                .iter()
                .zip(psi0.iter().zip(psi))
                .map(|(w, (a, b))| a.conj() * b * C64::new(0.0, w * phase).exp())
                .sum()
        }
    }
}

/// Closed-form two-level amplitude `<ψ_0|ψ_t>` for `ψ_0 = (|0> + |1>)/√2`
/// on one noise path. The noise integral uses Simpson's rule on the refined
/// grid.
pub fn two_level_amplitude(
    dynamics: &Dynamics,
    noise: &NoisePath,
    frame: Frame,
) -> Result<ComplexSeries> {
    if dynamics.model.family != Family::TwoLevel {
        return Err(Error::InvalidParameter(
            "two_level_amplitude needs the two-level model".into(),
        ));
    }
    check_noise(dynamics, noise)?;
    let fine = dynamics.fine_grid();
    let det = &dynamics.detuning;
    let w = dynamics.model.energy_weights();
    let integrand: Vec<C64> = (0..fine.len())
        .map(|j| {
            let arg = -dynamics.coeffs.integral_at(j)[0]
                - C64::new(0.0, (w[1] - w[0]) * det.integral_fine(j));
            noise.samples[j] * arg.exp()
        })
        .collect();
    let noise_term = cumulative_simpson_midpoints(fine, &integrand);
    let values = noise_term
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let decay = (-dynamics.coeffs.integral_at(2 * k)[0]).exp();
            let phase = det.integral(k);
            match frame {
                Frame::Rotating => 0.5 * (decay + 1.0 + s),
                Frame::Lab => {
                    let e1 = C64::new(0.0, -w[1] * phase).exp();
                    let e0 = C64::new(0.0, -w[0] * phase).exp();
                    0.5 * (e1 * decay + e0 * (1.0 + s))
                }
            }
        })
        .collect();
    ComplexSeries::new(dynamics.grid().clone(), values)
}

/// A sampled fidelity curve. `n_traj == 0` marks an exact evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCurve {
    pub grid: TimeGrid,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_traj: usize,
}

impl FidelityCurve {
    pub fn exact(grid: TimeGrid, mean: Vec<f64>) -> Self {
        let stderr = vec![0.0; mean.len()];
        FidelityCurve {
            grid,
            mean,
            stderr,
            n_traj: 0,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.n_traj == 0
    }

    pub fn times(&self) -> &[f64] {
        self.grid.points()
    }

    /// `(mean, stderr)` at grid time `t`.
    pub fn at(&self, t: f64) -> Option<(f64, f64)> {
        self.grid
            .index_of(t)
            .map(|k| (self.mean[k], self.stderr[k]))
    }

    /// Mean at the grid point closest to `t`.
    pub fn nearest(&self, t: f64) -> f64 {
        let pts = self.grid.points();
        let k = self.grid.index_at_or_after(t);
        if k > 0 && (t - pts[k - 1]).abs() < (pts[k] - t).abs() {
            self.mean[k - 1]
        } else {
            self.mean[k]
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub master_seed: u64,
    /// Defaults to the family's equal superposition.
    pub initial_state: Option<Vec<C64>>,
    pub frame: Frame,
    pub norm_guard: f64,
    /// Record every `sample_stride`-th grid point (the last point always).
    pub sample_stride: usize,
    /// Multiplies every noise innovation. Fault injection only.
    pub innovation_scale: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_traj: 1000,
            master_seed: 1,
            initial_state: None,
            frame: Frame::Rotating,
            norm_guard: DEFAULT_NORM_GUARD,
            sample_stride: 1,
            innovation_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub fidelity: FidelityCurve,
    /// `M[‖ψ_t‖²]`, one for exact linear QSD.
    pub norm_sq: FidelityCurve,
    pub divergent: usize,
    pub total: usize,
}

impl EnsembleResult {
    pub fn divergent_fraction(&self) -> f64 {
        self.divergent as f64 / self.total as f64
    }

    /// Fails when more than 1% of the trajectories diverged.
    pub fn check_quality(&self) -> Result<()> {
        if self.divergent * 100 > self.total {
            Err(Error::TooManyDivergent {
                divergent: self.divergent,
                total: self.total,
            })
        } else {
            Ok(())
        }
    }
}

/// Indices of the grid points an ensemble records.
pub fn sample_indices(grid: &TimeGrid, stride: usize) -> Vec<usize> {
    let last = grid.len() - 1;
    let mut idx: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *idx.last().unwrap() != last {
        idx.push(last);
    }
    idx
}

/// Running sums of deviations from the first sample, which keeps the
/// variance exact for identical samples.
struct Moments {
    shift: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            shift: Vec::new(),
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
            n: 0,
        }
    }

    fn add(&mut self, xs: &[f64]) {
        if self.n == 0 {
            self.shift = xs.to_vec();
        }
        self.n += 1;
        for (((s, q), x), c) in self
            .sum
            .iter_mut()
            .zip(&mut self.sum_sq)
            .zip(xs)
            .zip(&self.shift)
        {
            let d = x - c;
            *s += d;
            *q += d * d;
        }
    }

    fn curve(&self, grid: TimeGrid) -> FidelityCurve {
        let n = self.n;
        let nf = n as f64;
        let mut mean = Vec::with_capacity(self.sum.len());
        let mut stderr = Vec::with_capacity(self.sum.len());
        for (i, (s, q)) in self.sum.iter().zip(&self.sum_sq).enumerate() {
            let shift = self.shift.get(i).copied().unwrap_or(0.0);
            mean.push(if n > 0 { shift + s / nf } else { f64::NAN });
            stderr.push(if n > 1 {
                ((q - s * s / nf) / (nf - 1.0)).max(0.0).sqrt() / nf.sqrt()
            } else {
                0.0
            });
        }
        FidelityCurve {
            grid,
            mean,
            stderr,
            n_traj: n,
        }
    }
}

/// Monte-Carlo fidelity `M|<ref|ψ_t>|²` over `cfg.n_traj` trajectories.
///
/// Trajectory `i` uses the seed `trajectory_seed(master_seed, i)`. Results are
/// accumulated in trajectory order, so they do not depend on the number of
/// worker threads. Divergent trajectories are excluded and counted; check
/// [`EnsembleResult::check_quality`].
pub fn ensemble_fidelity(dynamics: &Dynamics, cfg: &EnsembleConfig) -> Result<EnsembleResult> {
    if cfg.n_traj < 2 {
        return Err(Error::InvalidParameter(
            "need at least 2 trajectories".into(),
        ));
    }
    let psi0 = cfg
        .initial_state
        .clone()
        .unwrap_or_else(|| dynamics.model.initial_state());
    check_state(dynamics, &psi0)?;
    let grid = dynamics.grid();
    let idx = sample_indices(grid, cfg.sample_stride);
    let ns = idx.len();
    let mut slot = vec![usize::MAX; grid.len()];
    for (s, &k) in idx.iter().enumerate() {
        slot[k] = s;
    }

    let run_one = |i: usize| -> Option<(Vec<f64>, Vec<f64>)> {
        let seed = trajectory_seed(cfg.master_seed, i as u64);
        let noise = sample_path_scaled(
            &dynamics.corr,
            dynamics.fine_grid(),
            seed,
            cfg.innovation_scale,
        );
        let mut fid = vec![0.0; ns];
        let mut nrm = vec![0.0; ns];
        let diverged = integrate(dynamics, &noise.samples, &psi0, cfg.norm_guard, |k, y| {
            let s = slot[k];
            if s != usize::MAX {
                fid[s] = overlap(dynamics, cfg.frame, &psi0, k, y).norm_sqr();
                nrm[s] = y.iter().map(|v| v.norm_sqr()).sum();
            }
        });
        diverged.is_none().then_some((fid, nrm))
    };

    let mut fid_m = Moments::new(ns);
    let mut norm_m = Moments::new(ns);
    let mut kept = 0;
    let mut start = 0;
    while start < cfg.n_traj {
        let end = (start + BLOCK).min(cfg.n_traj);
        let block: Vec<_> = (start..end).into_par_iter().map(run_one).collect();
        for (f, n) in block.into_iter().flatten() {
            fid_m.add(&f);
            norm_m.add(&n);
            kept += 1;
        }
        start = end;
    }
    let divergent = cfg.n_traj - kept;
    if divergent > 0 {
        warn!(
            "{divergent} of {} trajectories diverged and were excluded",
            cfg.n_traj
        );
    }
    if kept < 2 {
        return Err(Error::TooManyDivergent {
            divergent,
            total: cfg.n_traj,
        });
    }
    let sample_grid = grid.subset(&idx)?;
    Ok(EnsembleResult {
        fidelity: fid_m.curve(sample_grid.clone()),
        norm_sq: norm_m.curve(sample_grid),
        divergent,
        total: cfg.n_traj,
    })
}
