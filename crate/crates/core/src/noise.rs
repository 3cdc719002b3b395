//! Complex Ornstein-Uhlenbeck colored noise `z*_t`.
//!
//! Paths are stationary circular complex Gaussian processes with
//! `M[z_t z*_s] = (Γγ/2) e^{-γ|t-s|}` and `M[z_t z_s] = 0`. They are generated
//! by the exact OU recursion, so any grid spacing is bias free:
//!
//! ```text
//! z_0     ~ CN(0, Γγ/2)
//! z_{k+1} = e^{-γδ} z_k + ξ_k,    ξ_k ~ CN(0, (Γγ/2)(1 - e^{-2γδ}))
//! ```
//!
//! # Random numbers
//!
//! Each path owns a `ChaCha8Rng` seeded with [`rand_chacha::rand_core::SeedableRng::seed_from_u64`].
//! Standard normals come from the Box-Muller transform of two 53-bit
//! uniforms; one transform yields the real and imaginary parts of one complex
//! sample. Ensemble members use [`trajectory_seed`], a SplitMix64 mix of the
//! master seed and the trajectory index, so seeds are portable and
//! independent of worker count.

use std::f64::consts::TAU;
use std::io::{self, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::TimeGrid;
use crate::{Error, Result, C64};

/// Bath correlation `α(t,s) = (Γγ/2) e^{-γ|t-s|}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSpec {
    /// Γ, the dissipation rate.
    pub dissipation: f64,
    /// γ, the inverse memory time of the bath.
    pub memory_rate: f64,
}

impl CorrelationSpec {
    pub fn new(dissipation: f64, memory_rate: f64) -> Result<Self> {
        if !(dissipation >= 0.0 && dissipation.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dissipation rate must be >= 0, got {dissipation}"
            )));
        }
        if !(memory_rate > 0.0 && memory_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "memory rate must be > 0, got {memory_rate}"
            )));
        }
        Ok(CorrelationSpec {
            dissipation,
            memory_rate,
        })
    }

    /// `α(t,t) = Γγ/2`, the stationary variance of `z_t`.
    pub fn variance(&self) -> f64 {
        0.5 * self.dissipation * self.memory_rate
    }

    pub fn alpha(&self, t: f64, s: f64) -> f64 {
        self.variance() * (-self.memory_rate * (t - s).abs()).exp()
    }

    /// `(e^{-γδ}, (Γγ/2)(1 - e^{-2γδ}))`: decay factor and innovation
    /// variance of one exact recursion step of length `delta`.
    pub fn recursion_coefficients(&self, delta: f64) -> (f64, f64) {
        let decay = (-self.memory_rate * delta).exp();
        let innovation = self.variance() * -(-2.0 * self.memory_rate * delta).exp_m1();
        (decay, innovation)
    }
}

/// One realization of `z*_t` on a grid.
#[derive(Debug, Clone)]
pub struct NoisePath {
    pub grid: TimeGrid,
    pub samples: Vec<C64>,
    pub seed: u64,
}

impl NoisePath {
    pub fn zeros(grid: &TimeGrid) -> Self {
        NoisePath {
            grid: grid.clone(),
            samples: vec![C64::new(0.0, 0.0); grid.len()],
            seed: 0,
        }
    }

    /// Writes `t, Re(z*), Im(z*)` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "t,re_z,im_z")?;
        for (t, z) in self.grid.points().iter().zip(&self.samples) {
            writeln!(out, "{t:.9e},{:.9e},{:.9e}", z.re, z.im)?;
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of trajectory `index` in an ensemble driven by `master`.
pub fn trajectory_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

/// Circular complex standard normals (`E|w|^2 = 1`) via Box-Muller.
#[derive(Debug, Clone)]
pub struct ComplexGaussian {
    rng: ChaCha8Rng,
}

impl ComplexGaussian {
    pub fn new(seed: u64) -> Self {
        ComplexGaussian {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn unit_open(&mut self) -> f64 {
        // (0, 1]: never zero, so the logarithm is finite.
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample(&mut self) -> C64 {
        let u1 = self.unit_open();
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        // Each part has variance 1/2.
        let r = (-u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        C64::new(r * c, r * s)
    }
}

/// Samples one noise path on `grid`.
pub fn sample_path(corr: &CorrelationSpec, grid: &TimeGrid, seed: u64) -> NoisePath {
    sample_path_scaled(corr, grid, seed, 1.0)
}

/// [`sample_path`] with every innovation multiplied by `innovation_scale`.
///
/// Only meant for fault injection: any scale other than 1 breaks the target
/// statistics.
pub fn sample_path_scaled(
    corr: &CorrelationSpec,
    grid: &TimeGrid,
    seed: u64,
    innovation_scale: f64,
) -> NoisePath {
    if corr.dissipation == 0.0 {
        return NoisePath {
            seed,
            ..NoisePath::zeros(grid)
        };
    }
    let mut gauss = ComplexGaussian::new(seed);
    let mut samples = Vec::with_capacity(grid.len());
    let mut z = corr.variance().sqrt() * gauss.sample();
    samples.push(z);
    let pts = grid.points();
    // Uniform stretches reuse the coefficients of the previous interval.
    let mut last_delta = f64::NAN;
    let (mut decay, mut sd) = (0.0, 0.0);
    for k in 0..grid.intervals() {
        let delta = pts[k + 1] - pts[k];
        if delta != last_delta {
            let (d, v) = corr.recursion_coefficients(delta);
            decay = d;
            sd = v.sqrt() * innovation_scale;
            last_delta = delta;
        }
        z = decay * z + sd * gauss.sample();
        samples.push(z);
    }
    NoisePath {
        grid: grid.clone(),
        samples,
        seed,
    }
}

/// Extends `path` to the finer grid `target` by sampling the OU bridge
/// between neighbouring samples. `target` must contain every point of
/// `path.grid`; those samples are kept, so the result is a finer view of the
/// same realization.
pub fn bridge_path(
    corr: &CorrelationSpec,
    path: &NoisePath,
    target: &TimeGrid,
    seed: u64,
) -> Result<NoisePath> {
    let tp = target.points();
    let anchors: Vec<usize> = path
        .grid
        .points()
        .iter()
        .map(|&t| target.index_of(t))
        .collect::<Option<_>>()
        .ok_or(Error::GridMismatch)?;
    if anchors[0] != 0 || *anchors.last().unwrap() != tp.len() - 1 {
        return Err(Error::GridMismatch);
    }
    let mut samples = vec![C64::new(0.0, 0.0); tp.len()];
    if corr.dissipation == 0.0 {
        return Ok(NoisePath {
            grid: target.clone(),
            samples,
            seed,
        });
    }
    let v = corr.variance();
    let gamma = corr.memory_rate;
    let mut gauss = ComplexGaussian::new(seed);
    for (w, z) in anchors.windows(2).zip(path.samples.windows(2)) {
        let (mut a, b) = (z[0], z[1]);
        samples[w[0]] = a;
        let t_end = tp[w[1]];
        for j in w[0] + 1..w[1] {
            let r1 = (-gamma * (tp[j] - tp[j - 1])).exp();
            let r2 = (-gamma * (t_end - tp[j])).exp();
            let v1 = v * (1.0 - r1 * r1);
            let v2 = v * (1.0 - r2 * r2);
            let prec = 1.0 / v1 + r2 * r2 / v2;
            let mean = (r1 * a / v1 + r2 * b / v2) / prec;
            a = mean + (1.0 / prec).sqrt() * gauss.sample();
            samples[j] = a;
        }
    }
    samples[tp.len() - 1] = *path.samples.last().unwrap();
    Ok(NoisePath {
        grid: target.clone(),
        samples,
        seed,
    })
}

/// A complex sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: C64,
    pub stderr: f64,
}

impl Estimate {
    /// Mean and standard error of complex samples.
    pub fn from_samples(xs: impl Iterator<Item = C64> + Clone) -> Estimate {
        let n = xs.clone().count();
        let mean = xs.clone().sum::<C64>() / n as f64;
        let ss: f64 = xs.map(|x| (x - mean).norm_sqr()).sum();
        let stderr = if n > 1 {
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr }
    }

    /// `|mean - target| <= k * stderr`, with a rounding allowance.
    pub fn within(&self, target: C64, k: f64) -> bool {
        (self.mean - target).norm() <= k * self.stderr + 1e-12
    }
}

fn check_ensemble(paths: &[NoisePath], i: usize, j: usize) -> Result<()> {
    const MIN_PATHS: usize = 100;
    if paths.len() < MIN_PATHS {
        return Err(Error::TooFewPaths {
            needed: MIN_PATHS,
            got: paths.len(),
        });
    }
    let grid = &paths[0].grid;
    if paths.iter().any(|p| p.grid != *grid) {
        return Err(Error::GridMismatch);
    }
    if i >= grid.len() || j >= grid.len() {
        return Err(Error::InvalidParameter("grid index out of range".into()));
    }
    Ok(())
}

/// Empirical `M[z_{t_i} z*_{t_j}]` over an ensemble of paths.
pub fn estimate_correlation(paths: &[NoisePath], i: usize, j: usize) -> Result<Estimate> {
    check_ensemble(paths, i, j)?;
    // Samples hold z*, so z_{t_i} z*_{t_j} = conj(s_i) s_j.
    Ok(Estimate::from_samples(
        paths.iter().map(|p| p.samples[i].conj() * p.samples[j]),
    ))
}

/// Empirical non-conjugate `M[z_{t_i} z_{t_j}]`, zero for circular noise.
pub fn estimate_pseudo_correlation(paths: &[NoisePath], i: usize, j: usize) -> Result<Estimate> {
    check_ensemble(paths, i, j)?;
    Ok(Estimate::from_samples(
        paths
            .iter()
            .map(|p| p.samples[i].conj() * p.samples[j].conj()),
    ))
}
