//! The three model families, their Riccati coefficient equations and the
//! effective Hamiltonian `H_eff = H_sys + iLz* - iL†Ō`.
//!
//! Basis orderings are fixed per family:
//!
//! | family      | basis                     | `H_sys` diagonal      |
//! |-------------|---------------------------|-----------------------|
//! | two-level   | `|0>, |1>`                | `E_0, E_1`            |
//! | qutrit      | `|1>, |0>, |2>`           | `0, -E, E`            |
//! | multi-level | `|0>, |1>, ..., |N>`      | `-E, E, ..., E`       |
//!
//! The two-level model fixes `E_1 - E_0 = E` and splits it symmetrically by
//! default. For the qutrit the coupling scale `κ` is folded into `F_1, F_2`,
//! so `L†Ō` contributes `-iF_1` and `-iF_2` on the diagonal.

use crate::control::{Detuning, PulseTrain};
use crate::noise::CorrelationSpec;
use crate::numerics::{rk4_integrate, CMatrix, ComplexSeries, TimeGrid};
use crate::{Error, Result, C64};

const I: C64 = C64::new(0.0, 1.0);
const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    TwoLevel,
    Qutrit { kappa: f64 },
    MultiLevel { n: usize },
}

/// How the two-level gap `E` is shared between `E_0` and `E_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergySplit {
    /// `E_1 = -E_0 = E/2`.
    #[default]
    Symmetric,
    /// `E_0 = 0`, `E_1 = E`.
    GroundZero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    /// Bare frequency `ω`.
    pub omega: f64,
    pub split: EnergySplit,
}

impl ModelSpec {
    pub fn two_level(omega: f64) -> Self {
        ModelSpec {
            family: Family::TwoLevel,
            omega,
            split: EnergySplit::Symmetric,
        }
    }

    pub fn qutrit(omega: f64, kappa: f64) -> Result<Self> {
        let m = ModelSpec {
            family: Family::Qutrit { kappa },
            omega,
            split: EnergySplit::Symmetric,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn multilevel(omega: f64, n: usize) -> Result<Self> {
        let m = ModelSpec {
            family: Family::MultiLevel { n },
            omega,
            split: EnergySplit::Symmetric,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_split(mut self, split: EnergySplit) -> Self {
        self.split = split;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() {
            return Err(Error::InvalidParameter("omega must be finite".into()));
        }
        match self.family {
            Family::Qutrit { kappa } if !(kappa > 0.0 && kappa.is_finite()) => Err(
                Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")),
            ),
            Family::MultiLevel { n: 0 } => Err(Error::InvalidParameter("N must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            Family::TwoLevel => "two_level",
            Family::Qutrit { .. } => "qutrit",
            Family::MultiLevel { .. } => "multilevel",
        }
    }

    pub fn dimension(&self) -> usize {
        match self.family {
            Family::TwoLevel => 2,
            Family::Qutrit { .. } => 3,
            Family::MultiLevel { n } => n + 1,
        }
    }

    /// Number of Riccati coefficients (`F`, or `F_1, F_2`).
    pub fn n_coeffs(&self) -> usize {
        match self.family {
            Family::Qutrit { .. } => 2,
            _ => 1,
        }
    }

    /// Equal superposition of all basis states.
    pub fn initial_state(&self) -> Vec<C64> {
        let d = self.dimension();
        vec![C64::new(1.0 / (d as f64).sqrt(), 0.0); d]
    }

    /// `H_sys = E · diag(weights)`.
    pub fn energy_weights(&self) -> Vec<f64> {
        match (self.family, self.split) {
            (Family::TwoLevel, EnergySplit::Symmetric) => vec![-0.5, 0.5],
            (Family::TwoLevel, EnergySplit::GroundZero) => vec![0.0, 1.0],
            (Family::Qutrit { .. }, _) => vec![0.0, -1.0, 1.0],
            (Family::MultiLevel { n }, _) => {
                let mut w = vec![1.0; n + 1];
                w[0] = -1.0;
                w
            }
        }
    }

    /// `[D(t), D(s)] = 0` for all times in the natural basis.
    pub fn commuting_d(&self) -> bool {
        matches!(self.family, Family::MultiLevel { .. })
    }

    /// Time derivative of the coefficients at detuning `e`.
    pub fn coeff_rhs(&self, corr: &CorrelationSpec, state: &[C64], e: f64, out: &mut [C64]) {
        let src = corr.variance();
        let g = corr.memory_rate;
        match self.family {
            Family::TwoLevel => {
                let f = state[0];
                out[0] = src + C64::new(-g, e) * f + f * f;
            }
            Family::Qutrit { kappa } => {
                let (f1, f2) = (state[0], state[1]);
                let s = src * kappa * kappa;
                let lin = C64::new(-g, e);
                out[0] = s + lin * f1 + f1 * f1 - f1 * f2;
                out[1] = s + lin * f2 + f2 * f2;
            }
            Family::MultiLevel { n } => {
                let f = state[0];
                out[0] = src + C64::new(-g, 2.0 * e) * f + n as f64 * f * f;
            }
        }
    }

    /// Dense `H_eff` for coefficients `coeffs`, noise value `z_star` and
    /// detuning `e`.
    pub fn effective_hamiltonian(&self, coeffs: &[C64], z_star: C64, e: f64) -> CMatrix {
        let d = self.dimension();
        let w = self.energy_weights();
        let mut h = CMatrix::zeros(d, d);
        for (k, wk) in w.iter().enumerate() {
            h[(k, k)] = C64::new(wk * e, 0.0);
        }
        match self.family {
            Family::TwoLevel => {
                h[(0, 1)] = I * z_star;
                h[(1, 1)] -= I * coeffs[0];
            }
            Family::Qutrit { kappa } => {
                h[(0, 0)] -= I * coeffs[0];
                h[(1, 0)] = I * kappa * z_star;
                h[(0, 2)] = I * kappa * z_star;
                h[(2, 2)] -= I * coeffs[1];
            }
            Family::MultiLevel { n } => {
                for j in 1..=n {
                    h[(0, j)] = I * z_star;
                    for k in 1..=n {
                        h[(j, k)] -= I * coeffs[0];
                    }
                }
            }
        }
        h
    }

    /// `out = H_eff ψ` without forming the matrix. O(dimension).
    pub fn apply_heff(&self, coeffs: &[C64], z_star: C64, e: f64, psi: &[C64], out: &mut [C64]) {
        match self.family {
            Family::TwoLevel => {
                let (e0, e1) = match self.split {
                    EnergySplit::Symmetric => (-0.5 * e, 0.5 * e),
                    EnergySplit::GroundZero => (0.0, e),
                };
                out[0] = e0 * psi[0] + I * z_star * psi[1];
                out[1] = (e1 - I * coeffs[0]) * psi[1];
            }
            Family::Qutrit { kappa } => {
                let kz = I * kappa * z_star;
                out[0] = -I * coeffs[0] * psi[0] + kz * psi[2];
                out[1] = kz * psi[0] - e * psi[1];
                out[2] = (e - I * coeffs[1]) * psi[2];
            }
            Family::MultiLevel { .. } => {
                let tail: C64 = psi[1..].iter().sum();
                let coupling = -I * coeffs[0] * tail;
                out[0] = -e * psi[0] + I * z_star * tail;
                for (o, p) in out[1..].iter_mut().zip(&psi[1..]) {
                    *o = e * p + coupling;
                }
            }
        }
    }
}

/// Riccati coefficients and their running integrals on the refined grid.
#[derive(Debug, Clone)]
pub struct CoeffSeries {
    fine: TimeGrid,
    n: usize,
    values: Vec<C64>,
    integrals: Vec<C64>,
}

impl CoeffSeries {
    /// Zero coefficients, as in the weak-coupling limit.
    pub fn zeros(fine: &TimeGrid, n: usize) -> Self {
        CoeffSeries {
            fine: fine.clone(),
            n,
            values: vec![ZERO; n * fine.len()],
            integrals: vec![ZERO; n * fine.len()],
        }
    }

    pub fn fine_grid(&self) -> &TimeGrid {
        &self.fine
    }

    pub fn n_coeffs(&self) -> usize {
        self.n
    }

    /// Coefficients at refined point `j`.
    pub fn at(&self, j: usize) -> &[C64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    /// `∫_0^t F_c` for every coefficient at refined point `j`.
    pub fn integral_at(&self, j: usize) -> &[C64] {
        &self.integrals[j * self.n..(j + 1) * self.n]
    }

    /// Component `c` on the refined grid.
    pub fn component(&self, c: usize) -> ComplexSeries {
        let values = (0..self.fine.len()).map(|j| self.at(j)[c]).collect();
        ComplexSeries {
            grid: self.fine.clone(),
            values,
        }
    }
}

/// Integrates the coefficient equations from zero on the refinement of the
/// detuning's grid, together with `∫F`.
pub fn solve_coefficients(
    model: &ModelSpec,
    corr: &CorrelationSpec,
    detuning: &Detuning,
) -> Result<CoeffSeries> {
    let n = model.n_coeffs();
    let fine = detuning.grid().refined();
    let rhs = |p: crate::numerics::StagePoint, y: &[C64], dy: &mut [C64]| {
        let e = detuning.on_fine_interval(p.interval);
        model.coeff_rhs(corr, &y[..n], e, &mut dy[..n]);
        dy[n..].copy_from_slice(&y[..n]);
    };
    let sol = rk4_integrate(rhs, &vec![ZERO; 2 * n], &fine)?;
    let mut values = Vec::with_capacity(n * fine.len());
    let mut integrals = Vec::with_capacity(n * fine.len());
    for y in &sol.values {
        values.extend_from_slice(&y[..n]);
        integrals.extend_from_slice(&y[n..]);
    }
    Ok(CoeffSeries {
        fine,
        n,
        values,
        integrals,
    })
}

/// Everything about one experiment that does not depend on the noise path.
/// Shared read-only by all trajectories.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub model: ModelSpec,
    pub corr: CorrelationSpec,
    pub detuning: Detuning,
    pub coeffs: CoeffSeries,
}

impl Dynamics {
    pub fn new(
        model: ModelSpec,
        corr: CorrelationSpec,
        train: &PulseTrain,
        grid: &TimeGrid,
    ) -> Result<Self> {
        Self::from_detuning(model, corr, Detuning::new(model.omega, train, grid))
    }

    pub fn from_detuning(
        model: ModelSpec,
        corr: CorrelationSpec,
        detuning: Detuning,
    ) -> Result<Self> {
        model.validate()?;
        let coeffs = solve_coefficients(&model, &corr, &detuning)?;
        Ok(Dynamics {
            model,
            corr,
            detuning,
            coeffs,
        })
    }

    /// The same experiment with `F ≡ 0`.
    pub fn without_coefficients(&self) -> Self {
        Dynamics {
            coeffs: CoeffSeries::zeros(self.coeffs.fine_grid(), self.model.n_coeffs()),
            ..self.clone()
        }
    }

    /// The integration grid.
    pub fn grid(&self) -> &TimeGrid {
        self.detuning.grid()
    }

    /// The integration grid with interval midpoints, where noise and
    /// coefficients are sampled.
    pub fn fine_grid(&self) -> &TimeGrid {
        self.coeffs.fine_grid()
    }

    /// Dense `H_eff` at refined point `j` with the detuning of coarse
    /// interval `interval`.
    pub fn heff(&self, interval: usize, j: usize, z_star: C64) -> CMatrix {
        self.model.effective_hamiltonian(
            self.coeffs.at(j),
            z_star,
            self.detuning.on_interval(interval),
        )
    }

    /// `e^{-i∫_0^t H_sys}` applied to `psi` at coarse point `k`, i.e. free
    /// evolution of `psi` in the lab frame.
    pub fn free_evolution(&self, k: usize, psi: &[C64]) -> Vec<C64> {
        let phase = self.detuning.integral(k);
        self.model
            .energy_weights()
            .iter()
            .zip(psi)
            .map(|(w, p)| p * C64::new(0.0, -w * phase).exp())
            .collect()
    }
}
