//! Feshbach PQ partitioning of `H_eff` and the closed equation for the P
//! amplitude.
//!
//! With a unit vector `p` and a unitary `U` whose first column is `p`, the
//! rotated generator splits into blocks
//!
//! ```text
//! U† H_eff U = [ h  R ]      i∂P = hP + RQ
//!              [ W  D ]      i∂Q = WP + DQ
//! ```
//!
//! Eliminating `Q` with the propagator `G(t,s)` (`i∂G = DG`, `G(s,s) = 1`)
//! gives the one-dimensional equation
//!
//! ```text
//! i∂P = hP - i∫_0^t G~(t,s) P(s) ds + R(t) G(t,0) Q(0),   G~(t,s) = R(t) G(t,s) W(s).
//! ```
//!
//! `H_eff(t) = E(t) S + B(t)` is handled in two pieces: the system part `S` is
//! constant and multiplied by the piecewise-constant detuning, and the bath
//! part `B` (coefficients and noise) is sampled on the refined grid. Samples
//! are addressed by `(interval, offset)` with offset 0, 1, 2 for the start,
//! midpoint and end of an integration interval, so the detuning is never
//! evaluated across a pulse edge.

use rayon::prelude::*;

use crate::control::Detuning;
use crate::models::{Dynamics, Family};
use crate::noise::NoisePath;
use crate::numerics::{CMatrix, ComplexSeries, MatrixSeries, TimeGrid};
use crate::qsd::check_noise;
use crate::{Error, Result, C64};

const I: C64 = C64::new(0.0, 1.0);
const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Largest `|G~|` that still counts as a vanishing memory kernel.
pub const KERNEL_TOL: f64 = 1e-10;

/// `H_eff(t) = E(t) · system + bath(t)`.
#[derive(Debug, Clone)]
pub struct HeffSeries {
    detuning: Detuning,
    pub system: CMatrix,
    /// On the refinement of the detuning grid.
    pub bath: MatrixSeries,
}

impl HeffSeries {
    pub fn new(detuning: Detuning, system: CMatrix, bath: MatrixSeries) -> Result<Self> {
        let fine = detuning.grid().refined();
        if bath.grid.points() != fine.points() {
            return Err(Error::GridMismatch);
        }
        if system.rows() != system.cols() || system.rows() != bath.dim() {
            return Err(Error::InvalidParameter(
                "system and bath dimensions differ".into(),
            ));
        }
        Ok(HeffSeries {
            detuning,
            system,
            bath,
        })
    }

    /// Samples the effective Hamiltonian of `dynamics` along one noise path.
    pub fn from_dynamics(dynamics: &Dynamics, noise: &NoisePath) -> Result<Self> {
        check_noise(dynamics, noise)?;
        let model = &dynamics.model;
        let system = CMatrix::diagonal(
            &model
                .energy_weights()
                .iter()
                .map(|&w| C64::new(w, 0.0))
                .collect::<Vec<_>>(),
        );
        let fine = dynamics.fine_grid();
        let bath = (0..fine.len())
            .map(|j| model.effective_hamiltonian(dynamics.coeffs.at(j), noise.samples[j], 0.0))
            .collect();
        Self::new(
            dynamics.detuning.clone(),
            system,
            MatrixSeries::new(fine.clone(), bath)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.system.rows()
    }

    pub fn at(&self, interval: usize, offset: usize) -> CMatrix {
        let e = C64::new(self.detuning.on_interval(interval), 0.0);
        &self.system.scale(e) + &self.bath.values[2 * interval + offset]
    }
}

/// Unitary whose first column is `p`.
///
/// A computational basis vector `e_k` (up to phase) gives a permutation that
/// moves `k` to the front, so `e_0` gives the identity. Any other vector gets
/// a Householder reflection with its first column rephased to `p`.
pub fn basis_rotation(p: &[C64]) -> Result<CMatrix> {
    let n = p.len();
    let norm_sq: f64 = p.iter().map(|v| v.norm_sqr()).sum();
    if n == 0 || norm_sq == 0.0 {
        return Err(Error::InvalidParameter("p_basis must be nonzero".into()));
    }
    if (norm_sq - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "p_basis must be normalized, |p|^2 = {norm_sq}"
        )));
    }
    let nonzero: Vec<usize> = (0..n).filter(|&k| p[k] != ZERO).collect();
    if nonzero.len() == 1 {
        let k = nonzero[0];
        let mut u = CMatrix::zeros(n, n);
        u[(k, 0)] = p[k] / p[k].norm();
        for (col, row) in (0..n).filter(|&r| r != k).enumerate() {
            u[(row, col + 1)] = ONE;
        }
        return Ok(u);
    }
    let theta = if p[0] == ZERO { 0.0 } else { p[0].arg() };
    let alpha = -C64::from_polar(1.0, theta);
    let mut v = p.to_vec();
    v[0] -= alpha;
    let vv: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    let mut u = CMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { ONE } else { ZERO };
        id - 2.0 * v[i] * v[j].conj() / vv
    });
    for i in 0..n {
        u[(i, 0)] *= alpha;
    }
    Ok(u)
}

/// The four blocks of one rotated matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub h: C64,
    pub r: Vec<C64>,
    pub w: Vec<C64>,
    pub d: CMatrix,
}

impl Blocks {
    pub fn slice(m: &CMatrix) -> Self {
        let n = m.rows();
        Blocks {
            h: m[(0, 0)],
            r: m.row(0)[1..].to_vec(),
            w: (1..n).map(|i| m[(i, 0)]).collect(),
            d: m.block(1, n, 1, n),
        }
    }

    pub fn assemble(&self) -> CMatrix {
        let n = self.r.len() + 1;
        CMatrix::from_fn(n, n, |i, j| match (i, j) {
            (0, 0) => self.h,
            (0, j) => self.r[j - 1],
            (i, 0) => self.w[i - 1],
            (i, j) => self.d[(i - 1, j - 1)],
        })
    }

    fn scaled_sum(&self, e: f64, other: &Blocks) -> Blocks {
        Blocks {
            h: e * self.h + other.h,
            r: self
                .r
                .iter()
                .zip(&other.r)
                .map(|(a, b)| e * a + b)
                .collect(),
            w: self
                .w
                .iter()
                .zip(&other.w)
                .map(|(a, b)| e * a + b)
                .collect(),
            d: &self.d.scale(C64::new(e, 0.0)) + &other.d,
        }
    }
}

#[derive(Debug, Clone)]
enum BlockKind {
    Dense {
        system: Blocks,
        bath: Vec<Blocks>,
    },
    /// Multi-level model in its natural basis: `h = -E`, `R = iz*(1,...,1)`,
    /// `W = 0`, `D = E·1 - iF·J` with `J` the all-ones matrix.
    UniformCoupling {
        n: usize,
        z: Vec<C64>,
        f: Vec<C64>,
        int_f: Vec<C64>,
    },
}

/// Time-dependent blocks `(h, R, W, D)` for one P direction.
#[derive(Debug, Clone)]
pub struct PQBlocks {
    p_basis: Vec<C64>,
    unitary: CMatrix,
    detuning: Detuning,
    fine: TimeGrid,
    kind: BlockKind,
}

/// Rotates every sample of `heff` into a basis whose first vector is
/// `p_basis` and slices the blocks.
pub fn partition(heff: &HeffSeries, p_basis: &[C64]) -> Result<PQBlocks> {
    if p_basis.len() != heff.dim() {
        return Err(Error::InvalidParameter(format!(
            "p_basis has {} entries, H_eff is {}x{}",
            p_basis.len(),
            heff.dim(),
            heff.dim()
        )));
    }
    let u = basis_rotation(p_basis)?;
    let ud = u.adjoint();
    let rotate = |m: &CMatrix| Blocks::slice(&(&(&ud * m) * &u));
    let bath = heff.bath.values.par_iter().map(rotate).collect();
    Ok(PQBlocks {
        p_basis: p_basis.to_vec(),
        detuning: heff.detuning.clone(),
        fine: heff.bath.grid.clone(),
        kind: BlockKind::Dense {
            system: rotate(&heff.system),
            bath,
        },
        unitary: u,
    })
}

/// Structured blocks of the multi-level model for `P = |0>`, without dense
/// matrices. Works for any `N`.
pub fn multilevel_blocks(dynamics: &Dynamics, noise: &NoisePath) -> Result<PQBlocks> {
    let Family::MultiLevel { n } = dynamics.model.family else {
        return Err(Error::InvalidParameter(
            "multilevel_blocks needs the multi-level model".into(),
        ));
    };
    check_noise(dynamics, noise)?;
    let fine = dynamics.fine_grid();
    let mut p = vec![ZERO; n + 1];
    p[0] = ONE;
    Ok(PQBlocks {
        p_basis: p,
        unitary: CMatrix::identity(n + 1),
        detuning: dynamics.detuning.clone(),
        fine: fine.clone(),
        kind: BlockKind::UniformCoupling {
            n,
            z: noise.samples.clone(),
            f: (0..fine.len()).map(|j| dynamics.coeffs.at(j)[0]).collect(),
            int_f: (0..fine.len())
                .map(|j| dynamics.coeffs.integral_at(j)[0])
                .collect(),
        },
    })
}

/// Blocks for `p_basis` on one noise path, structured when possible.
pub fn blocks_for(dynamics: &Dynamics, noise: &NoisePath, p_basis: &[C64]) -> Result<PQBlocks> {
    let natural = p_basis.first() == Some(&ONE) && p_basis[1..].iter().all(|v| *v == ZERO);
    if natural && matches!(dynamics.model.family, Family::MultiLevel { .. }) {
        multilevel_blocks(dynamics, noise)
    } else {
        partition(&HeffSeries::from_dynamics(dynamics, noise)?, p_basis)
    }
}

impl PQBlocks {
    pub fn p_basis(&self) -> &[C64] {
        &self.p_basis
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.unitary
    }

    /// Dimension of the Q subspace.
    pub fn q_dim(&self) -> usize {
        self.p_basis.len() - 1
    }

    /// The integration grid.
    pub fn grid(&self) -> &TimeGrid {
        self.detuning.grid()
    }

    pub fn fine_grid(&self) -> &TimeGrid {
        &self.fine
    }

    fn e(&self, interval: usize) -> f64 {
        self.detuning.on_interval(interval)
    }

    /// All blocks at one sample.
    pub fn at(&self, interval: usize, offset: usize) -> Blocks {
        let j = 2 * interval + offset;
        let e = self.e(interval);
        match &self.kind {
            BlockKind::Dense { system, bath } => system.scaled_sum(e, &bath[j]),
            BlockKind::UniformCoupling { n, z, f, .. } => Blocks {
                h: C64::new(-e, 0.0),
                r: vec![I * z[j]; *n],
                w: vec![ZERO; *n],
                d: CMatrix::from_fn(*n, *n, |a, b| if a == b { e - I * f[j] } else { -I * f[j] }),
            },
        }
    }

    /// The rotated generator `U† H_eff U` rebuilt from its blocks.
    pub fn reassemble(&self, interval: usize, offset: usize) -> CMatrix {
        self.at(interval, offset).assemble()
    }

    /// `(P, Q)` components of a state: `U† ψ` split after the first entry.
    pub fn split_state(&self, psi: &[C64]) -> (C64, Vec<C64>) {
        let rotated = self.unitary.adjoint().matvec(psi);
        (rotated[0], rotated[1..].to_vec())
    }

    /// `<p|ψ>`.
    pub fn project(&self, psi: &[C64]) -> C64 {
        self.p_basis
            .iter()
            .zip(psi)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn h(&self, interval: usize, offset: usize) -> C64 {
        let j = 2 * interval + offset;
        let e = self.e(interval);
        match &self.kind {
            BlockKind::Dense { system, bath } => e * system.h + bath[j].h,
            BlockKind::UniformCoupling { .. } => C64::new(-e, 0.0),
        }
    }

    /// `R · q`.
    pub fn r_dot(&self, interval: usize, offset: usize, q: &[C64]) -> C64 {
        let j = 2 * interval + offset;
        match &self.kind {
            BlockKind::Dense { system, bath } => {
                let e = self.e(interval);
                system
                    .r
                    .iter()
                    .zip(&bath[j].r)
                    .zip(q)
                    .map(|((s, b), x)| (e * s + b) * x)
                    .sum()
            }
            BlockKind::UniformCoupling { z, .. } => I * z[j] * q.iter().sum::<C64>(),
        }
    }

    /// `out = W · p`.
    pub fn w_times(&self, interval: usize, offset: usize, p: C64, out: &mut [C64]) {
        let j = 2 * interval + offset;
        match &self.kind {
            BlockKind::Dense { system, bath } => {
                let e = self.e(interval);
                for ((o, s), b) in out.iter_mut().zip(&system.w).zip(&bath[j].w) {
                    *o = (e * s + b) * p;
                }
            }
            BlockKind::UniformCoupling { .. } => out.fill(ZERO),
        }
    }

    /// True when `W` is exactly zero at every sample.
    pub fn w_is_zero(&self) -> bool {
        match &self.kind {
            BlockKind::Dense { system, bath } => {
                system.w.iter().all(|v| *v == ZERO)
                    && bath.iter().all(|b| b.w.iter().all(|v| *v == ZERO))
            }
            BlockKind::UniformCoupling { .. } => true,
        }
    }

    /// `φ(t) = ∫_0^t h` at every refined point. The detuning part is exact;
    /// the bath part uses Simpson's rule per interval and the matching
    /// quadratic rule for the first half.
    pub fn h_integrals(&self) -> Vec<C64> {
        let det = &self.detuning;
        match &self.kind {
            BlockKind::UniformCoupling { .. } => (0..self.fine.len())
                .map(|j| C64::new(-det.integral_fine(j), 0.0))
                .collect(),
            BlockKind::Dense { system, bath } => {
                let mut out = Vec::with_capacity(self.fine.len());
                let mut acc = ZERO;
                out.push(acc);
                for k in 0..self.grid().intervals() {
                    let hk = self.grid().spacing(k);
                    let (b0, bm, b1) = (bath[2 * k].h, bath[2 * k + 1].h, bath[2 * k + 2].h);
                    let half = hk * (5.0 * b0 + 8.0 * bm - b1) / 24.0;
                    let full = hk * (b0 + 4.0 * bm + b1) / 6.0;
                    out.push(acc + half + system.h * det.integral_fine(2 * k + 1));
                    acc += full;
                    out.push(acc + system.h * det.integral_fine(2 * k + 2));
                }
                out
            }
        }
    }
}

/// Which part of an integration interval a step propagator covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Full,
    FirstHalf,
    SecondHalf,
}

/// Time-ordered propagator `G(t,s)` of the Q block.
#[derive(Debug, Clone)]
pub enum Propagator {
    /// One fourth-order Magnus exponential per interval part, built from `D`
    /// at the part's ends and midpoint.
    Stepped { steps: Vec<[CMatrix; 3]> },
    /// `G(t,s) v = e^{-i∫E} [v + (e^{-N∫F} - 1) mean(v) (1,...,1)]`.
    UniformCoupling {
        n: usize,
        phase: Vec<f64>,
        int_f: Vec<C64>,
    },
}

impl Propagator {
    /// Step propagators from the blocks' `D`.
    pub fn stepped(blocks: &PQBlocks) -> Self {
        let grid = blocks.grid();
        let steps = (0..grid.intervals())
            .into_par_iter()
            .map(|k| {
                let hk = grid.spacing(k);
                let d0 = blocks.at(k, 0).d;
                let dm = blocks.at(k, 1).d;
                let d1 = blocks.at(k, 2).d;
                let i = C64::new(0.0, -1.0);
                let (a0, am, a1) = (d0.scale(i), dm.scale(i), d1.scale(i));
                let comb = |a: f64, b: f64, c: f64| {
                    &(&a0.scale(C64::new(a, 0.0)) + &am.scale(C64::new(b, 0.0)))
                        + &a1.scale(C64::new(c, 0.0))
                };
                let comm = |x: &CMatrix, y: &CMatrix| &(x * y) - &(y * x);
                // fourth-order Magnus over [t0, t0 + len] with endpoint generators x, y
                let magnus = |quad: CMatrix, len: f64, x: &CMatrix, y: &CMatrix| {
                    let c = comm(x, y).scale(C64::new(-len * len / 12.0, 0.0));
                    (&quad.scale(C64::new(hk, 0.0)) + &c).exp()
                };
                [
                    magnus(comb(1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0), hk, &a0, &a1),
                    magnus(
                        comb(5.0 / 24.0, 8.0 / 24.0, -1.0 / 24.0),
                        0.5 * hk,
                        &a0,
                        &am,
                    ),
                    magnus(
                        comb(-1.0 / 24.0, 8.0 / 24.0, 5.0 / 24.0),
                        0.5 * hk,
                        &am,
                        &a1,
                    ),
                ]
            })
            .collect();
        Propagator::Stepped { steps }
    }

    /// The closed form for uniform-coupling blocks.
    pub fn closed_form(blocks: &PQBlocks) -> Result<Self> {
        match &blocks.kind {
            BlockKind::UniformCoupling { n, int_f, .. } => Ok(Propagator::UniformCoupling {
                n: *n,
                phase: (0..blocks.fine.len())
                    .map(|j| blocks.detuning.integral_fine(j))
                    .collect(),
                int_f: int_f.clone(),
            }),
            BlockKind::Dense { .. } => Err(Error::InvalidParameter(
                "closed-form propagator needs uniform-coupling blocks".into(),
            )),
        }
    }

    /// Closed form when available, stepped otherwise.
    pub fn for_blocks(blocks: &PQBlocks) -> Self {
        Self::closed_form(blocks).unwrap_or_else(|_| Self::stepped(blocks))
    }

    fn uniform_apply(n: usize, phase: f64, int_f: C64, v: &[C64], out: &mut [C64]) {
        let e = C64::new(0.0, -phase).exp();
        let shift = ((-(n as f64) * int_f).exp() - 1.0) * v.iter().sum::<C64>() / n as f64;
        for (o, x) in out.iter_mut().zip(v) {
            *o = e * (x + shift);
        }
    }

    /// `out = G · v` across one part of interval `k`.
    pub fn step_apply(&self, k: usize, part: Part, v: &[C64], out: &mut [C64]) {
        match self {
            Propagator::Stepped { steps } => {
                let m = match part {
                    Part::Full => &steps[k][0],
                    Part::FirstHalf => &steps[k][1],
                    Part::SecondHalf => &steps[k][2],
                };
                m.matvec_into(v, out);
            }
            Propagator::UniformCoupling { n, phase, int_f } => {
                let (a, b) = match part {
                    Part::Full => (2 * k, 2 * k + 2),
                    Part::FirstHalf => (2 * k, 2 * k + 1),
                    Part::SecondHalf => (2 * k + 1, 2 * k + 2),
                };
                Self::uniform_apply(*n, phase[b] - phase[a], int_f[b] - int_f[a], v, out);
            }
        }
    }

    /// `G(t_t, t_s) v` for grid indices `s <= t`.
    pub fn apply(&self, t: usize, s: usize, v: &[C64]) -> Result<Vec<C64>> {
        if s > t {
            return Err(Error::InvalidParameter(format!(
                "propagator needs s <= t, got s = {s}, t = {t}"
            )));
        }
        match self {
            Propagator::UniformCoupling { n, phase, int_f } => {
                let mut out = vec![ZERO; v.len()];
                Self::uniform_apply(
                    *n,
                    phase[2 * t] - phase[2 * s],
                    int_f[2 * t] - int_f[2 * s],
                    v,
                    &mut out,
                );
                Ok(out)
            }
            Propagator::Stepped { .. } => {
                let mut cur = v.to_vec();
                let mut next = vec![ZERO; v.len()];
                for k in s..t {
                    self.step_apply(k, Part::Full, &cur, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                Ok(cur)
            }
        }
    }

    /// The matrix `G(t_t, t_s)` for grid indices `s <= t`.
    pub fn matrix(&self, t: usize, s: usize) -> Result<CMatrix> {
        let n = match self {
            Propagator::Stepped { steps } => steps.first().map_or(0, |m| m[0].rows()),
            Propagator::UniformCoupling { n, .. } => *n,
        };
        let mut m = CMatrix::zeros(n, n);
        let mut e = vec![ZERO; n];
        for j in 0..n {
            e.fill(ZERO);
            e[j] = ONE;
            for (i, v) in self.apply(t, s, &e)?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

/// `(interval, offset)` addressing coarse point `k`; the last point uses the
/// left limit.
fn coarse_sample(grid: &TimeGrid, k: usize) -> (usize, usize) {
    if k < grid.intervals() {
        (k, 0)
    } else {
        (k - 1, 2)
    }
}

/// `G~(t,s) = R(t) G(t,s) W(s)` on the lower triangle of the grid.
#[derive(Debug, Clone)]
pub struct MemoryKernel {
    pub grid: TimeGrid,
    rows: Vec<Vec<C64>>,
}

impl MemoryKernel {
    /// `G~(t_t, t_s)` for `s <= t`.
    pub fn get(&self, t: usize, s: usize) -> C64 {
        self.rows[t][s]
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

/// Evaluates the memory kernel on every pair of grid points. O(M² N²).
pub fn memory_kernel(blocks: &PQBlocks, prop: &Propagator) -> MemoryKernel {
    let grid = blocks.grid();
    let m = grid.len();
    let nq = blocks.q_dim();
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(m);
    let mut rows = Vec::with_capacity(m);
    let mut next = vec![ZERO; nq];
    for t in 0..m {
        let (kt, ot) = coarse_sample(grid, t);
        if t > 0 {
            for c in cols.iter_mut() {
                prop.step_apply(t - 1, Part::Full, c, &mut next);
                c.copy_from_slice(&next);
            }
        }
        let mut w = vec![ZERO; nq];
        blocks.w_times(kt, ot, ONE, &mut w);
        cols.push(w);
        rows.push(cols.iter().map(|c| blocks.r_dot(kt, ot, c)).collect());
    }
    MemoryKernel {
        grid: grid.clone(),
        rows,
    }
}

fn check_q0(blocks: &PQBlocks, q0: &[C64]) -> Result<()> {
    if q0.len() != blocks.q_dim() {
        return Err(Error::InvalidParameter(format!(
            "Q(0) has {} entries, Q block has {}",
            q0.len(),
            blocks.q_dim()
        )));
    }
    Ok(())
}

fn finite(z: C64) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

/// Solves the closed equation for `P` on the blocks' grid.
///
/// The memory integral `∫_0^t G(t,s) W(s) P(s) ds` is carried as a Q-space
/// vector, so only the current history sum is stored. `P` (in the
/// interaction picture of `h`) and that vector are advanced together by an
/// integrating-factor RK4 whose factors are the step propagators.
pub fn solve_p(blocks: &PQBlocks, prop: &Propagator, p0: C64, q0: &[C64]) -> Result<ComplexSeries> {
    check_q0(blocks, q0)?;
    let grid = blocks.grid();
    let nq = q0.len();
    let phi = blocks.h_integrals();
    let rot = |j: usize| (I * phi[j]).exp();

    let mut p = p0;
    // Q(t) = G(t,0) Q(0) - i ∫ G(t,s) W(s) P(s) ds.
    let mut q = q0.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    out.push(p);

    let one = C64::new(1.0, 0.0);
    let mut w0 = vec![ZERO; nq];
    let mut wm = vec![ZERO; nq];
    let mut w1 = vec![ZERO; nq];
    let mut a_q = vec![ZERO; nq];
    let mut b_q = vec![ZERO; nq];
    let mut a_w0 = vec![ZERO; nq];
    let mut b_w0 = vec![ZERO; nq];
    let mut c_wm = vec![ZERO; nq];
    let mut q_stage = vec![ZERO; nq];

    // Lawson RK4 on (P, Q): h and D are absorbed into e^{-i∫h} and G.
    for k in 0..grid.intervals() {
        let hk = grid.spacing(k);
        let (j0, jm, j1) = (2 * k, 2 * k + 1, 2 * k + 2);
        let (e0, em, e1) = (rot(j0), rot(jm), rot(j1));
        let pt = e0 * p;

        prop.step_apply(k, Part::Full, &q, &mut a_q);
        prop.step_apply(k, Part::FirstHalf, &q, &mut b_q);
        blocks.w_times(k, 0, one, &mut w0);
        blocks.w_times(k, 1, one, &mut wm);
        blocks.w_times(k, 2, one, &mut w1);
        prop.step_apply(k, Part::Full, &w0, &mut a_w0);
        prop.step_apply(k, Part::FirstHalf, &w0, &mut b_w0);
        prop.step_apply(k, Part::SecondHalf, &wm, &mut c_wm);

        let deriv = |offset: usize, rot: C64, q: &[C64]| -I * rot * blocks.r_dot(k, offset, q);
        let stage = |base: &[C64], c: C64, v: &[C64], out: &mut [C64]| {
            for i in 0..nq {
                out[i] = base[i] - I * c * v[i];
            }
        };

        let k1 = deriv(0, e0, &q);
        let p2 = (pt + 0.5 * hk * k1) / em;
        stage(&b_q, 0.5 * hk * p, &b_w0, &mut q_stage);
        let k2 = deriv(1, em, &q_stage);
        let p3 = (pt + 0.5 * hk * k2) / em;
        stage(&b_q, 0.5 * hk * p2, &wm, &mut q_stage);
        let k3 = deriv(1, em, &q_stage);
        let p4 = (pt + hk * k3) / e1;
        stage(&a_q, hk * p3, &c_wm, &mut q_stage);
        let k4 = deriv(2, e1, &q_stage);

        let p_next = (pt + hk / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)) / e1;
        for i in 0..nq {
            q_stage[i] =
                a_q[i] - I * (hk / 6.0) * (p * a_w0[i] + 2.0 * (p2 + p3) * c_wm[i] + p4 * w1[i]);
        }
        std::mem::swap(&mut q, &mut q_stage);
        p = p_next;
        if !finite(p) {
            return Err(Error::NonFinite {
                t: grid.points()[k + 1],
            });
        }
        out.push(p);
    }
    ComplexSeries::new(grid.clone(), out)
}

/// Reference solver for the closed `P` equation that keeps the full history.
///
/// The memory integral is a trapezoid sum over every stored `P(t_j)` with the
/// kernel `G~(t_n, t_j)`; time stepping is a trapezoid predictor-corrector in
/// the interaction picture of `h`. Second order, O(M² N²) work.
pub fn solve_p_stored_history(
    blocks: &PQBlocks,
    prop: &Propagator,
    p0: C64,
    q0: &[C64],
) -> Result<ComplexSeries> {
    check_q0(blocks, q0)?;
    let grid = blocks.grid();
    let m = grid.len();
    let nq = q0.len();
    let phi = blocks.h_integrals();
    let pts = grid.points();

    // v_j(t_n) = G(t_n, t_j) W(t_j) for every stored j.
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(m);
    let mut hist: Vec<C64> = Vec::with_capacity(m);
    let mut q_free = q0.to_vec();
    let mut next = vec![ZERO; nq];

    // dP/dt without the -ihP part, given history 0..=n with P(t_n) = p_n.
    let rhs = |n: usize, cols: &[Vec<C64>], hist: &[C64], p_n: C64, q_free: &[C64]| -> C64 {
        let (kt, ot) = coarse_sample(grid, n);
        let mut mem = ZERO;
        for j in 0..=n {
            let w = if n == 0 {
                0.0
            } else if j == 0 {
                0.5 * (pts[1] - pts[0])
            } else if j == n {
                0.5 * (pts[n] - pts[n - 1])
            } else {
                0.5 * (pts[j + 1] - pts[j - 1])
            };
            if w == 0.0 {
                continue;
            }
            let pj = if j == n { p_n } else { hist[j] };
            mem += w * blocks.r_dot(kt, ot, &cols[j]) * pj;
        }
        -mem - I * blocks.r_dot(kt, ot, q_free)
    };

    let mut w0 = vec![ZERO; nq];
    blocks.w_times(0, 0, ONE, &mut w0);
    cols.push(w0);
    hist.push(p0);
    let mut g_n = rhs(0, &cols, &hist, p0, &q_free);
    for n in 0..m - 1 {
        let h = pts[n + 1] - pts[n];
        let e_n = (I * phi[2 * n]).exp();
        let e_1 = (I * phi[2 * n + 2]).exp();
        let pt = e_n * hist[n];

        for c in cols.iter_mut() {
            prop.step_apply(n, Part::Full, c, &mut next);
            c.copy_from_slice(&next);
        }
        prop.step_apply(n, Part::Full, &q_free, &mut next);
        q_free.copy_from_slice(&next);
        let (kt, ot) = coarse_sample(grid, n + 1);
        let mut w = vec![ZERO; nq];
        blocks.w_times(kt, ot, ONE, &mut w);
        cols.push(w);

        let pred = (pt + h * e_n * g_n) / e_1;
        let g_pred = rhs(n + 1, &cols, &hist, pred, &q_free);
        let corr = (pt + 0.5 * h * (e_n * g_n + e_1 * g_pred)) / e_1;
        g_n = rhs(n + 1, &cols, &hist, corr, &q_free);
        if !finite(corr) {
            return Err(Error::NonFinite { t: pts[n + 1] });
        }
        hist.push(corr);
    }
    ComplexSeries::new(grid.clone(), hist)
}

/// Largest `|G~|` over the grid, cheap when `W` vanishes.
pub fn kernel_magnitude(blocks: &PQBlocks, prop: &Propagator) -> f64 {
    if blocks.w_is_zero() {
        return 0.0;
    }
    let grid = blocks.grid();
    let nq = blocks.q_dim();
    let mut w = vec![ZERO; nq];
    let mut diag = 0.0f64;
    for k in 0..grid.intervals() {
        for o in 0..3 {
            blocks.w_times(k, o, ONE, &mut w);
            diag = diag.max(blocks.r_dot(k, o, &w).norm());
        }
    }
    if diag > KERNEL_TOL {
        return diag;
    }
    memory_kernel(blocks, prop).max_abs()
}

/// `P(t) = [P0 - i∫_0^t R Q e^{iφ}] e^{-iφ(t)}` with `Q(s) = G(s,0) Q(0)`,
/// valid only when the memory kernel vanishes.
pub fn formal_solution_p(
    blocks: &PQBlocks,
    prop: &Propagator,
    p0: C64,
    q0: &[C64],
) -> Result<ComplexSeries> {
    check_q0(blocks, q0)?;
    let max = kernel_magnitude(blocks, prop);
    if max > KERNEL_TOL {
        return Err(Error::NonZeroKernel { max });
    }
    let grid = blocks.grid();
    let phi = blocks.h_integrals();
    let nq = q0.len();
    let mut q = q0.to_vec();
    let mut qm = vec![ZERO; nq];
    let mut q1 = vec![ZERO; nq];
    let mut acc = ZERO;
    let mut out = Vec::with_capacity(grid.len());
    out.push(p0);
    for k in 0..grid.intervals() {
        let hk = grid.spacing(k);
        prop.step_apply(k, Part::FirstHalf, &q, &mut qm);
        prop.step_apply(k, Part::Full, &q, &mut q1);
        let g = |o: usize, j: usize, q: &[C64]| blocks.r_dot(k, o, q) * (I * phi[j]).exp();
        acc += hk / 6.0 * (g(0, 2 * k, &q) + 4.0 * g(1, 2 * k + 1, &qm) + g(2, 2 * k + 2, &q1));
        std::mem::swap(&mut q, &mut q1);
        out.push((p0 - I * acc) * (-I * phi[2 * k + 2]).exp());
    }
    ComplexSeries::new(grid.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{aligned_grid, PulseTrain};
    use crate::models::ModelSpec;
    use crate::noise::{sample_path, CorrelationSpec};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn dynamics(model: ModelSpec, t_end: f64, dt: f64) -> Dynamics {
        let corr = CorrelationSpec::new(1.0, 0.5).unwrap();
        let grid = TimeGrid::uniform(0.0, t_end, dt).unwrap();
        Dynamics::new(model, corr, &PulseTrain::disabled(), &grid).unwrap()
    }

    #[test]
    fn rotation_is_unitary_with_p_first() {
        let p = [c(0.3, 0.1), c(-0.5, 0.2), c(0.0, 0.4), c(0.2, -0.3)];
        let s: f64 = p.iter().map(|v| v.norm_sqr()).sum();
        let p: Vec<C64> = p.iter().map(|v| v / s.sqrt()).collect();
        let u = basis_rotation(&p).unwrap();
        let uu = &u.adjoint() * &u;
        assert!(uu.max_abs_diff(&CMatrix::identity(4)) < 1e-14);
        for (i, v) in p.iter().enumerate() {
            assert!((u[(i, 0)] - v).norm() < 1e-14);
        }
        let e0 = [ONE, ZERO, ZERO];
        assert_eq!(basis_rotation(&e0).unwrap(), CMatrix::identity(3));
        assert!(basis_rotation(&[ZERO, ZERO]).is_err());
    }

    #[test]
    fn two_level_natural_blocks() {
        let d = dynamics(ModelSpec::two_level(0.4), 0.5, 0.1);
        let noise = sample_path(&d.corr, d.fine_grid(), 2);
        let b = partition(
            &HeffSeries::from_dynamics(&d, &noise).unwrap(),
            &[ONE, ZERO],
        )
        .unwrap();
        let s = b.at(2, 1);
        assert_eq!(s.h, c(-0.2, 0.0));
        assert_eq!(s.r, vec![I * noise.samples[5]]);
        assert_eq!(s.w, vec![ZERO]);
        assert!((s.d[(0, 0)] - (0.2 - I * d.coeffs.at(5)[0])).norm() < 1e-15);
    }

    #[test]
    fn reassembly_round_trip() {
        let d = dynamics(ModelSpec::multilevel(0.3, 3).unwrap(), 0.3, 0.05);
        let noise = sample_path(&d.corr, d.fine_grid(), 8);
        let heff = HeffSeries::from_dynamics(&d, &noise).unwrap();
        let p: Vec<C64> = [c(0.5, 0.0), c(0.1, 0.5), c(-0.5, 0.1), c(0.0, -0.3)].to_vec();
        let s: f64 = p.iter().map(|v| v.norm_sqr()).sum();
        let p: Vec<C64> = p.iter().map(|v| v / s.sqrt()).collect();
        let b = partition(&heff, &p).unwrap();
        let u = b.unitary().clone();
        for k in 0..d.grid().intervals() {
            for o in 0..3 {
                let rotated = &(&u.adjoint() * &heff.at(k, o)) * &u;
                assert!(b.reassemble(k, o).max_abs_diff(&rotated) < 1e-12);
            }
        }
    }

    #[test]
    fn propagator_basics() {
        let corr = CorrelationSpec::new(1.0, 0.2).unwrap();
        let train = PulseTrain::new(0.08, 0.04, 4.0).unwrap();
        let grid = aligned_grid(&train, 1.0, 1e-3).unwrap();
        let d = Dynamics::new(ModelSpec::multilevel(0.2, 3).unwrap(), corr, &train, &grid).unwrap();
        let noise = sample_path(&d.corr, d.fine_grid(), 1);
        let blocks = multilevel_blocks(&d, &noise).unwrap();
        let closed = Propagator::closed_form(&blocks).unwrap();
        let stepped = Propagator::stepped(&blocks);
        let last = grid.len() - 1;
        assert!(
            closed
                .matrix(7, 7)
                .unwrap()
                .max_abs_diff(&CMatrix::identity(3))
                < 1e-15
        );
        let a = closed.matrix(last, 0).unwrap();
        let b = stepped.matrix(last, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8, "{}", a.max_abs_diff(&b));
        assert!(closed.matrix(3, 5).is_err());
    }

    #[test]
    fn constant_diagonal_generator() {
        let grid = TimeGrid::uniform(0.0, 1.0, 0.01).unwrap();
        let det = Detuning::from_intervals(&grid, vec![0.7; grid.intervals()]);
        let fine = grid.refined();
        let bath = MatrixSeries::new(fine.clone(), vec![CMatrix::zeros(3, 3); fine.len()]).unwrap();
        let heff = HeffSeries::new(det, CMatrix::identity(3), bath).unwrap();
        let b = partition(&heff, &[ONE, ZERO, ZERO]).unwrap();
        let g = Propagator::stepped(&b).matrix(100, 30).unwrap();
        let expect = CMatrix::identity(2).scale(C64::new(0.0, -0.7 * 0.7).exp());
        assert!(g.max_abs_diff(&expect) < 1e-13);
    }

    #[test]
    fn decoupled_p_evolves_by_phase() {
        // Two-level natural blocks with Q(0) = 0: P = P0 e^{-i∫h}.
        let d = dynamics(ModelSpec::two_level(0.4), 2.0, 1e-2);
        let noise = sample_path(&d.corr, d.fine_grid(), 2);
        let b = blocks_for(&d, &noise, &[ONE, ZERO]).unwrap();
        let prop = Propagator::for_blocks(&b);
        let p0 = c(0.6, 0.8);
        let sol = solve_p(&b, &prop, p0, &[ZERO]).unwrap();
        let formal = formal_solution_p(&b, &prop, p0, &[ZERO]).unwrap();
        for (k, v) in sol.values.iter().enumerate() {
            let t = d.grid().points()[k];
            let expect = p0 * C64::new(0.0, 0.2 * t).exp();
            assert!((v - expect).norm() < 1e-12);
            assert!((formal.values[k] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn formal_rejects_nonzero_kernel() {
        let d = dynamics(ModelSpec::qutrit(1.0, 1.0).unwrap(), 0.5, 1e-2);
        let noise = sample_path(&d.corr, d.fine_grid(), 2);
        let p = d.model.initial_state();
        let b = blocks_for(&d, &noise, &p).unwrap();
        let prop = Propagator::for_blocks(&b);
        let (p0, q0) = b.split_state(&p);
        assert!(matches!(
            formal_solution_p(&b, &prop, p0, &q0),
            Err(Error::NonZeroKernel { .. })
        ));
    }

    #[test]
    fn natural_kernels_vanish() {
        for m in [
            ModelSpec::two_level(0.2),
            ModelSpec::qutrit(1.0, 1.4).unwrap(),
            ModelSpec::multilevel(0.2, 3).unwrap(),
        ] {
            let d = dynamics(m, 0.3, 0.02);
            let noise = sample_path(&d.corr, d.fine_grid(), 5);
            let mut p = vec![ZERO; m.dimension()];
            p[0] = ONE;
            let b = partition(&HeffSeries::from_dynamics(&d, &noise).unwrap(), &p).unwrap();
            let prop = Propagator::stepped(&b);
            assert_eq!(memory_kernel(&b, &prop).max_abs(), 0.0, "{}", m.name());
        }
    }

    #[test]
    fn kernel_diagonal_is_rw() {
        let d = dynamics(ModelSpec::qutrit(1.0, 1.0).unwrap(), 0.2, 0.02);
        let noise = sample_path(&d.corr, d.fine_grid(), 3);
        let b = blocks_for(&d, &noise, &d.model.initial_state()).unwrap();
        let prop = Propagator::stepped(&b);
        let ker = memory_kernel(&b, &prop);
        for t in 0..d.grid().len() {
            let (k, o) = coarse_sample(d.grid(), t);
            let s = b.at(k, o);
            let rw: C64 = s.r.iter().zip(&s.w).map(|(r, w)| r * w).sum();
            assert!((ker.get(t, t) - rw).norm() < 1e-14);
        }
    }

    fn max_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn solvers_match_full_space_projection() {
        let d = dynamics(ModelSpec::qutrit(1.0, 2f64.sqrt()).unwrap(), 2.0, 2e-3);
        let noise = sample_path(&d.corr, d.fine_grid(), 13);
        let psi0 = d.model.initial_state();
        let traj = crate::qsd::propagate_trajectory(&d, &noise, &psi0, f64::INFINITY).unwrap();
        let b = blocks_for(&d, &noise, &psi0).unwrap();
        let prop = Propagator::for_blocks(&b);
        let (p0, q0) = b.split_state(&psi0);
        let full: Vec<C64> = traj.psi.iter().map(|psi| b.project(psi)).collect();
        let fast = solve_p(&b, &prop, p0, &q0).unwrap();
        let slow = solve_p_stored_history(&b, &prop, p0, &q0).unwrap();
        let e_fast = max_diff(&fast.values, &full);
        let e_slow = max_diff(&slow.values, &full);
        assert!(e_fast < 1e-5, "recursive history: {e_fast}");
        assert!(e_slow < 1e-3, "stored history: {e_slow}");
    }
}
