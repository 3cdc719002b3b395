//! Noise-averaged closed-form fidelities in the rotating frame of `H_sys`.
//!
//! All evaluators work on an analytic grid that keeps every `coarsen`-th
//! integration point (and the last one). Double integrals over `[0,t]²` with
//! the kernel `α(s₁,s₂) = (Γγ/2)e^{-γ|s₁-s₂|}` use the product trapezoid rule
//! on that grid; the exponential kernel lets the row sums be carried forward
//! recursively, so each curve costs O(M). The qutrit quartic term needs one
//! backward recursion per row and costs O(M²).

use crate::control::Detuning;
use crate::models::{Dynamics, Family};
use crate::noise::CorrelationSpec;
use crate::numerics::{square_trapezoid_general, square_trapezoid_hermitian, TimeGrid};
use crate::qsd::{sample_indices, FidelityCurve};
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

pub const DEFAULT_COARSEN: usize = 4;

/// Largest analytic grid the O(M⁴) qutrit evaluator accepts.
pub const BRUTE_FORCE_MAX_POINTS: usize = 80;

/// Barred quantities on the analytic grid.
///
/// For the multi-level model `fbar_i` is `cos(N∫F_I)` and `kbar` is
/// `e^{i∫(2E+N F_I)}`; for the two-level model they are `cos(∫F_I)` and
/// `e^{i∫(E+F_I)}`. `bbar` and `fbar_j` are only filled for the qutrit.
#[derive(Debug, Clone)]
pub struct BarredCoefficients {
    pub grid: TimeGrid,
    /// `e^{-∫F_R}` of the first coefficient.
    pub fbar_r: Vec<f64>,
    pub fbar_i: Vec<f64>,
    /// `e^{-i∫E}`.
    pub ebar: Vec<C64>,
    pub kbar: Vec<C64>,
    /// `Ē F̄₂ / F̄₁`.
    pub bbar: Option<Vec<C64>>,
    /// `e^{-∫F_j}` for every coefficient.
    pub fbar_j: Vec<Vec<C64>>,
}

fn analytic_indices(grid: &TimeGrid, coarsen: usize) -> Result<Vec<usize>> {
    if coarsen == 0 {
        return Err(Error::InvalidParameter(
            "analytic.coarsen must be >= 1".into(),
        ));
    }
    Ok(sample_indices(grid, coarsen))
}

impl BarredCoefficients {
    pub fn new(dynamics: &Dynamics, coarsen: usize) -> Result<Self> {
        let idx = analytic_indices(dynamics.grid(), coarsen)?;
        let grid = dynamics.grid().subset(&idx)?;
        let model = &dynamics.model;
        let w = model.energy_weights();
        let rel = w[1] - w[0];
        let mult = match model.family {
            Family::MultiLevel { n } => n as f64,
            _ => 1.0,
        };
        let n_c = model.n_coeffs();
        let int_f: Vec<&[C64]> = idx
            .iter()
            .map(|&k| dynamics.coeffs.integral_at(2 * k))
            .collect();
        let phi: Vec<f64> = idx.iter().map(|&k| dynamics.detuning.integral(k)).collect();

        let fbar_r = int_f.iter().map(|f| (-f[0].re).exp()).collect();
        let fbar_i = int_f.iter().map(|f| (mult * f[0].im).cos()).collect();
        let ebar: Vec<C64> = phi.iter().map(|p| C64::new(0.0, -p).exp()).collect();
        let kbar = int_f
            .iter()
            .zip(&phi)
            .map(|(f, p)| C64::new(0.0, rel * p + mult * f[0].im).exp())
            .collect();
        let fbar_j: Vec<Vec<C64>> = (0..n_c)
            .map(|c| int_f.iter().map(|f| (-f[c]).exp()).collect())
            .collect();
        let bbar = matches!(model.family, Family::Qutrit { .. }).then(|| {
            (0..idx.len())
                .map(|j| ebar[j] * (int_f[j][0] - int_f[j][1]).exp())
                .collect()
        });
        Ok(BarredCoefficients {
            grid,
            fbar_r,
            fbar_i,
            ebar,
            kbar,
            bbar,
            fbar_j,
        })
    }
}

/// Trapezoid weights of nodes strictly inside the integration range.
fn interior_weights(grid: &TimeGrid) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|k| {
            let left = if k > 0 { grid.spacing(k - 1) } else { 0.0 };
            let right = if k + 1 < n { grid.spacing(k) } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

fn decays(grid: &TimeGrid, corr: &CorrelationSpec) -> Vec<f64> {
    (0..grid.intervals())
        .map(|k| (-corr.memory_rate * grid.spacing(k)).exp())
        .collect()
}

/// `∬_{[0,t_K]²} α(s₁,s₂) conj(x(s₁)) y(s₂)` for every `K`, product
/// trapezoid.
pub fn exp_kernel_square(
    grid: &TimeGrid,
    corr: &CorrelationSpec,
    x: &[C64],
    y: &[C64],
) -> Vec<C64> {
    let n = grid.len();
    assert!(x.len() == n && y.len() == n);
    let c = corr.variance();
    let w = interior_weights(grid);
    let e = decays(grid, corr);
    let mut sx = ZERO;
    let mut sy = ZERO;
    let mut closed = ZERO;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            sx = e[i - 1] * (sx + w[i - 1] * x[i - 1]);
            sy = e[i - 1] * (sy + w[i - 1] * y[i - 1]);
        }
        let cross = c * (x[i].conj() * sy + sx.conj() * y[i]);
        let diag = c * x[i].conj() * y[i];
        let end_w = if i > 0 {
            0.5 * grid.spacing(i - 1)
        } else {
            0.0
        };
        out.push(closed + end_w * cross + end_w * end_w * diag);
        closed += w[i] * cross + w[i] * w[i] * diag;
    }
    out
}

fn real_square(grid: &TimeGrid, corr: &CorrelationSpec, g: &[C64]) -> Vec<f64> {
    exp_kernel_square(grid, corr, g, g)
        .into_iter()
        .map(|v| v.re)
        .collect()
}

fn check_family(dynamics: &Dynamics, want: &str) -> Result<()> {
    if dynamics.model.name() != want {
        return Err(Error::InvalidParameter(format!(
            "{want} evaluator called for the {} model",
            dynamics.model.name()
        )));
    }
    Ok(())
}

/// `¼(1 + F̄_R² + 2F̄_R F̄_I + ∬α conj(g) g)` with `g = F̄_R / K̄`.
pub fn fidelity_two_level(dynamics: &Dynamics, coarsen: usize) -> Result<FidelityCurve> {
    check_family(dynamics, "two_level")?;
    let b = BarredCoefficients::new(dynamics, coarsen)?;
    let g: Vec<C64> = b.fbar_r.iter().zip(&b.kbar).map(|(r, k)| r / k).collect();
    let d = real_square(&b.grid, &dynamics.corr, &g);
    let mean = (0..g.len())
        .map(|j| {
            let r = b.fbar_r[j];
            0.25 * (1.0 + r * r + 2.0 * r * b.fbar_i[j] + d[j])
        })
        .collect();
    Ok(FidelityCurve::exact(b.grid, mean))
}

/// `1/(N+1)² [1 + N²F̄_R^{2N} + 2N F̄_R^N F̄'_I + N² ∬α conj(g) g]` with
/// `g = F̄_R^N / K̄'`.
pub fn fidelity_multilevel(dynamics: &Dynamics, coarsen: usize) -> Result<FidelityCurve> {
    check_family(dynamics, "multilevel")?;
    let Family::MultiLevel { n } = dynamics.model.family else {
        unreachable!()
    };
    let nf = n as f64;
    let b = BarredCoefficients::new(dynamics, coarsen)?;
    let rn: Vec<f64> = b.fbar_r.iter().map(|r| r.powf(nf)).collect();
    let g: Vec<C64> = rn.iter().zip(&b.kbar).map(|(r, k)| r / k).collect();
    let d = real_square(&b.grid, &dynamics.corr, &g);
    let norm = (nf + 1.0) * (nf + 1.0);
    let mean = (0..g.len())
        .map(|j| {
            (1.0 + nf * nf * rn[j] * rn[j] + 2.0 * nf * rn[j] * b.fbar_i[j] + nf * nf * d[j]) / norm
        })
        .collect();
    Ok(FidelityCurve::exact(b.grid, mean))
}

/// The multi-level formula with `F → 0`:
/// `1/(N+1)² [1 + N² + 2N + N² ∬α Ē²(s₂)/Ē²(s₁)]`.
pub fn fidelity_weak_coupling(
    detuning: &Detuning,
    n: usize,
    corr: &CorrelationSpec,
    coarsen: usize,
) -> Result<FidelityCurve> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be >= 1".into()));
    }
    let idx = analytic_indices(detuning.grid(), coarsen)?;
    let grid = detuning.grid().subset(&idx)?;
    let g: Vec<C64> = idx
        .iter()
        .map(|&k| C64::new(0.0, -2.0 * detuning.integral(k)).exp())
        .collect();
    let d = real_square(&grid, corr, &g);
    let nf = n as f64;
    let norm = (nf + 1.0) * (nf + 1.0);
    let mean = d
        .iter()
        .map(|dk| (1.0 + nf * nf + 2.0 * nf + nf * nf * dk) / norm)
        .collect();
    Ok(FidelityCurve::exact(grid, mean))
}

/// How the qutrit quartic term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuarticMethod {
    /// Separable recursions, O(M²).
    #[default]
    Separable,
    /// Direct nested trapezoid sums, O(M⁴). Limited to
    /// [`BRUTE_FORCE_MAX_POINTS`] analytic points.
    BruteForce,
}

/// Qutrit fidelity under the noise-free approximation:
///
/// ```text
/// 𝓕 = 1/9 [ |1 + F̄₁ + F̄₂|²
///          + κ² (|F̄₁|² D_vv + 2 Re(conj(F̄₁) D_vu) + D_uu)
///          + κ⁴ ∬ u(s) conj(u(s₁)) (α(s₁,s) C(s,s₁) + A(s₁,s) conj(A(s,s₁))) ]
/// ```
///
/// with `u = Ē F̄₁`, `v = B̄`, `D_xy = ∬α conj(x(s₁)) y(s)`,
/// `A(x,y) = ∫_0^y α(x,s') v(s') ds'` and
/// `C(s,s₁) = ∫_0^s ∫_0^{s₁} α(s₂,s') v(s') conj(v(s₂)) ds₂ ds'`.
/// `κ` is applied here because the coefficient equations carry `κ²` only in
/// their source term.
pub fn fidelity_qutrit(dynamics: &Dynamics, coarsen: usize) -> Result<FidelityCurve> {
    fidelity_qutrit_with(dynamics, coarsen, QuarticMethod::Separable)
}

pub fn fidelity_qutrit_with(
    dynamics: &Dynamics,
    coarsen: usize,
    method: QuarticMethod,
) -> Result<FidelityCurve> {
    check_family(dynamics, "qutrit")?;
    let Family::Qutrit { kappa } = dynamics.model.family else {
        unreachable!()
    };
    let b = BarredCoefficients::new(dynamics, coarsen)?;
    let m = b.grid.len();
    if method == QuarticMethod::BruteForce && m > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::InvalidParameter(format!(
            "brute-force qutrit evaluator needs <= {BRUTE_FORCE_MAX_POINTS} points, got {m}"
        )));
    }
    let f1 = &b.fbar_j[0];
    let f2 = &b.fbar_j[1];
    let v = b.bbar.clone().expect("qutrit has B̄");
    let u: Vec<C64> = b.ebar.iter().zip(f1).map(|(e, f)| e * f).collect();
    let corr = &dynamics.corr;
    let (dvv, duu, dvu, quartic) = match method {
        QuarticMethod::Separable => (
            real_square(&b.grid, corr, &v),
            real_square(&b.grid, corr, &u),
            exp_kernel_square(&b.grid, corr, &v, &u),
            qutrit_quartic(&b.grid, corr, &u, &v),
        ),
        QuarticMethod::BruteForce => {
            let alpha = |i: usize, k: usize| corr.alpha(b.grid.points()[i], b.grid.points()[k]);
            let herm = |x: &[C64]| {
                square_trapezoid_hermitian(&b.grid, |i, out| {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = alpha(i, k) * x[i].conj() * x[k];
                    }
                })
            };
            (
                herm(&v),
                herm(&u),
                square_trapezoid_general(&b.grid, |i, k| alpha(i, k) * v[i].conj() * u[k]),
                qutrit_quartic_brute_force(&b.grid, corr, &u, &v),
            )
        }
    };
    let k2 = kappa * kappa;
    let mean = (0..m)
        .map(|j| {
            let lead = (1.0 + f1[j] + f2[j]).norm_sqr();
            let second = f1[j].norm_sqr() * dvv[j] + 2.0 * (f1[j].conj() * dvu[j]).re + duu[j];
            (lead + k2 * second + k2 * k2 * quartic[j]) / 9.0
        })
        .collect();
    Ok(FidelityCurve::exact(b.grid, mean))
}

/// The qutrit quartic term for every upper limit, O(M²).
///
/// Row `i` of the kernel (`s = s_i`, `s₁ = s_k`, `k <= i`) needs
/// `A(k,i) = a_k + c b_k`, `A(i,k) = e^{-γ(s_i-s_k)} a_k` and
/// `C(i,k) = C(k,k) + conj(a_k) b_k`, where `a_k = A(k,k)`,
/// `c = Γγ/2` and `b_k = ∫_{s_k}^{s_i} e^{-γ(s'-s_k)} v(s') ds'` is built
/// backwards from `b_i = 0`. All pieces are trapezoid sums, so the result
/// equals the nested product-trapezoid evaluation.
pub fn qutrit_quartic(grid: &TimeGrid, corr: &CorrelationSpec, u: &[C64], v: &[C64]) -> Vec<f64> {
    let n = grid.len();
    let c = corr.variance();
    let e = decays(grid, corr);
    let half: Vec<f64> = (0..grid.intervals())
        .map(|k| 0.5 * grid.spacing(k))
        .collect();
    // b_k^{(k+1)}
    let step_b: Vec<C64> = (0..grid.intervals())
        .map(|k| half[k] * (v[k] + e[k] * v[k + 1]))
        .collect();
    let mut a = vec![ZERO; n];
    let mut ckk = vec![ZERO; n];
    for k in 0..grid.intervals() {
        a[k + 1] = e[k] * a[k] + half[k] * c * (e[k] * v[k] + v[k + 1]);
        let c_next_k = ckk[k] + a[k].conj() * step_b[k];
        let a_k_next = a[k] + c * step_b[k];
        ckk[k + 1] = c_next_k + half[k] * (v[k].conj() * a_k_next + v[k + 1].conj() * a[k + 1]);
    }
    square_trapezoid_hermitian(grid, |i, out| {
        let mut b = ZERO;
        let mut decay = 1.0;
        for k in (0..=i).rev() {
            if k < i {
                b = e[k] * b + step_b[k];
                decay *= e[k];
            }
            let cik = ckk[k] + a[k].conj() * b;
            let aki = a[k] + c * b;
            let aik = decay * a[k];
            out[k] = u[i] * u[k].conj() * (c * decay * cik + aki * aik.conj());
        }
    })
}

/// The qutrit quartic term from the nested trapezoid definitions, O(M⁴).
pub fn qutrit_quartic_brute_force(
    grid: &TimeGrid,
    corr: &CorrelationSpec,
    u: &[C64],
    v: &[C64],
) -> Vec<f64> {
    let n = grid.len();
    let pts = grid.points();
    let alpha = |i: usize, k: usize| corr.alpha(pts[i], pts[k]);
    // Trapezoid weights on [s_0, s_y].
    let weights = |y: usize| -> Vec<f64> {
        let mut w = vec![0.0; y + 1];
        for k in 0..y {
            let h = 0.5 * grid.spacing(k);
            w[k] += h;
            w[k + 1] += h;
        }
        w
    };
    let all_w: Vec<Vec<f64>> = (0..n).map(weights).collect();
    let big_a = |x: usize, y: usize| -> C64 {
        all_w[y]
            .iter()
            .enumerate()
            .map(|(j, w)| w * alpha(x, j) * v[j])
            .sum()
    };
    let big_c = |i: usize, k: usize| -> C64 {
        let mut acc = ZERO;
        for (j, wj) in all_w[i].iter().enumerate() {
            for (l, wl) in all_w[k].iter().enumerate() {
                acc += wj * wl * alpha(l, j) * v[j] * v[l].conj();
            }
        }
        acc
    };
    let mut kern = vec![ZERO; n * n];
    for i in 0..n {
        for k in 0..n {
            kern[i * n + k] =
                u[i] * u[k].conj() * (alpha(k, i) * big_c(i, k) + big_a(k, i) * big_a(i, k).conj());
        }
    }
    (0..n)
        .map(|t| {
            let w = &all_w[t];
            let mut acc = ZERO;
            for i in 0..=t {
                for k in 0..=t {
                    acc += w[i] * w[k] * kern[i * n + k];
                }
            }
            acc.re
        })
        .collect()
}

/// The evaluator for the dynamics' model family.
pub fn fidelity(dynamics: &Dynamics, coarsen: usize) -> Result<FidelityCurve> {
    match dynamics.model.family {
        Family::TwoLevel => fidelity_two_level(dynamics, coarsen),
        Family::Qutrit { .. } => fidelity_qutrit(dynamics, coarsen),
        Family::MultiLevel { .. } => fidelity_multilevel(dynamics, coarsen),
    }
}
