use rayon::prelude::*;

use super::{ComplexSeries, TimeGrid};
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Composite trapezoid weights for integrating over the whole grid.
pub fn trapezoid_weights(grid: &TimeGrid) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..grid.intervals() {
        let h = 0.5 * grid.spacing(k);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// Running trapezoid integral `∫_{t_0}^{t_k} f`, zero at the first point.
pub fn cumulative_trapezoid(series: &ComplexSeries) -> Result<ComplexSeries> {
    if series
        .values
        .iter()
        .any(|z| !(z.re.is_finite() && z.im.is_finite()))
    {
        return Err(Error::InvalidParameter("non-finite integrand".into()));
    }
    let g = &series.grid;
    let v = &series.values;
    let mut out = Vec::with_capacity(v.len());
    let mut acc = ZERO;
    out.push(acc);
    for k in 0..g.intervals() {
        acc += 0.5 * g.spacing(k) * (v[k] + v[k + 1]);
        out.push(acc);
    }
    ComplexSeries::new(g.clone(), out)
}

/// Running Simpson integral over a refined grid (`values[2k]` at coarse
/// points, `values[2k+1]` at interval midpoints). Returns one value per
/// coarse point.
pub fn cumulative_simpson_midpoints(fine: &TimeGrid, values: &[C64]) -> Vec<C64> {
    assert_eq!(fine.len(), values.len());
    assert!(
        fine.len() % 2 == 1,
        "refined grid has an odd number of points"
    );
    let pts = fine.points();
    let n = (fine.len() - 1) / 2;
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = ZERO;
    out.push(acc);
    for k in 0..n {
        let h = pts[2 * k + 2] - pts[2 * k];
        acc += h / 6.0 * (values[2 * k] + 4.0 * values[2 * k + 1] + values[2 * k + 2]);
        out.push(acc);
    }
    out
}

/// Weights a node carries when it lies strictly inside the integration range.
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

/// Product-trapezoid `∬_{[t_0,t_K]^2} f(s, s')` for every `K`, for a kernel
/// with `f(s', s) = conj f(s, s')`.
///
/// `row(i, out)` must fill `out[k] = f(t_i, t_k)` for `k <= i`. Rows are
/// independent and evaluated in parallel; the final scan is sequential, so
/// the result does not depend on the thread count.
pub fn square_trapezoid_hermitian<R>(grid: &TimeGrid, row: R) -> Vec<f64>
where
    R: Fn(usize, &mut [C64]) + Sync,
{
    let n = grid.len();
    let w = interior_weights(grid);
    let rows: Vec<(C64, C64)> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![ZERO; n],
            |buf, i| {
                row(i, &mut buf[..=i]);
                let rho: C64 = buf[..i].iter().zip(&w[..i]).map(|(f, wk)| f * wk).sum();
                (rho, buf[i])
            },
        )
        .collect();

    let mut out = Vec::with_capacity(n);
    let mut closed = 0.0;
    for (i, &(rho, diag)) in rows.iter().enumerate() {
        let end_w = if i > 0 {
            0.5 * grid.spacing(i - 1)
        } else {
            0.0
        };
        out.push(closed + 2.0 * end_w * rho.re + end_w * end_w * diag.re);
        closed += 2.0 * w[i] * rho.re + w[i] * w[i] * diag.re;
    }
    out
}

/// Product-trapezoid `∬_{[t_0,t_K]^2} f(s, s')` for every `K`, general kernel.
pub fn square_trapezoid_general<F>(grid: &TimeGrid, f: F) -> Vec<C64>
where
    F: Fn(usize, usize) -> C64 + Sync,
{
    let n = grid.len();
    let w = interior_weights(grid);
    let rows: Vec<(C64, C64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cross = ZERO;
            for (k, wk) in w.iter().enumerate().take(i) {
                cross += wk * (f(i, k) + f(k, i));
            }
            (cross, f(i, i))
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    let mut closed = ZERO;
    for (i, &(cross, diag)) in rows.iter().enumerate() {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn real(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> ComplexSeries {
        ComplexSeries::from_fn(grid, |t| C64::new(f(t), 0.0))
    }

    #[test]
    fn unit_integrand() {
        let g = TimeGrid::uniform(0.0, 1.0, 0.01).unwrap();
        let r = cumulative_trapezoid(&real(&g, |_| 1.0)).unwrap();
        assert_eq!(r.values[0], ZERO);
        assert!((r.last().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_and_exponential() {
        let g = TimeGrid::uniform(0.0, 1.0, 1e-3).unwrap();
        let r = cumulative_trapezoid(&real(&g, |t| t)).unwrap();
        assert!((r.last().re - 0.5).abs() < 1e-6);

        let g = TimeGrid::uniform(0.0, 2.0, 1e-3).unwrap();
        let r = cumulative_trapezoid(&real(&g, |t| (-0.5 * t).exp())).unwrap();
        assert!((r.last().re - 1.264_241_1).abs() < 1e-5);
    }

    #[test]
    fn second_order_convergence() {
        let exact = 1.0 - 3.0f64.cos();
        let err = |dt| {
            let g = TimeGrid::uniform(0.0, 3.0, dt).unwrap();
            (cumulative_trapezoid(&real(&g, f64::sin)).unwrap().last().re - exact).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((3.8..=4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_non_finite() {
        let g = TimeGrid::uniform(0.0, 1.0, 0.5).unwrap();
        assert!(cumulative_trapezoid(&real(&g, |t| if t > 0.7 { f64::NAN } else { t })).is_err());
    }

    #[test]
    fn simpson_on_midpoints_is_exact_for_cubics() {
        let g = TimeGrid::uniform(0.0, 2.0, 0.5).unwrap();
        let fine = g.refined();
        let v: Vec<C64> = fine
            .points()
            .iter()
            .map(|&t| C64::new(t * t * t, 0.0))
            .collect();
        let r = cumulative_simpson_midpoints(&fine, &v);
        assert_eq!(r.len(), g.len());
        assert!((r.last().unwrap().re - 4.0).abs() < 1e-13);
    }

    #[test]
    fn square_integrals_match_direct_sum() {
        let g = TimeGrid::from_points(vec![0.0, 0.1, 0.35, 0.4, 0.8], 0.5).unwrap();
        let p = g.points().to_vec();
        let kern = |i: usize, k: usize| {
            let (a, b) = (p[i], p[k]);
            C64::new((-(a - b).abs()).exp(), 0.0) * C64::new(0.0, 2.0 * (a - b)).exp()
        };
        let herm = square_trapezoid_hermitian(&g, |i, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = kern(i, k);
            }
        });
        let gen = square_trapezoid_general(&g, kern);
        for big_k in 0..g.len() {
            let sub = g.subset(&(0..=big_k).collect::<Vec<_>>());
            let direct = match sub {
                Ok(sub) => {
                    let w = trapezoid_weights(&sub);
                    let mut s = ZERO;
                    for i in 0..=big_k {
                        for k in 0..=big_k {
                            s += w[i] * w[k] * kern(i, k);
                        }
                    }
                    s
                }
                Err(_) => ZERO,
            };
            assert!((herm[big_k] - direct.re).abs() < 1e-14);
            assert!((gen[big_k] - direct).norm() < 1e-14);
        }
    }
}
