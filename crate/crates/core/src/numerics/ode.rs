use super::{TimeGrid, VectorSeries};
use crate::{Error, Result, C64};

/// Where an RK4 stage is evaluated.
///
/// `interval` is the grid interval being stepped across; `offset` is 0, 1 or 2
/// for the start, midpoint and end of that interval. Right-hand sides use the
/// interval to resolve piecewise-constant inputs (pulse edges only ever sit on
/// interval boundaries) and the half-step index [`StagePoint::fine`] to look up
/// quantities sampled on the refined grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePoint {
    pub interval: usize,
    pub offset: usize,
    pub t: f64,
}

impl StagePoint {
    /// Index of this stage time on [`TimeGrid::refined`].
    pub fn fine(&self) -> usize {
        2 * self.interval + self.offset
    }
}

/// Reusable classical RK4 stepper for complex vector states.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<C64>,
    k2: Vec<C64>,
    k3: Vec<C64>,
    k4: Vec<C64>,
    tmp: Vec<C64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); dim];
        Rk4 {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }

    /// Advances `y` across `[t0, t1]`, the `interval`-th grid interval.
    pub fn step<F>(&mut self, rhs: &F, interval: usize, t0: f64, t1: f64, y: &mut [C64])
    where
        F: Fn(StagePoint, &[C64], &mut [C64]) + ?Sized,
    {
        let h = t1 - t0;
        let at = |offset, t| StagePoint {
            interval,
            offset,
            t,
        };
        let tm = t0 + 0.5 * h;

        rhs(at(0, t0), y, &mut self.k1);
        for ((t, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k1) {
            *t = yi + 0.5 * h * k;
        }
        rhs(at(1, tm), &self.tmp, &mut self.k2);
        for ((t, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k2) {
            *t = yi + 0.5 * h * k;
        }
        rhs(at(1, tm), &self.tmp, &mut self.k3);
        for ((t, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k3) {
            *t = yi + h * k;
        }
        rhs(at(2, t1), &self.tmp, &mut self.k4);
        let w = h / 6.0;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += w * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// Stage derivatives of the most recent step, in order k1..k4.
    pub fn stages(&self) -> [&[C64]; 4] {
        [&self.k1, &self.k2, &self.k3, &self.k4]
    }
}

pub(crate) fn all_finite(y: &[C64]) -> bool {
    y.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Integrates `y' = rhs(t, y)` with classical RK4 across every interval of
/// `grid` and returns the solution at every grid point.
pub fn rk4_integrate<F>(rhs: F, y0: &[C64], grid: &TimeGrid) -> Result<VectorSeries>
where
    F: Fn(StagePoint, &[C64], &mut [C64]),
{
    if !all_finite(y0) {
        return Err(Error::NonFinite { t: grid.t_start() });
    }
    let pts = grid.points();
    let mut stepper = Rk4::new(y0.len());
    let mut y = y0.to_vec();
    let mut values = Vec::with_capacity(pts.len());
    values.push(y.clone());
    for k in 0..grid.intervals() {
        stepper.step(&rhs, k, pts[k], pts[k + 1], &mut y);
        if !all_finite(&y) {
            return Err(Error::NonFinite { t: pts[k + 1] });
        }
        values.push(y.clone());
    }
    Ok(VectorSeries {
        grid: grid.clone(),
        values,
    })
}
