use std::sync::Arc;

use crate::{Error, Result};

/// Tolerance for matching requested breakpoints against grid points.
const EDGE_TOL: f64 = 1e-12;

/// A strictly increasing set of sample times.
///
/// Within any breakpoint-free interval the spacing is uniform and never larger
/// than `dt_nominal`. Clones share the point buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Arc<[f64]>,
    dt_nominal: f64,
}

impl TimeGrid {
    pub fn uniform(t_start: f64, t_end: f64, dt_nominal: f64) -> Result<Self> {
        Self::with_breakpoints(t_start, t_end, dt_nominal, &[])
    }

    /// Builds a grid that contains every breakpoint inside `[t_start, t_end]`
    /// as an exact grid point.
    pub fn with_breakpoints(
        t_start: f64,
        t_end: f64,
        dt_nominal: f64,
        breakpoints: &[f64],
    ) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::InvalidGrid(format!(
                "need t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if !(dt_nominal > 0.0 && dt_nominal.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "dt must be positive, got {dt_nominal}"
            )));
        }
        let scale = t_end.abs().max(t_start.abs()).max(1.0);
        let tol = EDGE_TOL * scale;

        let mut knots = vec![t_start];
        let mut sorted: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|b| b.is_finite() && *b > t_start + tol && *b < t_end - tol)
            .collect();
        sorted.sort_by(f64::total_cmp);
        for b in sorted {
            if b - knots.last().unwrap() > tol {
                knots.push(b);
            }
        }
        knots.push(t_end);

        let mut points = Vec::new();
        for pair in knots.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let n = ((b - a) / dt_nominal - 1e-9).ceil().max(1.0) as usize;
            let h = (b - a) / n as f64;
            points.push(a);
            for k in 1..n {
                points.push(a + k as f64 * h);
            }
        }
        points.push(t_end);
        Self::from_points(points, dt_nominal)
    }

    /// Wraps explicit points after checking the invariants.
    pub fn from_points(points: Vec<f64>, dt_nominal: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid point".into()));
        }
        for w in points.windows(2) {
            let h = w[1] - w[0];
            if h <= 0.0 {
                return Err(Error::InvalidGrid(format!(
                    "grid not strictly increasing at t = {}",
                    w[0]
                )));
            }
            if h > dt_nominal * (1.0 + 1e-9) {
                return Err(Error::InvalidGrid(format!(
                    "spacing {h} exceeds dt_nominal {dt_nominal} at t = {}",
                    w[0]
                )));
            }
        }
        Ok(TimeGrid {
            points: points.into(),
            dt_nominal,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.points[0]
    }

    pub fn t_end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn dt_nominal(&self) -> f64 {
        self.dt_nominal
    }

    /// Number of intervals, `len() - 1`.
    pub fn intervals(&self) -> usize {
        self.points.len() - 1
    }

    /// Width of interval `k`, i.e. `t[k+1] - t[k]`.
    pub fn spacing(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.intervals())
            .map(|k| self.spacing(k))
            .fold(0.0, f64::max)
    }

    /// The grid with every interval midpoint inserted. Point `k` of `self` is
    /// point `2k` of the result.
    pub fn refined(&self) -> TimeGrid {
        let mut pts = Vec::with_capacity(2 * self.len() - 1);
        for w in self.points.windows(2) {
            pts.push(w[0]);
            pts.push(0.5 * (w[0] + w[1]));
        }
        pts.push(self.t_end());
        TimeGrid {
            points: pts.into(),
            dt_nominal: 0.5 * self.dt_nominal,
        }
    }

    /// Every interval split into `m` equal parts. Point `k` of `self` is point
    /// `m·k` of the result.
    pub fn subdivided(&self, m: usize) -> TimeGrid {
        let m = m.max(1);
        let mut pts = Vec::with_capacity(m * self.intervals() + 1);
        for w in self.points.windows(2) {
            for i in 0..m {
                pts.push(w[0] + (w[1] - w[0]) * i as f64 / m as f64);
            }
        }
        pts.push(self.t_end());
        TimeGrid {
            points: pts.into(),
            dt_nominal: self.dt_nominal / m as f64,
        }
    }

    /// Index of the grid point equal to `t` within `1e-12` (relative to the
    /// grid's time scale).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = EDGE_TOL * self.t_end().abs().max(1.0);
        let k = self.points.partition_point(|&p| p < t - tol);
        (k < self.len() && (self.points[k] - t).abs() <= tol).then_some(k)
    }

    /// Index of the first grid point not before `t`.
    pub fn index_at_or_after(&self, t: f64) -> usize {
        let tol = EDGE_TOL * self.t_end().abs().max(1.0);
        self.points
            .partition_point(|&p| p < t - tol)
            .min(self.len() - 1)
    }

    /// A grid made of the selected points (indices must be increasing).
    pub fn subset(&self, indices: &[usize]) -> Result<TimeGrid> {
        let pts: Vec<f64> = indices.iter().map(|&i| self.points[i]).collect();
        let dt = pts
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(self.dt_nominal, f64::max);
        TimeGrid::from_points(pts, dt)
    }
}
