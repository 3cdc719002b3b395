//! Small dense complex linear algebra, fixed-step RK4 and quadrature.

mod grid;
mod linalg;
mod ode;
mod quad;

pub use grid::TimeGrid;
pub use linalg::CMatrix;
pub use ode::{rk4_integrate, Rk4, StagePoint};
pub use quad::{
    cumulative_simpson_midpoints, cumulative_trapezoid, square_trapezoid_general,
    square_trapezoid_hermitian, trapezoid_weights,
};

use crate::{Error, Result, C64};

/// Complex samples of a scalar function on a grid.
#[derive(Debug, Clone)]
pub struct ComplexSeries {
    pub grid: TimeGrid,
    pub values: Vec<C64>,
}

impl ComplexSeries {
    pub fn new(grid: TimeGrid, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(ComplexSeries { grid, values })
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> C64) -> Self {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        ComplexSeries {
            grid: grid.clone(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> C64 {
        *self.values.last().expect("series is never empty")
    }
}

/// Vector-valued samples (one state vector per grid point).
#[derive(Debug, Clone)]
pub struct VectorSeries {
    pub grid: TimeGrid,
    pub values: Vec<Vec<C64>>,
}

/// Square matrices of one dimension, one per grid point.
#[derive(Debug, Clone)]
pub struct MatrixSeries {
    pub grid: TimeGrid,
    pub values: Vec<CMatrix>,
}

impl MatrixSeries {
    pub fn new(grid: TimeGrid, values: Vec<CMatrix>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if let Some(first) = values.first() {
            let n = first.rows();
            if values.iter().any(|m| m.rows() != n || m.cols() != n) {
                return Err(Error::InvalidParameter(
                    "matrix series must hold square matrices of one dimension".into(),
                ));
            }
        }
        Ok(MatrixSeries { grid, values })
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |m| m.rows())
    }
}
