//! Non-Markovian quantum state diffusion for a one-dimensional subspace of an
//! open system, with Feshbach PQ partitioning and rectangular pulse control.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: time grids, small dense complex matrices, RK4, quadrature.
//! * [`noise`]: Ornstein-Uhlenbeck colored noise `z*_t` and correlation estimates.
//! * [`control`]: the rectangular pulse train and the driven detuning `E(t)`.
//! * [`models`]: two-level, qutrit and (N+1)-level models and their Riccati
//!   coefficient equations.
//! * [`qsd`]: stochastic trajectories of the linear QSD equation and ensemble
//!   fidelity.
//! * [`pq`]: PQ block partitioning, time-ordered propagators and the closed
//!   one-dimensional equation for the P amplitude.
//! * [`analytic`]: closed-form noise-averaged fidelity evaluators.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod control;
mod error;
pub mod models;
pub mod noise;
pub mod numerics;
pub mod pq;
pub mod qsd;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
