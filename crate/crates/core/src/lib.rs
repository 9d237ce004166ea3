//! Semidefinite calibration kernel for the Libor Market Model.
//!
//! Swaptions are priced as lognormal baskets of forward rates, so every
//! cumulative Black variance is a linear form `Tr(Ω_k X)` of the forward
//! covariance matrix `X`. Calibrating to caplets and swaptions is then a
//! semidefinite program, and its dual solution carries the sensitivities,
//! the superreplication bounds and the static hedge.
//!
//! The crate is `no_std` and only needs `alloc`. Module map:
//!
//! - [`linalg`]: dense symmetric kernel (Cholesky, Jacobi eigensolver,
//!   `svec`, symmetric Kronecker operators).
//! - [`cone`]: primal-dual interior-point solver (AHO direction,
//!   Mehrotra predictor-corrector) for block-diagonal SDPs.
//! - [`market`]: curve, swap weights, Black-76 and the `Ω_k` builders.
//! - [`calibration`]: the calibration programs.
//! - [`sensitivity`]: dual sensitivities and the one-step Newton update.
//! - [`hedging`]: price bounds, static hedges, Gamma hedging.

#![no_std]

extern crate alloc;

pub mod calibration;
pub mod cone;
pub mod error;
pub mod hedging;
pub mod linalg;
pub mod market;
pub mod math;
pub mod sensitivity;

mod simplex;

pub use error::{Error, Result};
pub use linalg::{BlockDiagMatrix, Matrix, SVec, SymMatrix};
