//! Dynamical low-rank integration of the kinetic chemical master equation.
//!
//! The reaction network's species are split into two partitions and the
//! probability distribution is kept in the factored form `X1 S X2^T`, where
//! the columns of `X1` and `X2` are orthonormal functions on the partition
//! grids. Factors are advanced with the first-order (Lie–Trotter) or
//! second-order (Strang) projector-splitting integrator. A dense
//! finite-state-projection solver and a Gillespie simulator provide
//! reference solutions.

pub mod cli;
pub mod coefficients;
pub mod error;
pub mod initial;
pub mod integrator;
pub mod lowrank;
pub mod model;
pub mod observe;
pub mod reference;
pub mod ssa;
pub mod statespace;

pub use error::{Error, Result};
