//! Numerical laboratory for the null-controllability cost of transport-diffusion
//! equations with small viscosity.
//!
//! The crate is organised bottom-up: [`geometry`] and [`velocity`] describe the
//! problem instance, [`flow`] integrates characteristics and checks the flushing
//! condition, [`pde`] holds the finite-volume solvers, [`costlab`] turns them into
//! observability constants and minimal-norm controls, and [`analysis`] evaluates
//! the weighted estimates (Agmon, dissipation, Carleman) on computed solutions.

// `!(x > 0.0)` rejects NaN along with non-positive values on purpose, and
// index loops over coupled arrays read closer to the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod costlab;
pub mod error;
pub mod exec;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod pde;
pub mod velocity;

pub use error::{Error, Result};
pub use exec::Execution;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
