//! Sparse recovery with ISTA, FISTA and their architecture-searched variants
//! whose step size and per-slot operation choice are adapted online by
//! hypergradient descent.

pub mod arch_forward;
pub mod classic_solvers;
pub mod error;
pub mod harness;
pub mod hgd_solver;
pub mod hypergrad;
pub mod problem_gen;
pub mod smooth_math;

pub use error::{Error, Result};
