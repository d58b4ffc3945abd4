//! Hierarchical MPC for coupled linear subsystems via dual decomposition
//! with constraint tightening.
//!
//! Per control step the library solves a tightened version of the condensed
//! MPC problem through its dual: an approximate subgradient outer loop with
//! primal averaging, whose Lagrangian subproblems are solved by a parallel
//! Jacobi iteration across subsystems. Both iteration counts are fixed a
//! priori from certified constants (Slater margins, constraint norm bounds,
//! a Jacobi contraction modulus), so the loop runs a known finite number of
//! iterations and still returns a strictly feasible input sequence, and the
//! closed-loop cost decreases step over step.
//!
//! Module map:
//! - [`model`]: network specification, aggregate assembly, structural checks
//! - [`condense`]: state elimination to the dense cost/constraint form
//! - [`tighten`]: constraint tightening, Slater and norm-bound bookkeeping
//! - [`inner_jacobi`]: contraction certificate and the Jacobi inner loop
//! - [`outer_subgrad`]: dual subgradient outer loop with primal averaging
//! - [`mpc_loop`]: closed-loop driver with stability monitoring
//! - [`coord_harness`]: coordinator/agent message-passing execution
//! - [`oracle`]: exact small-instance reference solvers
//! - [`config`], [`trace`], [`certify`]: user surface (documents, traces,
//!   pre-flight checks)

pub mod certify;
pub mod condense;
pub mod config;
pub mod coord_harness;
pub mod error;
pub mod inner_jacobi;
pub mod model;
pub mod mpc_loop;
pub mod oracle;
pub mod outer_subgrad;
pub mod tighten;
pub mod tol;
pub mod trace;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
