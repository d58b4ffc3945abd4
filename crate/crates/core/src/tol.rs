//! Numeric tolerances and enumeration caps used across the crate.
//!
//! Strict inequalities in the problem statement (interior points, Schur
//! margins, Slater margins) are tested with a uniform numeric slack so that
//! the checks are decidable in floating point. Caps bound the exact
//! enumeration routines; exceeding a cap is a hard error, never a silent
//! approximation.

/// Slack for "strictly inside" tests on polytopes and boxes.
pub const INTERIOR_STRICT: f64 = 1e-9;

/// A matrix is accepted as Schur when its spectral radius is below 1 minus
/// this margin.
pub const SCHUR_MARGIN: f64 = 1e-9;

/// Below this value the cost-decrease budget Δ_t is considered degenerate
/// and the closed loop reports convergence instead of solving.
pub const DEGENERATE_DELTA: f64 = 1e-12;

/// State norm below which the closed loop reports convergence to the origin.
pub const CONVERGED_STATE_NORM: f64 = 1e-8;

/// Fixed-point tolerance of the projected-Newton fallback in the local
/// block solver.
pub const LOCAL_SOLVE_TOL: f64 = 1e-12;

/// Primal feasibility slack accepted when screening active-set candidates.
pub const KKT_FEASIBILITY_TOL: f64 = 1e-9;

/// Multiplier / gradient sign slack accepted when screening active-set
/// candidates.
pub const KKT_SIGN_TOL: f64 = 1e-9;

/// Componentwise agreement required between the distributed harness and the
/// monolithic solver.
pub const HARNESS_EQUIVALENCE: f64 = 1e-12;

/// Default cap on the number of polytope vertices a certificate check will
/// enumerate.
pub const VERTEX_CAP_DEFAULT: usize = 4096;

/// Largest decision dimension for which the box-QP oracle enumerates all
/// 3^n face patterns.
pub const BOX_QP_MAX_DIM: usize = 16;

/// Largest total row count (coupled rows plus box faces) accepted by the
/// constrained-QP oracle.
pub const ACTIVE_SET_MAX_ROWS: usize = 20;

/// Largest per-subsystem block dimension solved by exact face enumeration in
/// the Jacobi inner loop; larger blocks fall back to projected Newton.
pub const LOCAL_ENUM_MAX_DIM: usize = 12;

/// Largest input dimension for which the initial norm bound L_0 is computed
/// exactly over the 2^n box vertices.
pub const L0_VERTEX_MAX_DIM: usize = 20;
