//! Outer loop: approximate dual subgradient method with primal averaging.
//!
//! Per MPC step the loop fixes a step size and an inner suboptimality from
//! the cost-decrease budget, runs an a-priori number of dual iterations
//! (each one inner Jacobi solve plus a projected subgradient step), and
//! returns the primal average, which is strictly feasible for the original
//! constraints once the iteration count from the violation bound has been
//! exhausted.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inner_jacobi::{run_inner, ContractionCertificate, JacobiDriver};
use crate::tighten::TightenedProblem;
use crate::tol;

/// Parameters of one outer solve, derived from the tightened problem and
/// the cost-decrease budget.
#[derive(Debug, Clone, Copy)]
pub struct OuterParams {
    /// Cost-decrease budget Δ_t.
    pub delta: f64,
    /// Dual step size α_t = Δ_t / L'_t².
    pub alpha: f64,
    /// Inner suboptimality ε_t = Δ_t / 2.
    pub eps: f64,
    /// Outer iteration count k̄_t.
    pub k_bar: usize,
    /// Slater margin of the tightened constraints.
    pub gamma: f64,
    /// Tightening constant.
    pub c: f64,
    /// Norm bound of the tightened constraints.
    pub l_prime: f64,
}

/// How much per-iteration state to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryDetail {
    /// Scalar diagnostics only (violation and cost of the running average,
    /// Lagrangian value, sweep count).
    #[default]
    Scalars,
    /// Additionally the dual vector and primal iterate of every iteration.
    Vectors,
}

/// Options of the outer solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOpts {
    pub history: HistoryDetail,
    /// Also record every inner sweep iterate (implies `Vectors`-grade cost).
    pub record_inner: bool,
    /// Run the block solves of each sweep in parallel.
    pub parallel: bool,
    /// Stop as soon as the running primal average is strictly feasible for
    /// the original constraints. Off by default: the a-priori iteration
    /// count is the certified behavior.
    pub early_exit: bool,
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub k: usize,
    /// `||[g'(u_hat^(k))]^+||_2` of the running primal average.
    pub violation_hat: f64,
    /// `f(u_hat^(k))` of the running primal average.
    pub f_hat: f64,
    /// Lagrangian value `L'(u^(k), mu^(k))`.
    pub lagrangian_value: f64,
    pub inner_sweeps: usize,
    pub mu: Option<DVector<f64>>,
    pub u: Option<DVector<f64>>,
    pub inner_iterates: Option<Vec<DVector<f64>>>,
}

/// Solver output for one MPC step.
#[derive(Debug, Clone)]
pub struct StepSolution {
    /// Primal average over the executed iterations.
    pub u_hat: DVector<f64>,
    /// Cost `f(u_hat, x_t)`.
    pub f_value: f64,
    /// `||[g(u_hat, x_t)]^+||_2` against the original constraints.
    pub violation: f64,
    pub k_used: usize,
    pub total_inner_sweeps: usize,
    pub feasible: bool,
    pub history: Vec<IterRecord>,
}

/// Cost-decrease budget `Δ_t = x'Qx + u'Ru` from the previous step's state
/// and applied input.
pub fn compute_delta(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
) -> Result<f64> {
    let delta = (x_prev.transpose() * q * x_prev)[(0, 0)] + (u_prev.transpose() * r * u_prev)[(0, 0)];
    if delta <= tol::DEGENERATE_DELTA {
        return Err(Error::DegenerateDelta(delta));
    }
    Ok(delta)
}

/// Step size and inner suboptimality from the budget: `alpha = Δ/L'²`,
/// `eps = Δ/2`, which satisfies `alpha L'²/2 + eps <= Δ` with equality.
pub fn compute_step_params(tight: &TightenedProblem<'_>, delta: f64) -> OuterParams {
    assert!(delta > 0.0 && tight.l_prime > 0.0);
    let alpha = delta / (tight.l_prime * tight.l_prime);
    let eps = 0.5 * delta;
    debug_assert!(alpha * tight.l_prime * tight.l_prime / 2.0 + eps <= delta * (1.0 + 1e-12));
    OuterParams {
        delta,
        alpha,
        eps,
        k_bar: 0,
        gamma: tight.gamma,
        c: tight.c,
        l_prime: tight.l_prime,
    }
}

/// A-priori outer iteration count:
/// `ceil( (1/(alpha c)) ( (3/gamma) f(u_bar) + alpha L'²/(2 gamma) + alpha L' ) )`.
pub fn outer_iterations_needed(params: &OuterParams, f_at_slater: f64) -> usize {
    assert!(params.gamma > 0.0 && params.c > 0.0 && params.alpha > 0.0);
    let l2 = params.l_prime * params.l_prime;
    let inner = 3.0 / params.gamma * f_at_slater
        + params.alpha * l2 / (2.0 * params.gamma)
        + params.alpha * params.l_prime;
    let k = inner / (params.alpha * params.c);
    (k.ceil() as usize).max(1)
}

/// Projected subgradient step `max(0, mu + alpha d)` componentwise.
pub fn dual_update(mu: &DVector<f64>, alpha: f64, d: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mu.len(), |i, _| (mu[i] + alpha * d[i]).max(0.0))
}

/// Running mean of the first `k` primal iterates.
pub fn primal_average(primal_sum: &DVector<f64>, k: usize) -> DVector<f64> {
    assert!(k >= 1);
    primal_sum / k as f64
}

fn positive_part_norm(v: &DVector<f64>) -> f64 {
    v.iter()
        .map(|&x| x.max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs the full outer loop and forms the primal average. The returned
/// solution is checked against the original constraints; a violation there
/// means the certificates were broken upstream and is raised as an error.
pub fn solve_tightened_step(
    tight: &TightenedProblem<'_>,
    params: &OuterParams,
    cert: &ContractionCertificate,
    opts: SolveOpts,
) -> Result<StepSolution> {
    assert!(params.k_bar >= 1, "outer iteration count must be set");
    let p = tight.base;
    let mut driver = JacobiDriver::new(p, opts.parallel);
    let mut mu = DVector::zeros(p.m_c());
    let mut warm = p.clamp_to_box(&DVector::zeros(p.n_u()));
    let mut primal_sum = DVector::zeros(p.n_u());
    // Affine part of g': Xi x + tau + c·1, fixed during the step.
    let affine = &p.xi * &tight.x + p.tau.add_scalar(tight.c);
    let mut history = Vec::with_capacity(params.k_bar.min(1 << 16));
    let mut total_inner_sweeps = 0;
    let mut k_used = params.k_bar;

    for k in 0..params.k_bar {
        let inner = run_inner(tight, &mu, params.eps, cert, &warm, &mut driver, opts.record_inner)?;
        total_inner_sweeps += inner.sweeps;
        // delta-subgradient of the dual at mu^(k): g'(u^(k)).
        let d = &affine + p.theta_times_u_blockwise(&inner.u);
        let lagrangian_value = p.eval_cost(&inner.u, &tight.x)? + mu.dot(&d);
        primal_sum += &inner.u;
        let u_hat_k = primal_average(&primal_sum, k + 1);
        let g_prime_hat = &affine + p.theta_times_u_blockwise(&u_hat_k);
        let record = IterRecord {
            k,
            violation_hat: positive_part_norm(&g_prime_hat),
            f_hat: p.eval_cost(&u_hat_k, &tight.x)?,
            lagrangian_value,
            inner_sweeps: inner.sweeps,
            mu: (opts.history == HistoryDetail::Vectors).then(|| mu.clone()),
            u: (opts.history == HistoryDetail::Vectors).then(|| inner.u.clone()),
            inner_iterates: inner.iterates,
        };
        history.push(record);
        mu = dual_update(&mu, params.alpha, &d);
        warm = inner.u;
        if opts.early_exit {
            let max_g = g_prime_hat.max() - tight.c;
            if max_g < 0.0 {
                k_used = k + 1;
                break;
            }
        }
    }

    let u_hat = primal_average(&primal_sum, k_used);
    let g_hat = p.eval_constraints(&u_hat, &tight.x)?;
    let worst = g_hat.max();
    let feasible = worst < 0.0;
    if !feasible {
        return Err(Error::FeasibilityCertificateFailed { worst });
    }
    Ok(StepSolution {
        f_value: p.eval_cost(&u_hat, &tight.x)?,
        violation: positive_part_norm(&g_hat),
        u_hat,
        k_used,
        total_inner_sweeps,
        feasible,
        history,
    })
}

/// Outcome of the certified-bound audit.
#[derive(Debug, Clone, Copy)]
pub struct BoundReport {
    pub iterations_checked: usize,
    /// Largest ratio lhs/rhs seen in the violation bound.
    pub max_violation_ratio: f64,
    /// Largest `f(u_hat^(k)) - bound` gap seen in the cost bound.
    pub max_cost_excess: f64,
}

/// Audits the per-iteration violation and cost bounds against the recorded
/// history. `f_star_tight` is the exact optimum of the tightened problem
/// (test/oracle input).
pub fn check_bounds(
    sol: &StepSolution,
    params: &OuterParams,
    f_at_slater: f64,
    f_star_tight: f64,
) -> Result<BoundReport> {
    let l2 = params.l_prime * params.l_prime;
    let mut max_ratio: f64 = 0.0;
    let mut max_excess = f64::NEG_INFINITY;
    for rec in &sol.history {
        let k = (rec.k + 1) as f64;
        let viol_rhs = (3.0 / params.gamma * f_at_slater
            + params.alpha * l2 / (2.0 * params.gamma)
            + params.alpha * params.l_prime)
            / (k * params.alpha);
        if rec.violation_hat > viol_rhs * (1.0 + 1e-8) {
            return Err(Error::BoundViolated {
                k: rec.k + 1,
                lhs: rec.violation_hat,
                rhs: viol_rhs,
            });
        }
        max_ratio = max_ratio.max(rec.violation_hat / viol_rhs);
        let cost_rhs = f_star_tight + params.alpha * l2 / 2.0 + params.eps;
        if rec.f_hat > cost_rhs + 1e-8 * (1.0 + cost_rhs.abs()) {
            return Err(Error::BoundViolated {
                k: rec.k + 1,
                lhs: rec.f_hat,
                rhs: cost_rhs,
            });
        }
        max_excess = max_excess.max(rec.f_hat - cost_rhs);
    }
    Ok(BoundReport {
        iterations_checked: sol.history.len(),
        max_violation_ratio: max_ratio,
        max_cost_excess: max_excess,
    })
}
