//! Closed-loop driver: per step it builds the tightened problem, runs the
//! certified solve, applies the first input block, advances the plant
//! exactly, shifts the Slater vector, propagates the norm bound, and
//! monitors the cost decrease that makes the MPC value a Lyapunov function.

use nalgebra::DVector;

use crate::condense::{condense, CondensedProblem};
use crate::coord_harness::{
    message_stats, run_distributed_step, CommSets, MessageCounts, NetworkLog,
};
use crate::error::{Error, Result};
use crate::inner_jacobi::{certify_contraction, ContractionCertificate};
use crate::model::{assemble_aggregate, AggregateModel, CouplingGraph, NetworkSpec};
use crate::outer_subgrad::{
    compute_delta, compute_step_params, outer_iterations_needed, solve_tightened_step, SolveOpts,
    StepSolution,
};
use crate::tighten::{
    build_tightened, initial_norm_bound, shift_slater, update_norm_bound, SlaterCertificate,
};
use crate::tol;

/// Everything that stays fixed across MPC steps.
#[derive(Debug)]
pub struct StepContext<'a> {
    pub network: &'a NetworkSpec,
    pub model: AggregateModel,
    pub problem: CondensedProblem,
    pub cert: ContractionCertificate,
    pub comm: CommSets,
}

impl<'a> StepContext<'a> {
    /// Validates the network, condenses it, and certifies the contraction.
    pub fn new(network: &'a NetworkSpec) -> Result<Self> {
        network.validate()?;
        let model = assemble_aggregate(network)?;
        let problem = condense(network)?;
        let cert = certify_contraction(&problem)?;
        let graph = CouplingGraph::from_network(network);
        let comm = CommSets::build(&problem, &graph, network.horizon)?;
        Ok(StepContext {
            network,
            model,
            problem,
            cert,
            comm,
        })
    }
}

/// Per-step options of the closed loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct MpcOptions {
    /// Cost-decrease budget for the first step; defaults to half the first
    /// stage cost `0.5 x0' Q x0`.
    pub delta0: Option<f64>,
    pub solver: SolveOpts,
    /// Execute each step through the coordinator/agent harness.
    pub distributed: bool,
}

/// Mutable closed-loop state carried between steps.
#[derive(Debug, Clone)]
pub struct MpcState {
    pub t: usize,
    pub x: DVector<f64>,
    /// Previous state and applied input, absent at t = 0.
    pub prev: Option<(DVector<f64>, DVector<f64>)>,
    /// Slater vector for the upcoming step.
    pub slater_vec: DVector<f64>,
    /// Current norm bound L_t.
    pub l: f64,
    /// Cost of the previous full solution.
    pub f_prev: Option<f64>,
}

/// One row of the closed-loop history.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u_applied: DVector<f64>,
    pub f_value: f64,
    /// Violation of the original constraints at the primal average
    /// (zero on every certified run).
    pub violation_norm: f64,
    pub delta: f64,
    pub alpha: f64,
    pub eps: f64,
    pub k_bar: usize,
    pub total_inner_sweeps: usize,
    pub lyapunov_ok: bool,
    pub message_counts: Option<MessageCounts>,
}

/// Why a step did not execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergedReason {
    StateAtOrigin,
    DegenerateBudget,
}

/// Outcome of one closed-loop step.
#[derive(Debug)]
pub enum StepOutcome {
    Converged(ConvergedReason),
    Stepped {
        next: MpcState,
        record: TraceRecord,
        solution: StepSolution,
        log: Option<NetworkLog>,
    },
}

/// Executes one MPC step from `state`.
pub fn mpc_step(ctx: &StepContext<'_>, state: &MpcState, opts: &MpcOptions) -> Result<StepOutcome> {
    if state.x.norm() <= tol::CONVERGED_STATE_NORM {
        return Ok(StepOutcome::Converged(ConvergedReason::StateAtOrigin));
    }
    let delta = match &state.prev {
        Some((x_prev, u_prev)) => {
            match compute_delta(&ctx.model.q, &ctx.model.r, x_prev, u_prev) {
                Ok(d) => d,
                Err(Error::DegenerateDelta(_)) => {
                    return Ok(StepOutcome::Converged(ConvergedReason::DegenerateBudget));
                }
                Err(e) => return Err(e),
            }
        }
        None => {
            let default = 0.5 * (state.x.transpose() * &ctx.model.q * &state.x)[(0, 0)];
            let d = opts.delta0.unwrap_or(default);
            if d <= tol::DEGENERATE_DELTA {
                return Ok(StepOutcome::Converged(ConvergedReason::DegenerateBudget));
            }
            d
        }
    };

    let slater = SlaterCertificate::new(&ctx.problem, state.slater_vec.clone(), &state.x)?;
    let tight = build_tightened(&ctx.problem, state.x.clone(), slater, state.l)?;
    let f_slater = ctx.problem.eval_cost(&tight.slater.u_bar, &state.x)?;

    // Cost-decrease assumption, checked with realized values once the
    // shifted Slater vector is available.
    if let Some(f_prev) = state.f_prev {
        let lhs = f_prev - f_slater;
        if lhs <= delta {
            return Err(Error::AssumptionFourViolated {
                t: state.t,
                lhs,
                rhs: delta,
            });
        }
    }

    let mut params = compute_step_params(&tight, delta);
    params.k_bar = outer_iterations_needed(&params, f_slater);

    let (solution, log) = if opts.distributed {
        let (sol, log) = run_distributed_step(&tight, &params, &ctx.cert, &ctx.comm)?;
        (sol, Some(log))
    } else {
        (
            solve_tightened_step(&tight, &params, &ctx.cert, opts.solver)?,
            None,
        )
    };

    let u_first = ctx.problem.first_input(&solution.u_hat);
    let x_next = &ctx.model.a * &state.x + &ctx.model.b * &u_first;
    if !ctx.network.state_poly.contains(&x_next, tol::INTERIOR_STRICT) {
        return Err(Error::validation(
            "x",
            format!("closed-loop state left X at step {}", state.t + 1),
        ));
    }
    let slater_next = shift_slater(
        &ctx.model,
        &ctx.network.terminal_poly,
        &ctx.problem,
        &solution.u_hat,
        &state.x,
    )?;
    let l_next = update_norm_bound(state.l, &ctx.problem.xi, &x_next, &state.x);
    let lyapunov_ok = state.f_prev.is_none_or(|fp| solution.f_value < fp);

    let record = TraceRecord {
        t: state.t,
        x: state.x.clone(),
        u_applied: u_first.clone(),
        f_value: solution.f_value,
        violation_norm: solution.violation,
        delta,
        alpha: params.alpha,
        eps: params.eps,
        k_bar: params.k_bar,
        total_inner_sweeps: solution.total_inner_sweeps,
        lyapunov_ok,
        message_counts: log.as_ref().map(message_stats),
    };
    let next = MpcState {
        t: state.t + 1,
        x: x_next,
        prev: Some((state.x.clone(), u_first)),
        slater_vec: slater_next,
        l: l_next,
        f_prev: Some(solution.f_value),
    };
    Ok(StepOutcome::Stepped {
        next,
        record,
        solution,
        log,
    })
}

/// Result of a closed-loop run.
#[derive(Debug)]
pub struct SimResult {
    pub records: Vec<TraceRecord>,
    /// Step at which the loop reported convergence, if it did.
    pub converged_at: Option<usize>,
}

/// Runs up to `steps` MPC steps from `x0` with the off-line Slater vector
/// `u_bar0`, stopping early once the state reaches the origin.
pub fn simulate(
    network: &NetworkSpec,
    x0: &DVector<f64>,
    u_bar0: &DVector<f64>,
    steps: usize,
    opts: &MpcOptions,
) -> Result<SimResult> {
    simulate_with(network, x0, u_bar0, steps, opts, |_, _, _| {})
}

/// `simulate` with a per-step observer (used by the CLI to stream trace
/// records and message logs as they are produced).
pub fn simulate_with<F>(
    network: &NetworkSpec,
    x0: &DVector<f64>,
    u_bar0: &DVector<f64>,
    steps: usize,
    opts: &MpcOptions,
    mut on_step: F,
) -> Result<SimResult>
where
    F: FnMut(&TraceRecord, &StepSolution, Option<&NetworkLog>),
{
    let ctx = StepContext::new(network)?;
    if x0.len() != ctx.model.dims.n_x {
        return Err(Error::dims("initial state"));
    }
    if !network.state_poly.contains(x0, tol::INTERIOR_STRICT) {
        return Err(Error::validation("x0", "initial state lies outside X"));
    }
    let l0 = initial_norm_bound(&ctx.problem, x0)?;
    let mut state = MpcState {
        t: 0,
        x: x0.clone(),
        prev: None,
        slater_vec: u_bar0.clone(),
        l: l0,
        f_prev: None,
    };
    let mut records = Vec::new();
    let mut converged_at = None;
    for _ in 0..steps {
        match mpc_step(&ctx, &state, opts)? {
            StepOutcome::Converged(_) => {
                converged_at = Some(state.t);
                break;
            }
            StepOutcome::Stepped {
                next,
                record,
                solution,
                log,
            } => {
                if !record.lyapunov_ok {
                    return Err(Error::LyapunovViolation {
                        t: record.t,
                        prev: state.f_prev.unwrap_or(f64::INFINITY),
                        curr: record.f_value,
                    });
                }
                on_step(&record, &solution, log.as_ref());
                records.push(record);
                state = next;
            }
        }
    }
    Ok(SimResult {
        records,
        converged_at,
    })
}

/// Report of the strict cost decrease across a trace.
#[derive(Debug, Clone, Copy)]
pub struct DecreaseReport {
    pub pairs_checked: usize,
    /// Smallest decrease `f_{t-1} - f_t` observed.
    pub min_margin: f64,
}

/// Confirms `f(u_t, x_t) < f(u_{t-1}, x_{t-1})` on every consecutive pair.
pub fn check_cost_decrease(records: &[TraceRecord]) -> Result<DecreaseReport> {
    assert!(records.len() >= 2, "need at least two records");
    let mut min_margin = f64::INFINITY;
    for pair in records.windows(2) {
        let margin = pair[0].f_value - pair[1].f_value;
        if margin <= 0.0 {
            return Err(Error::LyapunovViolation {
                t: pair[1].t,
                prev: pair[0].f_value,
                curr: pair[1].f_value,
            });
        }
        min_margin = min_margin.min(margin);
    }
    Ok(DecreaseReport {
        pairs_checked: records.len() - 1,
        min_margin,
    })
}
