//! Constraint tightening: replaces `g <= 0` by `g + c_t·1 <= 0` with the
//! margin chosen from the Slater vector, and maintains the norm bounds
//! `L_t` / `L'_t` and the Slater vector across MPC steps.
//!
//! Bounded violation of the tightened constraints then still implies strict
//! feasibility of the originals, which is what makes a finite iteration
//! count sufficient.

use nalgebra::{DMatrix, DVector};

use crate::condense::{rollout, CondensedProblem};
use crate::error::{Error, Result};
use crate::model::{AggregateModel, Polytope};
use crate::tol;

/// A strictly feasible point of the coupled constraints, with its margins.
#[derive(Debug, Clone)]
pub struct SlaterCertificate {
    pub u_bar: DVector<f64>,
    /// `-g_j(u_bar, x)` per row; all strictly positive.
    pub margins: DVector<f64>,
    pub min_margin: f64,
}

impl SlaterCertificate {
    /// Evaluates the candidate Slater vector and certifies strict
    /// feasibility of every coupled row plus box membership.
    pub fn new(p: &CondensedProblem, u_bar: DVector<f64>, x: &DVector<f64>) -> Result<Self> {
        if !p.in_box(&u_bar, 0.0) {
            return Err(Error::validation(
                "u_bar",
                "Slater vector lies outside the input box",
            ));
        }
        let margins = -p.eval_constraints(&u_bar, x)?;
        let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
        if min_margin <= 0.0 {
            return Err(Error::SlaterViolated { min_margin });
        }
        Ok(SlaterCertificate {
            u_bar,
            margins,
            min_margin,
        })
    }
}

/// The tightened problem at one MPC step: the condensed data, the current
/// state, the tightening margin and the norm bounds.
#[derive(Debug, Clone)]
pub struct TightenedProblem<'a> {
    pub base: &'a CondensedProblem,
    pub x: DVector<f64>,
    /// Tightening constant c_t, strictly inside (0, min margin).
    pub c: f64,
    /// Norm bound for g at the current state.
    pub l: f64,
    /// Norm bound for g' = g + c·1, equal to l + c.
    pub l_prime: f64,
    /// Slater margin of the tightened constraints, min_margin - c.
    pub gamma: f64,
    pub slater: SlaterCertificate,
}

impl<'a> TightenedProblem<'a> {
    /// Tightened constraint values `g(u, x) + c·1`.
    pub fn eval_tightened(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.base.eval_constraints(u, &self.x)?.add_scalar(self.c))
    }

    /// Linear coefficient of the Lagrangian in `u`:
    /// `grad_u L'(u, mu) = 2 H u + G x + Theta' mu`.
    pub fn lagrangian_linear(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.base.g * &self.x + self.base.theta.transpose() * mu
    }

    /// u-independent part of the Lagrangian: `x' W x + mu'(Xi x + tau + c·1)`.
    pub fn lagrangian_constant(&self, mu: &DVector<f64>) -> f64 {
        let affine = &self.base.xi * &self.x + self.base.tau.add_scalar(self.c);
        (self.x.transpose() * &self.base.w * &self.x)[(0, 0)] + mu.dot(&affine)
    }

    /// Full Lagrangian value `f(u, x) + mu' g'(u, x)`.
    pub fn lagrangian_value(&self, u: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
        Ok(self.base.eval_cost(u, &self.x)? + mu.dot(&self.eval_tightened(u)?))
    }

    /// Diagnostic constructor that accepts an arbitrary margin without the
    /// `c < min_margin` validation. Used to demonstrate that the feasibility
    /// certificate trips when the margin rule is broken.
    pub fn with_raw_margin(
        base: &'a CondensedProblem,
        x: DVector<f64>,
        slater: SlaterCertificate,
        l: f64,
        c: f64,
    ) -> Self {
        TightenedProblem {
            base,
            x,
            c,
            l,
            l_prime: l + c,
            gamma: slater.min_margin - c,
            slater,
        }
    }
}

/// Norm bound `L_0 >= ||g(u, x0)||_2` over the whole input box. Exact vertex
/// maximum for small boxes (valid because `||g||_2` is convex), otherwise a
/// triangle-inequality interval bound.
pub fn initial_norm_bound(p: &CondensedProblem, x0: &DVector<f64>) -> Result<f64> {
    for i in 0..p.n_u() {
        if !p.box_lo[i].is_finite() || !p.box_hi[i].is_finite() {
            return Err(Error::UnboundedBox);
        }
    }
    let base = &p.xi * x0 + &p.tau;
    let n = p.n_u();
    if n <= tol::L0_VERTEX_MAX_DIM {
        // Gray-code walk over the 2^n vertices: one column update per step.
        let mut g = base.clone();
        for i in 0..n {
            g += p.theta.column(i) * p.box_lo[i];
        }
        let mut best = g.norm();
        let mut state = vec![false; n]; // false = at lower bound
        let total: u64 = 1u64 << n;
        for step in 1..total {
            let bit = step.trailing_zeros() as usize;
            let delta = p.box_hi[bit] - p.box_lo[bit];
            if state[bit] {
                g -= p.theta.column(bit) * delta;
            } else {
                g += p.theta.column(bit) * delta;
            }
            state[bit] = !state[bit];
            best = best.max(g.norm());
        }
        Ok(best)
    } else {
        let column_part: f64 = (0..n)
            .map(|i| p.theta.column(i).norm() * p.box_lo[i].abs().max(p.box_hi[i].abs()))
            .sum();
        Ok(base.norm() + column_part)
    }
}

/// Norm bound propagation to a new state:
/// `L_t = L_{t-1} + ||Xi (x_t - x_{t-1})||_2`.
pub fn update_norm_bound(
    l_prev: f64,
    xi: &DMatrix<f64>,
    x_t: &DVector<f64>,
    x_prev: &DVector<f64>,
) -> f64 {
    l_prev + (xi * (x_t - x_prev)).norm()
}

/// Tightening margin: the midpoint of the admissible interval
/// `(0, min margin)`.
pub fn choose_margin(slater: &SlaterCertificate) -> Result<f64> {
    if slater.min_margin <= 0.0 {
        return Err(Error::SlaterViolated {
            min_margin: slater.min_margin,
        });
    }
    Ok(0.5 * slater.min_margin)
}

/// Builds the tightened problem for the current step.
pub fn build_tightened<'a>(
    base: &'a CondensedProblem,
    x: DVector<f64>,
    slater: SlaterCertificate,
    l: f64,
) -> Result<TightenedProblem<'a>> {
    let c = choose_margin(&slater)?;
    Ok(TightenedProblem {
        base,
        x,
        c,
        l,
        l_prime: l + c,
        gamma: slater.min_margin - c,
        slater,
    })
}

/// Shifts the previous solution one step ahead and appends the terminal
/// feedback `K_i x^i_{t+N}`, producing the Slater vector for the next step.
///
/// `u_prev` is the subsystem-major solution applied at state `x_prev`; the
/// predicted terminal state must be strictly inside the terminal set, or the
/// previous solution was not strictly feasible and the shift is invalid.
pub fn shift_slater(
    model: &AggregateModel,
    terminal: &Polytope,
    p: &CondensedProblem,
    u_prev: &DVector<f64>,
    x_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    let traj = rollout(model, x_prev, &p.inputs_by_step(u_prev))?;
    let x_terminal = &traj[p.horizon];
    let slack = terminal.min_slack(x_terminal);
    if slack <= 0.0 {
        return Err(Error::PredictedTerminalOutsideXf { slack });
    }
    let terminal_input = &model.k * x_terminal;
    let mut shifted = DVector::zeros(p.n_u());
    for (i, block) in p.blocks.iter().enumerate() {
        let m_i = p.input_dims[i];
        let n_steps = p.horizon;
        // Drop the first step, keep steps 1..N-1, append K_i x^i_{t+N}.
        for k in 0..n_steps - 1 {
            let src = block.start + (k + 1) * m_i;
            let dst = block.start + k * m_i;
            for c in 0..m_i {
                shifted[dst + c] = u_prev[src + c];
            }
        }
        let io = model.dims.input_offsets[i];
        for c in 0..m_i {
            shifted[block.start + (n_steps - 1) * m_i + c] = terminal_input[io + c];
        }
    }
    Ok(shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::condense;
    use crate::model::assemble_aggregate;
    use crate::testutil::{scalar_network, scalar_network_validated, twin_network, twin_u_bar0, twin_x0};
    use approx::assert_relative_eq;
    use rand::prelude::*;

    #[test]
    fn initial_norm_bound_scalar_vertices() {
        // g(u, x) = 0.5 x + u - 0.5 on u in [-1, 1], x0 = 1: both vertices give 1.
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        let l0 = initial_norm_bound(&p, &DVector::from_element(1, 1.0)).unwrap();
        assert_relative_eq!(l0, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn initial_norm_bound_constant_when_theta_zero() {
        let mut p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        p.theta.fill(0.0);
        let x0 = DVector::from_element(1, 1.0);
        let l0 = initial_norm_bound(&p, &x0).unwrap();
        assert_relative_eq!(l0, (&p.xi * &x0 + &p.tau).norm(), max_relative = 1e-14);
    }

    #[test]
    fn initial_norm_bound_rejects_unbounded() {
        let mut p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        p.box_hi[0] = f64::INFINITY;
        match initial_norm_bound(&p, &DVector::from_element(1, 1.0)) {
            Err(Error::UnboundedBox) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interval_bound_dominates_vertex_bound() {
        // The fallback interval bound must upper-bound the exact vertex max.
        let p = condense(&twin_network()).unwrap();
        let x0 = twin_x0();
        let exact = initial_norm_bound(&p, &x0).unwrap();
        let base = (&p.xi * &x0 + &p.tau).norm();
        let cols: f64 = (0..p.n_u())
            .map(|i| p.theta.column(i).norm() * p.box_lo[i].abs().max(p.box_hi[i].abs()))
            .sum();
        assert!(base + cols >= exact);
    }

    #[test]
    fn update_norm_bound_examples() {
        let xi = DMatrix::identity(2, 2);
        let x_prev = DVector::zeros(2);
        let x_t = DVector::from_row_slice(&[0.3, 0.4]);
        assert_relative_eq!(update_norm_bound(1.0, &xi, &x_t, &x_prev), 1.5, max_relative = 1e-14);
        assert_eq!(update_norm_bound(1.0, &xi, &x_prev, &x_prev), 1.0);
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(update_norm_bound(1.0, &zero, &x_t, &x_prev), 1.0);
    }

    fn slater_with_margins(margins: &[f64]) -> SlaterCertificate {
        SlaterCertificate {
            u_bar: DVector::zeros(1),
            margins: DVector::from_row_slice(margins),
            min_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    #[test]
    fn choose_margin_examples() {
        assert_relative_eq!(
            choose_margin(&slater_with_margins(&[0.4, 0.2])).unwrap(),
            0.1,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            choose_margin(&slater_with_margins(&[1.0])).unwrap(),
            0.5,
            max_relative = 1e-14
        );
        match choose_margin(&slater_with_margins(&[-0.1, 0.2])) {
            Err(Error::SlaterViolated { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_tightened_shifts_constraints() {
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        let x = DVector::from_element(1, 1.0);
        // u_bar = -0.2: g = 0.5 - 0.2 - 0.5 = -0.2, margin 0.2, c = 0.1.
        let slater = SlaterCertificate::new(&p, DVector::from_element(1, -0.2), &x).unwrap();
        let t = build_tightened(&p, x, slater, 1.0).unwrap();
        assert_relative_eq!(t.c, 0.1, max_relative = 1e-14);
        assert_relative_eq!(t.l_prime, 1.1, max_relative = 1e-14);
        // g'(u, 1) = u + 0.1
        let g = t.eval_tightened(&DVector::from_element(1, 0.0)).unwrap();
        assert_relative_eq!(g[0], 0.1, max_relative = 1e-13);
        // Slater vector stays strictly feasible with margin exactly gamma.
        let g_bar = t.eval_tightened(&t.slater.u_bar.clone()).unwrap();
        let max_g = g_bar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((max_g + t.gamma).abs() <= 1e-12);
    }

    #[test]
    fn sampled_norm_bound_validity() {
        let net = twin_network();
        let p = condense(&net).unwrap();
        let x = twin_x0();
        let l = initial_norm_bound(&p, &x).unwrap();
        let slater = SlaterCertificate::new(&p, twin_u_bar0(), &x).unwrap();
        let t = build_tightened(&p, x.clone(), slater, l).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let u = DVector::from_fn(p.n_u(), |i, _| {
                rng.gen_range(p.box_lo[i]..p.box_hi[i])
            });
            assert!(p.eval_constraints(&u, &x).unwrap().norm() <= l + 1e-12);
            assert!(t.eval_tightened(&u).unwrap().norm() <= t.l_prime + 1e-12);
        }
    }

    #[test]
    fn shift_slater_scalar_append() {
        // M = 1, N = 1: the shift drops u_0 and appends K x_{t+1}.
        let net = scalar_network_validated(0.5, 1.0, 1);
        let agg = assemble_aggregate(&net).unwrap();
        let p = condense(&net).unwrap();
        let k = agg.k[(0, 0)];
        // Choose u so the predicted terminal state is 0.2.
        let x_prev = DVector::from_element(1, 0.2);
        let u_prev = DVector::from_element(1, 0.2 - 0.5 * 0.2);
        let shifted = shift_slater(&agg, &net.terminal_poly, &p, &u_prev, &x_prev).unwrap();
        assert_relative_eq!(shifted[0], k * 0.2, max_relative = 1e-14);
    }

    #[test]
    fn shift_slater_zero_fixed_point() {
        let net = scalar_network_validated(0.5, 1.0, 2);
        let agg = assemble_aggregate(&net).unwrap();
        let p = condense(&net).unwrap();
        let shifted =
            shift_slater(&agg, &net.terminal_poly, &p, &DVector::zeros(2), &DVector::zeros(1))
                .unwrap();
        assert_eq!(shifted, DVector::zeros(2));
    }

    #[test]
    fn shift_slater_rejects_boundary_terminal() {
        let net = scalar_network_validated(0.5, 1.0, 1);
        let agg = assemble_aggregate(&net).unwrap();
        let p = condense(&net).unwrap();
        // Drive the predicted terminal state exactly onto the Xf boundary.
        let x_prev = DVector::from_element(1, 1.0);
        let u_prev = DVector::from_element(1, 0.0); // x_1 = 0.5 = boundary
        match shift_slater(&agg, &net.terminal_poly, &p, &u_prev, &x_prev) {
            Err(Error::PredictedTerminalOutsideXf { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
