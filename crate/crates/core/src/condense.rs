//! State elimination: turns the finite-horizon MPC problem into a dense
//! program in the stacked inputs only.
//!
//! The condensed form is
//!
//! ```text
//!   f(u, x) = u' H u + (G x)' u + x' W x          (no 1/2 factor)
//!   g(u, x) = Xi x + Theta u + tau <= 0
//!   u in the stacked box [box_lo, box_hi]
//! ```
//!
//! Inputs are ordered subsystem-major: all horizon inputs of subsystem 0,
//! then subsystem 1, and so on, so that the H blocks used by the Jacobi
//! contraction certificate are contiguous. Constraint rows are ordered as
//! state rows by time (k = 1..N-1), then terminal rows, then input rows by
//! time (k = 0..N-1).

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::model::{assemble_aggregate, AggregateModel, NetworkSpec};

/// Row structure of the condensed constraint system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLayout {
    /// Rows contributed by X at each of the `state_steps` time steps.
    pub state_rows: usize,
    /// Number of time steps carrying X rows (N - 1).
    pub state_steps: usize,
    pub terminal_rows: usize,
    /// Rows contributed by U at each of the `horizon` time steps.
    pub input_rows: usize,
}

/// Dense QP data after state elimination, with the subsystem block map.
#[derive(Debug, Clone)]
pub struct CondensedProblem {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub tau: DVector<f64>,
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
    /// Contiguous index range of each subsystem in the stacked input.
    pub blocks: Vec<Range<usize>>,
    pub horizon: usize,
    pub n_x: usize,
    pub input_dims: Vec<usize>,
    pub row_layout: RowLayout,
}

impl CondensedProblem {
    pub fn n_u(&self) -> usize {
        self.h.nrows()
    }

    pub fn m_c(&self) -> usize {
        self.tau.len()
    }

    pub fn n_subsystems(&self) -> usize {
        self.blocks.len()
    }

    /// Quadratic cost `u' H u + (G x)' u + x' W x`.
    pub fn eval_cost(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_dims(u, x)?;
        let quad = (u.transpose() * &self.h * u)[(0, 0)];
        let cross = (&self.g * x).dot(u);
        let constant = (x.transpose() * &self.w * x)[(0, 0)];
        Ok(quad + cross + constant)
    }

    /// Constraint values `Xi x + Theta u + tau`; a component is satisfied
    /// iff it is <= 0.
    pub fn eval_constraints(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(u, x)?;
        Ok(&self.xi * x + &self.theta * u + &self.tau)
    }

    fn check_dims(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
        if u.len() != self.n_u() {
            return Err(Error::dims(format!(
                "input vector has length {}, expected {}",
                u.len(),
                self.n_u()
            )));
        }
        if x.len() != self.n_x {
            return Err(Error::dims(format!(
                "state vector has length {}, expected {}",
                x.len(),
                self.n_x
            )));
        }
        Ok(())
    }

    /// Aggregate input applied at horizon step `k`, reassembled from the
    /// subsystem-major stacking.
    pub fn input_at_step(&self, u: &DVector<f64>, k: usize) -> DVector<f64> {
        assert!(k < self.horizon);
        let m_total: usize = self.input_dims.iter().sum();
        let mut out = DVector::zeros(m_total);
        let mut offset = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            let m_i = self.input_dims[i];
            out.rows_mut(offset, m_i)
                .copy_from(&u.rows(block.start + k * m_i, m_i));
            offset += m_i;
        }
        out
    }

    pub fn first_input(&self, u: &DVector<f64>) -> DVector<f64> {
        self.input_at_step(u, 0)
    }

    /// Horizon inputs of the whole network as time-major step vectors.
    pub fn inputs_by_step(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.horizon).map(|k| self.input_at_step(u, k)).collect()
    }

    /// H sub-block coupling subsystems `i` and `j`.
    pub fn h_block(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        let (bi, bj) = (&self.blocks[i], &self.blocks[j]);
        self.h.view((bi.start, bj.start), (bi.len(), bj.len()))
    }

    /// Theta columns belonging to subsystem `i`.
    pub fn theta_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let b = &self.blocks[i];
        self.theta.view((0, b.start), (self.m_c(), b.len()))
    }

    /// `Theta u` accumulated block by block in ascending subsystem order.
    /// The distributed harness sums per-agent contributions in exactly this
    /// order, so using the same accumulation keeps both paths bit-identical.
    pub fn theta_times_u_blockwise(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.m_c());
        for (i, block) in self.blocks.iter().enumerate() {
            acc += self.theta_block(i) * u.rows(block.start, block.len());
        }
        acc
    }

    /// Euclidean diameter of each subsystem's stacked box.
    pub fn block_diameters(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                (self.box_hi.rows(b.start, b.len()) - self.box_lo.rows(b.start, b.len())).norm()
            })
            .collect()
    }

    /// Norm of the farthest box vertex from the origin.
    pub fn box_radius(&self) -> f64 {
        (0..self.n_u())
            .map(|i| self.box_lo[i].abs().max(self.box_hi[i].abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn clamp_to_box(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_u(), |i, _| {
            u[i].max(self.box_lo[i]).min(self.box_hi[i])
        })
    }

    pub fn in_box(&self, u: &DVector<f64>, slack: f64) -> bool {
        (0..self.n_u())
            .all(|i| u[i] >= self.box_lo[i] - slack && u[i] <= self.box_hi[i] + slack)
    }
}

/// Exact plant recursion `x_{k+1} = A x_k + B u_k`; returns the trajectory
/// `[x_0, ..., x_T]`. Serves as the oracle for condensation correctness.
pub fn rollout(
    model: &AggregateModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if x0.len() != model.dims.n_x {
        return Err(Error::dims("rollout initial state"));
    }
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(x0.clone());
    for u in inputs {
        if u.len() != model.dims.n_u {
            return Err(Error::dims("rollout input"));
        }
        let next = &model.a * traj.last().unwrap() + &model.b * u;
        traj.push(next);
    }
    Ok(traj)
}

/// Eliminates the predicted states from the MPC problem, producing the dense
/// cost and constraint data in subsystem-major input ordering.
pub fn condense(network: &NetworkSpec) -> Result<CondensedProblem> {
    let n = network.horizon;
    if n < 1 {
        return Err(Error::HorizonTooSmall(n));
    }
    let agg = assemble_aggregate(network)?;
    let dims = &agg.dims;
    let (n_x, m_total) = (dims.n_x, dims.n_u);
    let n_u = n * m_total;

    // Powers of A up to A^N.
    let mut powers = Vec::with_capacity(n + 1);
    powers.push(DMatrix::identity(n_x, n_x));
    for s in 1..=n {
        powers.push(&agg.a * &powers[s - 1]);
    }

    // Prediction maps: x_s = F_s x_0 + sum_k Gu[s][k] u_k, s = 1..N.
    let mut f_map = DMatrix::zeros(n * n_x, n_x);
    let mut gu = DMatrix::zeros(n * n_x, n_u);
    for s in 1..=n {
        f_map
            .view_mut(((s - 1) * n_x, 0), (n_x, n_x))
            .copy_from(&powers[s]);
        for k in 0..s {
            let block = &powers[s - 1 - k] * &agg.b;
            gu.view_mut(((s - 1) * n_x, k * m_total), (n_x, m_total))
                .copy_from(&block);
        }
    }

    // Stage weights on [x_1, ..., x_N]: Q for s < N, P for s = N.
    let mut q_bar = DMatrix::zeros(n * n_x, n * n_x);
    for s in 1..=n {
        let w = if s == n { &agg.p } else { &agg.q };
        q_bar
            .view_mut(((s - 1) * n_x, (s - 1) * n_x), (n_x, n_x))
            .copy_from(w);
    }

    // Time-major cost pieces.
    let gtq = gu.transpose() * &q_bar;
    let mut h_tm = &gtq * &gu;
    for k in 0..n {
        let mut view = h_tm.view_mut((k * m_total, k * m_total), (m_total, m_total));
        view += &agg.r;
    }
    let g_tm = 2.0 * &gtq * &f_map;
    let w = &agg.q + f_map.transpose() * &q_bar * &f_map;

    // Constraint rows, time-major in u.
    let (xp, tp, up) = (
        &network.state_poly,
        &network.terminal_poly,
        &network.input_poly,
    );
    let layout = RowLayout {
        state_rows: xp.rows(),
        state_steps: n - 1,
        terminal_rows: tp.rows(),
        input_rows: up.rows(),
    };
    let m_c = layout.state_rows * layout.state_steps + layout.terminal_rows + n * layout.input_rows;
    let mut xi = DMatrix::zeros(m_c, n_x);
    let mut theta_tm = DMatrix::zeros(m_c, n_u);
    let mut tau = DVector::zeros(m_c);
    let mut row = 0;
    for s in 1..n {
        let f_s = f_map.view(((s - 1) * n_x, 0), (n_x, n_x));
        let gu_s = gu.view(((s - 1) * n_x, 0), (n_x, n_u));
        xi.view_mut((row, 0), (xp.rows(), n_x)).copy_from(&(&xp.a * f_s));
        theta_tm
            .view_mut((row, 0), (xp.rows(), n_u))
            .copy_from(&(&xp.a * gu_s));
        tau.rows_mut(row, xp.rows()).copy_from(&(-&xp.b));
        row += xp.rows();
    }
    {
        let f_n = f_map.view(((n - 1) * n_x, 0), (n_x, n_x));
        let gu_n = gu.view(((n - 1) * n_x, 0), (n_x, n_u));
        xi.view_mut((row, 0), (tp.rows(), n_x)).copy_from(&(&tp.a * f_n));
        theta_tm
            .view_mut((row, 0), (tp.rows(), n_u))
            .copy_from(&(&tp.a * gu_n));
        tau.rows_mut(row, tp.rows()).copy_from(&(-&tp.b));
        row += tp.rows();
    }
    for k in 0..n {
        theta_tm
            .view_mut((row, k * m_total), (up.rows(), m_total))
            .copy_from(&up.a);
        tau.rows_mut(row, up.rows()).copy_from(&(-&up.b));
        row += up.rows();
    }
    debug_assert_eq!(row, m_c);

    // Subsystem-major reindexing of the inputs.
    let m = network.subsystems.len();
    let input_dims = dims.input_dims.clone();
    let mut blocks = Vec::with_capacity(m);
    let mut start = 0;
    for &m_i in &input_dims {
        blocks.push(start..start + n * m_i);
        start += n * m_i;
    }
    let mut sm_to_tm = vec![0usize; n_u];
    for i in 0..m {
        for k in 0..n {
            for c in 0..input_dims[i] {
                let sm = blocks[i].start + k * input_dims[i] + c;
                let tm = k * m_total + dims.input_offsets[i] + c;
                sm_to_tm[sm] = tm;
            }
        }
    }
    let mut h = DMatrix::zeros(n_u, n_u);
    let mut g = DMatrix::zeros(n_u, n_x);
    let mut theta = DMatrix::zeros(m_c, n_u);
    let mut box_lo = DVector::zeros(n_u);
    let mut box_hi = DVector::zeros(n_u);
    for a in 0..n_u {
        for b in 0..n_u {
            h[(a, b)] = h_tm[(sm_to_tm[a], sm_to_tm[b])];
        }
        g.row_mut(a).copy_from(&g_tm.row(sm_to_tm[a]));
        theta.column_mut(a).copy_from(&theta_tm.column(sm_to_tm[a]));
    }
    for (i, block) in blocks.iter().enumerate() {
        let s = &network.subsystems[i];
        for k in 0..n {
            for c in 0..input_dims[i] {
                let idx = block.start + k * input_dims[i] + c;
                box_lo[idx] = s.input_box.lo[c];
                box_hi[idx] = s.input_box.hi[c];
            }
        }
    }

    // Kill roundoff asymmetry so symmetric eigensolvers are exact.
    let h = (&h + h.transpose()) * 0.5;
    let w = (&w + w.transpose()) * 0.5;

    Ok(CondensedProblem {
        h,
        g,
        w,
        xi,
        theta,
        tau,
        box_lo,
        box_hi,
        blocks,
        horizon: n,
        n_x,
        input_dims,
        row_layout: layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{scalar_network, twin_network, twin_x0};
    use approx::assert_relative_eq;
    use rand::prelude::*;

    #[test]
    fn scalar_cost_matrices() {
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        assert_relative_eq!(p.h[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(p.g[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(p.w[(0, 0)], 1.25, max_relative = 1e-14);
    }

    #[test]
    fn scalar_constraint_matrices() {
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        assert_eq!(p.m_c(), 1);
        assert_relative_eq!(p.xi[(0, 0)], 0.5, max_relative = 1e-14);
        assert_relative_eq!(p.theta[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(p.tau[0], -0.5, max_relative = 1e-14);
    }

    #[test]
    fn horizon_zero_rejected() {
        match condense(&scalar_network(0.5, 1.0, 0)) {
            Err(Error::HorizonTooSmall(0)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eval_cost_examples() {
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        let x1 = DVector::from_element(1, 1.0);
        let u0 = DVector::from_element(1, 0.0);
        assert_relative_eq!(p.eval_cost(&u0, &x1).unwrap(), 1.25, max_relative = 1e-14);
        assert_eq!(p.eval_cost(&u0, &DVector::zeros(1)).unwrap(), 0.0);
        let u = DVector::from_element(1, -0.25);
        assert_relative_eq!(p.eval_cost(&u, &x1).unwrap(), 1.125, max_relative = 1e-14);
    }

    #[test]
    fn eval_constraints_examples() {
        let p = condense(&scalar_network(0.5, 1.0, 1)).unwrap();
        let x1 = DVector::from_element(1, 1.0);
        let g0 = p.eval_constraints(&DVector::zeros(1), &x1).unwrap();
        assert_relative_eq!(g0[0], 0.0, epsilon = 1e-14);
        let g1 = p
            .eval_constraints(&DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_relative_eq!(g1[0], -0.5, max_relative = 1e-14);
        let g2 = p
            .eval_constraints(&DVector::from_element(1, 0.6), &x1)
            .unwrap();
        assert_relative_eq!(g2[0], 0.6, max_relative = 1e-14);
    }

    #[test]
    fn eval_rejects_wrong_dims() {
        let p = condense(&twin_network()).unwrap();
        let bad_u = DVector::zeros(3);
        match p.eval_cost(&bad_u, &twin_x0()) {
            Err(Error::DimensionMismatch(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rollout_examples() {
        let net = scalar_network(0.5, 1.0, 1);
        let agg = assemble_aggregate(&net).unwrap();
        let traj = rollout(&agg, &DVector::from_element(1, 1.0), &[DVector::zeros(1)]).unwrap();
        assert_relative_eq!(traj[1][0], 0.5, max_relative = 1e-14);

        let twin = assemble_aggregate(&twin_network()).unwrap();
        let traj = rollout(
            &twin,
            &DVector::from_row_slice(&[1.0, 0.0]),
            &[DVector::zeros(2)],
        )
        .unwrap();
        assert_relative_eq!(traj[1][0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(traj[1][1], 0.1, max_relative = 1e-14);

        let traj = rollout(&twin, &DVector::zeros(2), &vec![DVector::zeros(2); 4]).unwrap();
        for x in traj {
            assert_eq!(x.norm(), 0.0);
        }
    }

    /// Stage-cost and constraint recomputation straight from the rollout,
    /// used as the independent reference for the condensed data.
    fn reference_cost_and_rows(
        net: &NetworkSpec,
        p: &CondensedProblem,
        u: &DVector<f64>,
        x: &DVector<f64>,
    ) -> (f64, Vec<f64>) {
        let agg = assemble_aggregate(net).unwrap();
        let inputs = p.inputs_by_step(u);
        let traj = rollout(&agg, x, &inputs).unwrap();
        let n = net.horizon;
        let mut cost = 0.0;
        for k in 0..n {
            cost += (traj[k].transpose() * &agg.q * &traj[k])[(0, 0)];
            cost += (inputs[k].transpose() * &agg.r * &inputs[k])[(0, 0)];
        }
        cost += (traj[n].transpose() * &agg.p * &traj[n])[(0, 0)];
        let mut rows = Vec::new();
        for k in 1..n {
            let s = &net.state_poly;
            let vals = &s.a * &traj[k] - &s.b;
            rows.extend(vals.iter().copied());
        }
        let tpv = &net.terminal_poly.a * &traj[n] - &net.terminal_poly.b;
        rows.extend(tpv.iter().copied());
        for input in inputs.iter().take(n) {
            let vals = &net.input_poly.a * input - &net.input_poly.b;
            rows.extend(vals.iter().copied());
        }
        (cost, rows)
    }

    #[test]
    fn condensation_matches_rollout_on_twin() {
        let net = twin_network();
        let p = condense(&net).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let u = DVector::from_fn(p.n_u(), |_, _| rng.gen_range(-1.0..1.0));
            let x = DVector::from_fn(p.n_x, |_, _| rng.gen_range(-1.5..1.5));
            let (cost_ref, rows_ref) = reference_cost_and_rows(&net, &p, &u, &x);
            let cost = p.eval_cost(&u, &x).unwrap();
            assert!((cost - cost_ref).abs() <= 1e-10 * (1.0 + cost_ref.abs()));
            let rows = p.eval_constraints(&u, &x).unwrap();
            assert_eq!(rows.len(), rows_ref.len());
            for (a, b) in rows.iter().zip(rows_ref.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn h_positive_definite_on_twin() {
        let p = condense(&twin_network()).unwrap();
        let min_eig = nalgebra::SymmetricEigen::new(p.h.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig > 0.0);
    }

    #[test]
    fn blocks_partition_inputs() {
        let p = condense(&twin_network()).unwrap();
        assert_eq!(p.blocks, vec![0..2, 2..4]);
        assert_eq!(p.n_u(), 4);
        let u = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        // subsystem-major: [u^0_0, u^0_1, u^1_0, u^1_1]
        assert_eq!(p.input_at_step(&u, 0), DVector::from_row_slice(&[1.0, 3.0]));
        assert_eq!(p.input_at_step(&u, 1), DVector::from_row_slice(&[2.0, 4.0]));
    }

    #[test]
    fn blockwise_theta_product_matches_dense() {
        let p = condense(&twin_network()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u = DVector::from_fn(p.n_u(), |_, _| rng.gen_range(-1.0..1.0));
            let dense = &p.theta * &u;
            let blockwise = p.theta_times_u_blockwise(&u);
            assert_relative_eq!(dense, blockwise, max_relative = 1e-14);
        }
    }
}
