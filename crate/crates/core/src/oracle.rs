//! Exact small-instance reference solvers.
//!
//! These are enumeration-based and deliberately boring: a box-QP solver over
//! all 3^n face patterns, a fully constrained QP solver over active-set
//! subsets with multiplier sign checks, and the exact dual function built on
//! the box solver. Hard caps raise errors instead of approximating; an
//! oracle must be exact or absent.

use nalgebra::{DMatrix, DVector};

use crate::condense::CondensedProblem;
use crate::error::{Error, Result};
use crate::tighten::TightenedProblem;
use crate::tol;

/// One enumerated active-set candidate.
#[derive(Debug, Clone)]
pub struct KktCandidate {
    /// Indices of the rows held active (coupled rows first, then upper box
    /// faces, then lower box faces).
    pub active_set: Vec<usize>,
    pub u: DVector<f64>,
    pub value: f64,
    pub feasible: bool,
    /// Multipliers of the active rows, aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub multipliers_ok: bool,
}

/// Exact minimizer of `u' H u + lin' u` over `lo <= u <= hi`, by enumeration
/// of the 3^n at-lower / free / at-upper face patterns with KKT sign checks.
pub fn solve_box_qp_exact(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = h.nrows();
    if n > tol::BOX_QP_MAX_DIM {
        return Err(Error::InstanceTooLarge(format!(
            "box QP dimension {n} exceeds {}",
            tol::BOX_QP_MAX_DIM
        )));
    }
    assert_eq!(h.ncols(), n);
    assert_eq!(lin.len(), n);
    assert_eq!(lo.len(), n);
    assert_eq!(hi.len(), n);

    let mut best: Option<(DVector<f64>, f64)> = None;
    let total = 3usize.pow(n as u32);
    let mut pattern = vec![0u8; n]; // 0 = free, 1 = lower, 2 = upper
    for code in 0..total {
        let mut c = code;
        for digit in pattern.iter_mut() {
            *digit = (c % 3) as u8;
            c /= 3;
        }
        if let Some(u) = solve_pattern(h, lin, lo, hi, &pattern) {
            if kkt_valid(h, lin, lo, hi, &pattern, &u) {
                let value = (u.transpose() * h * &u)[(0, 0)] + lin.dot(&u);
                if best.as_ref().is_none_or(|(_, v)| value < *v) {
                    best = Some((u, value));
                }
            }
        }
    }
    best.ok_or(Error::LocalSolveFailed)
}

/// Stationary point of the pattern's free coordinates, or None when the free
/// subsystem is singular or leaves the box.
fn solve_pattern(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    pattern: &[u8],
) -> Option<DVector<f64>> {
    let n = pattern.len();
    let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 0).collect();
    let mut u = DVector::from_fn(n, |i, _| match pattern[i] {
        1 => lo[i],
        2 => hi[i],
        _ => 0.0,
    });
    if !free.is_empty() {
        // Stationarity on the free set: (2 H u + lin)_F = 0.
        let nf = free.len();
        let mut h_ff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            let mut r = -0.5 * lin[i];
            for j in 0..n {
                if pattern[j] == 0 {
                    continue;
                }
                r -= h[(i, j)] * u[j];
            }
            rhs[a] = r;
            for (b, &j) in free.iter().enumerate() {
                h_ff[(a, b)] = h[(i, j)];
            }
        }
        let sol = h_ff.lu().solve(&rhs)?;
        for (a, &i) in free.iter().enumerate() {
            if sol[a] < lo[i] - tol::KKT_FEASIBILITY_TOL || sol[a] > hi[i] + tol::KKT_FEASIBILITY_TOL
            {
                return None;
            }
            u[i] = sol[a];
        }
    }
    Some(u)
}

/// Gradient sign conditions at the clamped coordinates.
fn kkt_valid(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    _lo: &DVector<f64>,
    _hi: &DVector<f64>,
    pattern: &[u8],
    u: &DVector<f64>,
) -> bool {
    let grad = 2.0 * (h * u) + lin;
    pattern.iter().enumerate().all(|(i, &p)| match p {
        1 => grad[i] >= -tol::KKT_SIGN_TOL,
        2 => grad[i] <= tol::KKT_SIGN_TOL,
        _ => true,
    })
}

/// Optimum of a linearly constrained strictly convex QP.
#[derive(Debug, Clone)]
pub struct ConstrainedQpSolution {
    pub u: DVector<f64>,
    /// Value of `u' H u + lin' u` (constant terms excluded).
    pub value: f64,
    /// Optimal multipliers of the coupled rows (zero off the active set).
    pub multipliers: DVector<f64>,
}

/// Exact optimum of `min u' H u + lin' u` subject to `rows_a u <= rows_b`
/// and `lo <= u <= hi`, by enumeration of active subsets with KKT solves.
pub fn solve_constrained_qp_exact(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    rows_a: &DMatrix<f64>,
    rows_b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<ConstrainedQpSolution> {
    let best = enumerate_kkt_candidates(h, lin, rows_a, rows_b, lo, hi, false)?
        .into_iter()
        .filter(|c| c.feasible && c.multipliers_ok)
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or(Error::Infeasible)?;
    let m = rows_a.nrows();
    let mut multipliers = DVector::zeros(m);
    for (r, &row) in best.active_set.iter().enumerate() {
        if row < m {
            multipliers[row] = best.multipliers[r];
        }
    }
    Ok(ConstrainedQpSolution {
        u: best.u,
        value: best.value,
        multipliers,
    })
}

/// Row `idx` of the stacked system: coupled rows, then upper faces, then
/// lower faces.
fn row_vector(rows_a: &DMatrix<f64>, n: usize, idx: usize) -> nalgebra::RowDVector<f64> {
    let m = rows_a.nrows();
    if idx < m {
        rows_a.row(idx).into_owned()
    } else {
        let mut r = nalgebra::RowDVector::zeros(n);
        let k = idx - m;
        if k < n {
            r[k] = 1.0; // u_k <= hi_k
        } else {
            r[k - n] = -1.0; // -u_k <= -lo_k
        }
        r
    }
}

fn row_rhs(rows_b: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, idx: usize) -> f64 {
    let m = rows_b.len();
    let n = lo.len();
    if idx < m {
        rows_b[idx]
    } else if idx < m + n {
        hi[idx - m]
    } else {
        -lo[idx - m - n]
    }
}

/// Enumerates active-set candidates (subsets of at most n rows). With
/// `keep_all` the full list is returned for self-consistency checks;
/// otherwise only feasible, sign-valid candidates are kept.
pub fn enumerate_kkt_candidates(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    rows_a: &DMatrix<f64>,
    rows_b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    keep_all: bool,
) -> Result<Vec<KktCandidate>> {
    let n = h.nrows();
    let m = rows_a.nrows();
    let total_rows = m + 2 * n;
    if total_rows > tol::ACTIVE_SET_MAX_ROWS {
        return Err(Error::InstanceTooLarge(format!(
            "{total_rows} inequality rows exceeds {}",
            tol::ACTIVE_SET_MAX_ROWS
        )));
    }
    let mut out = Vec::new();
    let max_active = n.min(total_rows);
    let mut subset: Vec<usize> = Vec::new();
    loop {
        if let Some(cand) = kkt_candidate(h, lin, rows_a, rows_b, lo, hi, &subset) {
            if keep_all || (cand.feasible && cand.multipliers_ok) {
                out.push(cand);
            }
        }
        if !next_subset(&mut subset, total_rows, max_active) {
            break;
        }
    }
    Ok(out)
}

/// Advances `subset` through all subsets of `0..total` of size <= cap, in
/// size-then-lexicographic order. Returns false when exhausted.
fn next_subset(subset: &mut Vec<usize>, total: usize, cap: usize) -> bool {
    // Try to advance the last element; on overflow, carry leftward.
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        let max_here = total - (k - i);
        if subset[i] < max_here {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    // Grow to the next size.
    if k < cap && k < total {
        *subset = (0..k + 1).collect();
        return true;
    }
    false
}

fn kkt_candidate(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    rows_a: &DMatrix<f64>,
    rows_b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    active: &[usize],
) -> Option<KktCandidate> {
    let n = h.nrows();
    let m = rows_a.nrows();
    let k = active.len();
    // KKT system: [2H  A_S'; A_S  0] [u; lambda] = [-lin; b_S].
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(2.0 * h));
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-lin));
    for (r, &row) in active.iter().enumerate() {
        let a_row = row_vector(rows_a, n, row);
        for c in 0..n {
            kkt[(n + r, c)] = a_row[c];
            kkt[(c, n + r)] = a_row[c];
        }
        rhs[n + r] = row_rhs(rows_b, lo, hi, row);
    }
    let sol = kkt.lu().solve(&rhs)?;
    let u = DVector::from_fn(n, |i, _| sol[i]);
    let lambda = DVector::from_fn(k, |i, _| sol[n + i]);

    let multipliers_ok = lambda.iter().all(|&l| l >= -tol::KKT_SIGN_TOL);
    let total_rows = m + 2 * n;
    let feasible = (0..total_rows).all(|row| {
        let val = row_vector(rows_a, n, row).transpose().dot(&u);
        val <= row_rhs(rows_b, lo, hi, row) + tol::KKT_FEASIBILITY_TOL
    });
    let value = (u.transpose() * h * &u)[(0, 0)] + lin.dot(&u);
    Some(KktCandidate {
        active_set: active.to_vec(),
        u,
        value,
        feasible,
        multipliers: lambda.iter().copied().collect(),
        multipliers_ok,
    })
}

/// Exact optimum `f*` of the condensed problem at state `x` (full cost,
/// constant term included).
pub fn qp_optimum(p: &CondensedProblem, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let lin = &p.g * x;
    let rhs = -(&p.xi * x + &p.tau);
    let sol = solve_constrained_qp_exact(&p.h, &lin, &p.theta, &rhs, &p.box_lo, &p.box_hi)?;
    let constant = (x.transpose() * &p.w * x)[(0, 0)];
    Ok((sol.u, sol.value + constant))
}

/// Exact optimum `f'*` of the tightened problem, plus the optimal coupled
/// multipliers.
pub fn tightened_optimum(t: &TightenedProblem<'_>) -> Result<(DVector<f64>, f64, DVector<f64>)> {
    let p = t.base;
    let lin = &p.g * &t.x;
    let rhs = -(&p.xi * &t.x + p.tau.add_scalar(t.c));
    let sol = solve_constrained_qp_exact(&p.h, &lin, &p.theta, &rhs, &p.box_lo, &p.box_hi)?;
    let constant = (t.x.transpose() * &p.w * &t.x)[(0, 0)];
    Ok((sol.u, sol.value + constant, sol.multipliers))
}

/// Exact dual function `q'(mu) = min over the box of L'(u, mu)`.
pub fn dual_function_exact(t: &TightenedProblem<'_>, mu: &DVector<f64>) -> Result<f64> {
    debug_assert!(mu.iter().all(|&v| v >= 0.0), "dual point must be nonnegative");
    let p = t.base;
    let lin = t.lagrangian_linear(mu);
    let (_, value) = solve_box_qp_exact(&p.h, &lin, &p.box_lo, &p.box_hi)?;
    Ok(value + t.lagrangian_constant(mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::condense;
    use crate::testutil::{twin_network, twin_u_bar0, twin_x0};
    use crate::tighten::{build_tightened, initial_norm_bound, SlaterCertificate};
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn box_qp_interior_minimum() {
        // 2u^2 + u over [-1, 1] -> u = -0.25, value -0.125
        let (u, v) = solve_box_qp_exact(
            &DMatrix::from_element(1, 1, 2.0),
            &vec1(1.0),
            &vec1(-1.0),
            &vec1(1.0),
        )
        .unwrap();
        assert_relative_eq!(u[0], -0.25, max_relative = 1e-12);
        assert_relative_eq!(v, -0.125, max_relative = 1e-12);
    }

    #[test]
    fn box_qp_clipped_minimum() {
        let (u, v) = solve_box_qp_exact(
            &DMatrix::from_element(1, 1, 2.0),
            &vec1(1.0),
            &vec1(0.0),
            &vec1(1.0),
        )
        .unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn box_qp_separable_two_dim() {
        // 2u1^2 + 2u2^2 + u1 - u2 over [-1,1]^2 -> (-0.25, 0.25)
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let lin = DVector::from_row_slice(&[1.0, -1.0]);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        let (u, _) = solve_box_qp_exact(&h, &lin, &lo, &hi).unwrap();
        assert_relative_eq!(u[0], -0.25, max_relative = 1e-12);
        assert_relative_eq!(u[1], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn box_qp_rejects_large_instances() {
        let n = tol::BOX_QP_MAX_DIM + 1;
        let h = DMatrix::identity(n, n);
        match solve_box_qp_exact(
            &h,
            &DVector::zeros(n),
            &DVector::from_element(n, -1.0),
            &DVector::from_element(n, 1.0),
        ) {
            Err(Error::InstanceTooLarge(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constrained_matches_box_when_rows_inactive() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let lin = vec1(1.0);
        let rows_a = DMatrix::from_element(1, 1, 1.0);
        let rows_b = vec1(10.0); // never active
        let sol =
            solve_constrained_qp_exact(&h, &lin, &rows_a, &rows_b, &vec1(-1.0), &vec1(1.0))
                .unwrap();
        let (u_box, v_box) =
            solve_box_qp_exact(&h, &lin, &vec1(-1.0), &vec1(1.0)).unwrap();
        assert_relative_eq!(sol.u[0], u_box[0], max_relative = 1e-12);
        assert_relative_eq!(sol.value, v_box, max_relative = 1e-12);
        assert_eq!(sol.multipliers, vec1(0.0));
    }

    #[test]
    fn constrained_single_active_row() {
        // min 2u^2 + u s.t. u <= -c with c = 0.5: unconstrained min -0.25
        // violates, so optimum sits at u = -0.5.
        let h = DMatrix::from_element(1, 1, 2.0);
        let lin = vec1(1.0);
        let rows_a = DMatrix::from_element(1, 1, 1.0);
        let rows_b = vec1(-0.5);
        let sol =
            solve_constrained_qp_exact(&h, &lin, &rows_a, &rows_b, &vec1(-2.0), &vec1(2.0))
                .unwrap();
        assert_relative_eq!(sol.u[0], -0.5, max_relative = 1e-12);
        assert!(sol.multipliers[0] > 0.0);
    }

    #[test]
    fn constrained_detects_infeasible_rows() {
        let h = DMatrix::from_element(1, 1, 2.0);
        let lin = vec1(0.0);
        // u <= -1 and -u <= -1 (u >= 1) is contradictory.
        let rows_a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let rows_b = DVector::from_row_slice(&[-1.0, -1.0]);
        match solve_constrained_qp_exact(&h, &lin, &rows_a, &rows_b, &vec1(-2.0), &vec1(2.0)) {
            Err(Error::Infeasible) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oracle_self_consistency() {
        // The reported optimum is feasible and no enumerated feasible
        // candidate beats it.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let lin = DVector::from_row_slice(&[1.0, -0.5]);
        let rows_a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let rows_b = DVector::from_row_slice(&[0.1]);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        let sol = solve_constrained_qp_exact(&h, &lin, &rows_a, &rows_b, &lo, &hi).unwrap();
        let all = enumerate_kkt_candidates(&h, &lin, &rows_a, &rows_b, &lo, &hi, true).unwrap();
        for cand in all.iter().filter(|c| c.feasible && c.multipliers_ok) {
            assert!(sol.value <= cand.value + 1e-12);
        }
        let row_val = rows_a.row(0).transpose().dot(&sol.u);
        assert!(row_val <= rows_b[0] + 1e-10);
    }

    #[test]
    fn box_qp_matches_projected_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let n = 3;
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
            let h = &raw * raw.transpose() + DMatrix::identity(n, n);
            let lin = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let lo = DVector::from_element(n, -1.0);
            let hi = DVector::from_element(n, 1.0);
            let (u_star, _) = solve_box_qp_exact(&h, &lin, &lo, &hi).unwrap();

            let lambda_max = nalgebra::SymmetricEigen::new(h.clone())
                .eigenvalues
                .iter()
                .copied()
                .fold(0.0, f64::max);
            let step = 1.0 / (2.0 * lambda_max);
            let mut u = DVector::zeros(n);
            for _ in 0..1_000_000 {
                let grad = 2.0 * (&h * &u) + &lin;
                let next = DVector::from_fn(n, |i, _| {
                    (u[i] - step * grad[i]).max(lo[i]).min(hi[i])
                });
                if (&next - &u).norm() < 1e-15 {
                    u = next;
                    break;
                }
                u = next;
            }
            assert!((u - u_star).norm() <= 1e-9);
        }
    }

    #[test]
    fn dual_function_at_zero_is_min_cost() {
        let net = twin_network();
        let p = condense(&net).unwrap();
        let x = twin_x0();
        let l = initial_norm_bound(&p, &x).unwrap();
        let slater = SlaterCertificate::new(&p, twin_u_bar0(), &x).unwrap();
        let t = build_tightened(&p, x.clone(), slater, l).unwrap();
        let q0 = dual_function_exact(&t, &DVector::zeros(p.m_c())).unwrap();
        let (u_min, v_min) =
            solve_box_qp_exact(&p.h, &(&p.g * &x), &p.box_lo, &p.box_hi).unwrap();
        let expected = v_min + (x.transpose() * &p.w * &x)[(0, 0)];
        assert_relative_eq!(q0, expected, max_relative = 1e-12);
        assert!(q0 > 0.0);
        assert_eq!(u_min.len(), p.n_u());
    }

    #[test]
    fn dual_function_concavity_and_weak_duality() {
        let net = twin_network();
        let p = condense(&net).unwrap();
        let x = twin_x0();
        let l = initial_norm_bound(&p, &x).unwrap();
        let slater = SlaterCertificate::new(&p, twin_u_bar0(), &x).unwrap();
        let t = build_tightened(&p, x.clone(), slater, l).unwrap();
        let (_, f_star_tight, _) = tightened_optimum(&t).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m1 = DVector::from_fn(p.m_c(), |_, _| rng.gen_range(0.0..0.5));
            let m2 = DVector::from_fn(p.m_c(), |_, _| rng.gen_range(0.0..0.5));
            let mid = (&m1 + &m2) * 0.5;
            let q1 = dual_function_exact(&t, &m1).unwrap();
            let q2 = dual_function_exact(&t, &m2).unwrap();
            let qm = dual_function_exact(&t, &mid).unwrap();
            assert!(qm >= 0.5 * (q1 + q2) - 1e-10);
            assert!(q1 <= f_star_tight + 1e-10);
        }
    }
}
