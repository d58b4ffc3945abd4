//! Parallel Jacobi inner loop: solves the Lagrangian subproblem to a
//! prescribed suboptimality with an a-priori sweep count backed by a
//! contraction certificate.
//!
//! Since the tightened constraints are affine in `u`, the Lagrangian's
//! quadratic part is independent of the multiplier, so one certificate
//! serves every outer iteration. Each sweep minimizes every subsystem block
//! exactly against the other blocks' previous values; under the weak
//! coupling condition the sweep map contracts in the block-maximum norm
//! with modulus `phi`, which yields the sweep count needed for a target
//! suboptimality.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::condense::CondensedProblem;
use crate::error::{Error, Result};
use crate::tighten::TightenedProblem;
use crate::tol;

/// Spectral quantities of the H blocks plus the certified Jacobi step
/// coefficient and contraction modulus.
#[derive(Debug, Clone)]
pub struct ContractionCertificate {
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
    /// Per block, the sum of max singular values of the off-diagonal blocks.
    pub offdiag_sigma_sum: Vec<f64>,
    pub gamma: f64,
    /// Contraction modulus in [0, 1); exactly 0 only for uncoupled isotropic
    /// blocks, where a single sweep is already exact.
    pub phi: f64,
    pub pass: bool,
}

fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = nalgebra::SymmetricEigen::new(m.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    m.singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Contraction modulus for a given step coefficient:
/// `max_i max{ 2g(lmax_i + s_i) - 1, 1 - 2g(lmin_i - s_i) }`.
pub fn phi_for_gamma(
    lambda_min: &[f64],
    lambda_max: &[f64],
    sigma_sum: &[f64],
    gamma: f64,
) -> f64 {
    lambda_min
        .iter()
        .zip(lambda_max)
        .zip(sigma_sum)
        .map(|((&lmin, &lmax), &s)| {
            (2.0 * gamma * (lmax + s) - 1.0).max(1.0 - 2.0 * gamma * (lmin - s))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Checks the weak coupling condition `lambda_min(H_ii) > sum_j sigma(H_ij)`
/// block by block and, when it holds, fixes the Jacobi step coefficient at
/// the midpoint of its admissible interval and computes the contraction
/// modulus.
pub fn certify_contraction(p: &CondensedProblem) -> Result<ContractionCertificate> {
    let m = p.n_subsystems();
    let mut lambda_min = Vec::with_capacity(m);
    let mut lambda_max = Vec::with_capacity(m);
    let mut sigma_sum = Vec::with_capacity(m);
    for i in 0..m {
        let (lmin, lmax) = sym_eigen_range(&p.h_block(i, i).into_owned());
        let s: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| max_singular_value(&p.h_block(i, j).into_owned()))
            .sum();
        lambda_min.push(lmin);
        lambda_max.push(lmax);
        sigma_sum.push(s);
    }
    let mut worst: Option<usize> = None;
    for i in 0..m {
        if lambda_min[i] <= sigma_sum[i] {
            let margin = sigma_sum[i] - lambda_min[i];
            if worst.is_none_or(|w| margin > sigma_sum[w] - lambda_min[w]) {
                worst = Some(i);
            }
        }
    }
    if let Some(i) = worst {
        return Err(Error::WeakCouplingViolated {
            block: i,
            lambda_min: lambda_min[i],
            sigma_sum: sigma_sum[i],
        });
    }
    let denom = lambda_max
        .iter()
        .zip(&sigma_sum)
        .map(|(&l, &s)| l + s)
        .fold(f64::NEG_INFINITY, f64::max);
    let gamma = 0.5 / denom;
    let phi = phi_for_gamma(&lambda_min, &lambda_max, &sigma_sum, gamma);
    Ok(ContractionCertificate {
        lambda_min,
        lambda_max,
        offdiag_sigma_sum: sigma_sum,
        gamma,
        phi,
        pass: true,
    })
}

/// Lipschitz constant of the Lagrangian over the box:
/// `||2H||_2 * rho + ||G x + Theta' mu||_2` with `rho` the norm of the
/// farthest box vertex.
pub fn lipschitz_bound(p: &CondensedProblem, mu: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let lin = &p.g * x + p.theta.transpose() * mu;
    let (_, lmax) = sym_eigen_range(&p.h);
    2.0 * lmax * p.box_radius() + lin.norm()
}

/// Smallest sweep count `p` with `Lambda M phi^p max_i D_i <= eps`, floored
/// at one sweep.
pub fn inner_iterations_needed(
    cert: &ContractionCertificate,
    lambda: f64,
    eps: f64,
    diameters: &[f64],
    n_subsystems: usize,
) -> usize {
    let max_d = diameters.iter().copied().fold(0.0, f64::max);
    let denom = lambda * n_subsystems as f64 * max_d;
    if denom <= eps || cert.phi <= 0.0 {
        return 1;
    }
    let p = (eps / denom).ln() / cert.phi.ln();
    (p.ceil() as usize).max(1)
}

/// Per-subsystem data needed for one block's local solve: the diagonal H
/// block, the structurally nonzero off-diagonal blocks in ascending
/// neighbor order, and the local box.
#[derive(Debug, Clone)]
pub(crate) struct BlockData {
    pub h_ii: DMatrix<f64>,
    pub coupling: Vec<(usize, DMatrix<f64>)>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

pub(crate) fn extract_block(p: &CondensedProblem, i: usize) -> BlockData {
    let m = p.n_subsystems();
    let b = &p.blocks[i];
    let coupling = (0..m)
        .filter(|&j| j != i)
        .filter_map(|j| {
            let block = p.h_block(i, j).into_owned();
            block.iter().any(|&v| v != 0.0).then_some((j, block))
        })
        .collect();
    BlockData {
        h_ii: p.h_block(i, i).into_owned(),
        coupling,
        lo: p.box_lo.rows(b.start, b.len()).into(),
        hi: p.box_hi.rows(b.start, b.len()).into(),
    }
}

/// Exact restricted minimizer for one block against fixed neighbor values.
/// `cache` carries the last accepted face pattern; trying it first makes
/// repeated solves near-constant cost once the active faces settle.
pub(crate) fn block_argmin_against(
    bd: &BlockData,
    lin_i: &DVector<f64>,
    blocks_u: &[DVector<f64>],
    cache: &mut Option<usize>,
) -> Result<DVector<f64>> {
    let mut c = lin_i.clone();
    for (j, block) in &bd.coupling {
        c += 2.0 * (block * &blocks_u[*j]);
    }
    box_argmin_cached(&bd.h_ii, &c, &bd.lo, &bd.hi, cache)
}

/// Exact minimizer of `v' H v + c' v` over a box; face-pattern enumeration
/// with KKT screening for small blocks, projected Newton otherwise.
pub fn box_argmin_exact(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<DVector<f64>> {
    box_argmin_cached(h, c, lo, hi, &mut None)
}

fn box_argmin_cached(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    cache: &mut Option<usize>,
) -> Result<DVector<f64>> {
    let d = h.nrows();
    if d > tol::LOCAL_ENUM_MAX_DIM {
        return projected_newton(h, c, lo, hi);
    }
    let total = 3usize.pow(d as u32);
    let codes = cache
        .iter()
        .copied()
        .chain((0..total).filter(|&code| Some(code) != *cache));
    let mut pattern = vec![0u8; d];
    for code in codes {
        decode_pattern(code, &mut pattern);
        if let Some(v) = try_pattern(h, c, lo, hi, &pattern) {
            *cache = Some(code);
            return Ok(v);
        }
    }
    Err(Error::LocalSolveFailed)
}

fn decode_pattern(code: usize, pattern: &mut [u8]) {
    let mut c = code;
    for digit in pattern.iter_mut() {
        *digit = (c % 3) as u8;
        c /= 3;
    }
}

/// Solves the free coordinates of a face pattern and accepts it when primal
/// feasibility and the clamped-gradient signs hold; by convexity any such
/// KKT point is the global minimizer.
fn try_pattern(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    pattern: &[u8],
) -> Option<DVector<f64>> {
    const FEAS_TOL: f64 = 1e-11;
    const SIGN_TOL: f64 = 1e-11;
    let d = pattern.len();
    let free: Vec<usize> = (0..d).filter(|&i| pattern[i] == 0).collect();
    let mut v = DVector::from_fn(d, |i, _| match pattern[i] {
        1 => lo[i],
        2 => hi[i],
        _ => 0.0,
    });
    if !free.is_empty() {
        let nf = free.len();
        let mut h_ff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            let mut r = -0.5 * c[i];
            for j in 0..d {
                if pattern[j] != 0 {
                    r -= h[(i, j)] * v[j];
                }
            }
            rhs[a] = r;
            for (b, &j) in free.iter().enumerate() {
                h_ff[(a, b)] = h[(i, j)];
            }
        }
        let sol = h_ff.cholesky()?.solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            if sol[a] < lo[i] - FEAS_TOL || sol[a] > hi[i] + FEAS_TOL {
                return None;
            }
            v[i] = sol[a];
        }
    }
    let grad = 2.0 * (h * &v) + c;
    let signs_ok = pattern.iter().enumerate().all(|(i, &p)| match p {
        1 => grad[i] >= -SIGN_TOL,
        2 => grad[i] <= SIGN_TOL,
        _ => true,
    });
    if !signs_ok {
        return None;
    }
    // Keep the iterate inside the box even in degenerate at-bound cases.
    for i in 0..d {
        v[i] = v[i].max(lo[i]).min(hi[i]);
    }
    Some(v)
}

fn projected_newton(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = h.nrows();
    let (_, lmax) = sym_eigen_range(h);
    let step = 1.0 / (2.0 * lmax);
    let mut v = DVector::from_fn(d, |i, _| 0.0f64.max(lo[i]).min(hi[i]));
    for _ in 0..500 {
        let grad = 2.0 * (h * &v) + c;
        // Fixed-point test of the projected-gradient map.
        let moved = DVector::from_fn(d, |i, _| (v[i] - step * grad[i]).max(lo[i]).min(hi[i]));
        if (&moved - &v).norm() <= tol::LOCAL_SOLVE_TOL * (1.0 + v.norm()) {
            return Ok(v);
        }
        let active: Vec<bool> = (0..d)
            .map(|i| {
                (v[i] <= lo[i] + tol::LOCAL_SOLVE_TOL && grad[i] > 0.0)
                    || (v[i] >= hi[i] - tol::LOCAL_SOLVE_TOL && grad[i] < 0.0)
            })
            .collect();
        let free: Vec<usize> = (0..d).filter(|&i| !active[i]).collect();
        if free.is_empty() {
            v = moved;
            continue;
        }
        let nf = free.len();
        let mut h_ff = DMatrix::zeros(nf, nf);
        let mut g_f = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            g_f[a] = grad[i];
            for (b, &j) in free.iter().enumerate() {
                h_ff[(a, b)] = h[(i, j)];
            }
        }
        let dir = match h_ff.cholesky() {
            Some(ch) => ch.solve(&(-0.5 * g_f)),
            None => return Err(Error::LocalSolveFailed),
        };
        for (a, &i) in free.iter().enumerate() {
            v[i] = (v[i] + dir[a]).max(lo[i]).min(hi[i]);
        }
    }
    Err(Error::LocalSolveFailed)
}

/// Sweep executor shared by the monolithic solver and the distributed
/// harness: same block data, same scan order, same pattern caches, so both
/// paths perform identical arithmetic.
#[derive(Debug)]
pub(crate) struct JacobiDriver {
    pub blocks: Vec<BlockData>,
    pub caches: Vec<Option<usize>>,
    pub parallel: bool,
}

impl JacobiDriver {
    pub fn new(p: &CondensedProblem, parallel: bool) -> Self {
        let blocks: Vec<BlockData> = (0..p.n_subsystems()).map(|i| extract_block(p, i)).collect();
        let caches = vec![None; blocks.len()];
        JacobiDriver {
            blocks,
            caches,
            parallel,
        }
    }

    /// One synchronous sweep: every block minimizes against the previous
    /// iterate. Block solves are independent; parallel and serial execution
    /// produce the same result.
    pub fn sweep(
        &mut self,
        lin_blocks: &[DVector<f64>],
        blocks_u: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let blocks = &self.blocks;
        if self.parallel && blocks.len() > 1 {
            self.caches
                .par_iter_mut()
                .enumerate()
                .map(|(i, cache)| block_argmin_against(&blocks[i], &lin_blocks[i], blocks_u, cache))
                .collect()
        } else {
            self.caches
                .iter_mut()
                .enumerate()
                .map(|(i, cache)| block_argmin_against(&blocks[i], &lin_blocks[i], blocks_u, cache))
                .collect()
        }
    }
}

pub(crate) fn split_blocks(p: &CondensedProblem, u: &DVector<f64>) -> Vec<DVector<f64>> {
    p.blocks
        .iter()
        .map(|b| u.rows(b.start, b.len()).into())
        .collect()
}

pub(crate) fn flatten_blocks(p: &CondensedProblem, blocks_u: &[DVector<f64>]) -> DVector<f64> {
    let mut u = DVector::zeros(p.n_u());
    for (b, part) in p.blocks.iter().zip(blocks_u) {
        u.rows_mut(b.start, b.len()).copy_from(part);
    }
    u
}

/// Result of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolve {
    pub u: DVector<f64>,
    pub sweeps: usize,
    /// Flattened iterate after every sweep, starting with the warm start.
    pub iterates: Option<Vec<DVector<f64>>>,
}

/// Options for the inner solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct InnerOpts {
    pub parallel: bool,
    pub record_iterates: bool,
}

/// Minimizes the Lagrangian to suboptimality `eps` by running the certified
/// number of Jacobi sweeps from the given warm start.
pub fn solve_lagrangian(
    tight: &TightenedProblem<'_>,
    mu: &DVector<f64>,
    eps: f64,
    cert: &ContractionCertificate,
    warm: &DVector<f64>,
    opts: InnerOpts,
) -> Result<InnerSolve> {
    let mut driver = JacobiDriver::new(tight.base, opts.parallel);
    run_inner(tight, mu, eps, cert, warm, &mut driver, opts.record_iterates)
}

/// Sweep budget for one outer iteration, from the Lipschitz constant at the
/// current dual point. The coordinator of the distributed harness and the
/// monolithic solver both use this, so their round structure is identical.
pub(crate) fn inner_sweep_count(
    tight: &TightenedProblem<'_>,
    cert: &ContractionCertificate,
    mu: &DVector<f64>,
    eps: f64,
) -> usize {
    let p = tight.base;
    let lin = tight.lagrangian_linear(mu);
    let (_, lmax) = sym_eigen_range(&p.h);
    let lambda = 2.0 * lmax * p.box_radius() + lin.norm();
    inner_iterations_needed(cert, lambda, eps, &p.block_diameters(), p.n_subsystems())
}

pub(crate) fn run_inner(
    tight: &TightenedProblem<'_>,
    mu: &DVector<f64>,
    eps: f64,
    cert: &ContractionCertificate,
    warm: &DVector<f64>,
    driver: &mut JacobiDriver,
    record: bool,
) -> Result<InnerSolve> {
    let p = tight.base;
    let lin = tight.lagrangian_linear(mu);
    let p_bar = inner_sweep_count(tight, cert, mu, eps);
    let lin_blocks: Vec<DVector<f64>> = p
        .blocks
        .iter()
        .map(|b| lin.rows(b.start, b.len()).into())
        .collect();
    let mut blocks_u = split_blocks(p, warm);
    let mut iterates = record.then(|| vec![flatten_blocks(p, &blocks_u)]);
    for _ in 0..p_bar {
        blocks_u = driver.sweep(&lin_blocks, &blocks_u)?;
        if let Some(it) = &mut iterates {
            it.push(flatten_blocks(p, &blocks_u));
        }
    }
    Ok(InnerSolve {
        u: flatten_blocks(p, &blocks_u),
        sweeps: p_bar,
        iterates,
    })
}

/// Exact minimizer of the Lagrangian restricted to subsystem `i`, holding
/// every other block of `current` fixed.
pub fn local_argmin(
    tight: &TightenedProblem<'_>,
    mu: &DVector<f64>,
    current: &DVector<f64>,
    i: usize,
) -> Result<DVector<f64>> {
    let p = tight.base;
    assert!(i < p.n_subsystems(), "subsystem index out of range");
    let lin = tight.lagrangian_linear(mu);
    let bd = extract_block(p, i);
    let lin_i: DVector<f64> = lin.rows(p.blocks[i].start, p.blocks[i].len()).into();
    let blocks_u = split_blocks(p, current);
    block_argmin_against(&bd, &lin_i, &blocks_u, &mut None)
}
