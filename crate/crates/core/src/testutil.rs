//! Deterministic fixture builders shared by unit and integration tests.
//!
//! Not part of the public API surface; kept in the library so both in-crate
//! tests and the integration suites can use the same instances.
#![doc(hidden)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::model::{Bounds, NetworkSpec, Polytope, SubsystemSpec};

/// Axis-aligned box `|x_i| <= half` with the full vertex list.
pub fn box_polytope(dim: usize, half: f64) -> Polytope {
    let mut a = DMatrix::zeros(2 * dim, dim);
    for i in 0..dim {
        a[(i, i)] = 1.0;
        a[(dim + i, i)] = -1.0;
    }
    let b = DVector::from_element(2 * dim, half);
    let mut vertices = Vec::with_capacity(1 << dim);
    for mask in 0..(1usize << dim) {
        vertices.push(DVector::from_fn(dim, |i, _| {
            if mask >> i & 1 == 1 {
                half
            } else {
                -half
            }
        }));
    }
    Polytope::new(a, b, vertices)
}

/// Polytope with no rows (whole space); handy for stripped-down instances.
pub fn free_polytope(dim: usize) -> Polytope {
    Polytope::new(
        DMatrix::zeros(0, dim),
        DVector::zeros(0),
        vec![DVector::zeros(dim)],
    )
}

fn scalar_subsystem(
    index: usize,
    a_self: f64,
    b_self: f64,
    couplings: &[(usize, f64)],
    k: f64,
    p: f64,
) -> SubsystemSpec {
    let mut a_blocks = BTreeMap::from([(index, DMatrix::from_element(1, 1, a_self))]);
    for &(j, v) in couplings {
        a_blocks.insert(j, DMatrix::from_element(1, 1, v));
    }
    SubsystemSpec {
        index,
        state_dim: 1,
        input_dim: 1,
        a_blocks,
        b_blocks: BTreeMap::from([(index, DMatrix::from_element(1, 1, b_self))]),
        q: DMatrix::identity(1, 1),
        r: DMatrix::identity(1, 1),
        p: DMatrix::from_element(1, 1, p),
        k: DMatrix::from_element(1, 1, k),
        input_box: Bounds::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)),
    }
}

/// Single scalar subsystem `x+ = a x + b u`, Q = R = P = 1, K = -a/b·0.9,
/// with configurable horizon. X and U carry no rows; Xf is `x <= 0.5`
/// (one-sided, matching the worked condensation example at N = 1).
pub fn scalar_network(a: f64, b: f64, horizon: usize) -> NetworkSpec {
    let mut s = scalar_subsystem(0, a, b, &[], -0.9 * a / b, 1.0);
    s.p = DMatrix::identity(1, 1);
    NetworkSpec {
        subsystems: vec![s],
        horizon,
        state_poly: free_polytope(1),
        terminal_poly: Polytope::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
            vec![DVector::from_element(1, 0.0)],
        ),
        input_poly: free_polytope(1),
    }
}

/// Fully validated scalar instance: two-sided Xf `|x| <= 0.5`,
/// X `|x| <= 3`, U `|u| <= 1.1`, P sized for the cost-decrease condition.
pub fn scalar_network_validated(a: f64, b: f64, horizon: usize) -> NetworkSpec {
    let k = -0.9 * a / b;
    let a_cl = a + b * k;
    let p = 1.05 * (1.0 + k * k) / (1.0 - a_cl * a_cl);
    let s = scalar_subsystem(0, a, b, &[], k, p);
    NetworkSpec {
        subsystems: vec![s],
        horizon,
        state_poly: box_polytope(1, 3.0),
        terminal_poly: box_polytope(1, 0.5),
        input_poly: box_polytope(1, 1.1),
    }
}

/// The TWIN instance: two coupled scalar subsystems,
/// A = [[0.5, 0.1], [0.1, 0.5]], B = I, K = diag(-0.5, -0.5), Q = R = I,
/// P = 1.4·I; X = |x_i| <= 2, Xf = |x_i| <= 0.5, N = 2. The aggregate input
/// set couples the subsystems through a shared budget |u_1 + u_2| <= 1.9,
/// which keeps the total row count within the exact-oracle cap.
pub fn twin_network() -> NetworkSpec {
    let sub = |i: usize, j: usize| {
        let mut s = scalar_subsystem(i, 0.5, 1.0, &[(j, 0.1)], -0.5, 1.4);
        s.input_box = Bounds::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0));
        s
    };
    let input_poly = Polytope::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]),
        DVector::from_element(2, 1.9),
        vec![
            DVector::from_row_slice(&[0.95, 0.95]),
            DVector::from_row_slice(&[-0.95, -0.95]),
        ],
    );
    NetworkSpec {
        subsystems: vec![sub(0, 1), sub(1, 0)],
        horizon: 2,
        state_poly: box_polytope(2, 2.0),
        terminal_poly: box_polytope(2, 0.5),
        input_poly,
    }
}

/// TWIN starting state used throughout the tests.
pub fn twin_x0() -> DVector<f64> {
    DVector::from_row_slice(&[1.0, -0.5])
}

/// A strictly feasible horizon input for TWIN at `twin_x0`, subsystem-major.
pub fn twin_u_bar0() -> DVector<f64> {
    DVector::from_row_slice(&[-0.4, 0.0, 0.2, 0.0])
}
