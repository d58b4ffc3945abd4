//! Interconnected subsystem network: specification types, aggregate model
//! assembly, and the structural certificates (Schur stability, terminal-set
//! invariance, neighborhood graphs).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tol;

/// Componentwise bounds of a hyperbox, `lo <= v <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Bounds {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        Bounds { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// True when every coordinate satisfies `lo < hi`.
    pub fn has_interior(&self) -> bool {
        self.lo.iter().zip(self.hi.iter()).all(|(l, h)| l < h)
    }

    pub fn contains(&self, v: &DVector<f64>, slack: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(x, (l, h))| *x >= l - slack && *x <= h + slack)
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| v[i].max(self.lo[i]).min(self.hi[i]))
    }

    pub fn is_finite(&self) -> bool {
        self.lo.iter().all(|x| x.is_finite()) && self.hi.iter().all(|x| x.is_finite())
    }
}

/// Polytope `{ x : a x <= b }` stored together with an explicit vertex list.
///
/// Vertex enumeration is out of scope; the invariance and norm-bound checks
/// need the vertices, so they are supplied in the configuration and
/// cross-checked against the inequality description at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub vertices: Vec<DVector<f64>>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, vertices: Vec<DVector<f64>>) -> Self {
        Polytope { a, b, vertices }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// Row slacks `b - a x`; nonnegative entries mean the row is satisfied.
    pub fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * x
    }

    /// Minimum row slack, `+inf` for a row-free polytope.
    pub fn min_slack(&self, x: &DVector<f64>) -> f64 {
        self.slacks(x).iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        self.min_slack(x) >= -slack
    }

    /// Validates the vertex list against the inequality description and
    /// checks for a strict interior witness (the vertex centroid).
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.b.len() != self.rows() {
            return Err(Error::dims(format!(
                "{field}: inequality matrix has {} rows but rhs has {} entries",
                self.rows(),
                self.b.len()
            )));
        }
        if self.vertices.is_empty() {
            return Err(Error::validation(field, "vertex list is empty"));
        }
        for (idx, v) in self.vertices.iter().enumerate() {
            if v.len() != self.dim() {
                return Err(Error::dims(format!(
                    "{field}: vertex {idx} has dimension {} but the polytope lives in R^{}",
                    v.len(),
                    self.dim()
                )));
            }
            if !self.contains(v, tol::INTERIOR_STRICT) {
                return Err(Error::validation(
                    format!("{field}.vertices[{idx}]"),
                    format!("vertex violates an inequality by {:.3e}", -self.min_slack(v)),
                ));
            }
        }
        let centroid = self.centroid();
        if self.min_slack(&centroid) <= tol::INTERIOR_STRICT {
            return Err(Error::validation(
                field,
                "no strict interior witness: the vertex centroid is not strictly feasible",
            ));
        }
        Ok(())
    }

    pub fn centroid(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }
}

/// One subsystem of the network: local dynamics blocks, weights, terminal
/// data, and the per-step input box.
#[derive(Debug, Clone)]
pub struct SubsystemSpec {
    pub index: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    /// `A^{ij}` blocks keyed by neighbor id; must contain the self block.
    pub a_blocks: BTreeMap<usize, DMatrix<f64>>,
    /// `B^{ij}` blocks keyed by neighbor id.
    pub b_blocks: BTreeMap<usize, DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Local feedback gain, `input_dim x state_dim`.
    pub k: DMatrix<f64>,
    /// Stage input box Ω_i.
    pub input_box: Bounds,
}

/// The network as the user states it: subsystems, horizon, and the aggregate
/// polytopes X, Xf, U.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub subsystems: Vec<SubsystemSpec>,
    pub horizon: usize,
    pub state_poly: Polytope,
    pub terminal_poly: Polytope,
    pub input_poly: Polytope,
}

/// Offsets of each subsystem inside aggregate state / input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    pub state_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
    pub state_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    pub n_x: usize,
    pub n_u: usize,
}

impl Dims {
    pub fn from_network(network: &NetworkSpec) -> Self {
        let mut state_offsets = Vec::with_capacity(network.subsystems.len());
        let mut input_offsets = Vec::with_capacity(network.subsystems.len());
        let mut state_dims = Vec::with_capacity(network.subsystems.len());
        let mut input_dims = Vec::with_capacity(network.subsystems.len());
        let (mut n_x, mut n_u) = (0, 0);
        for s in &network.subsystems {
            state_offsets.push(n_x);
            input_offsets.push(n_u);
            state_dims.push(s.state_dim);
            input_dims.push(s.input_dim);
            n_x += s.state_dim;
            n_u += s.input_dim;
        }
        Dims {
            state_offsets,
            input_offsets,
            state_dims,
            input_dims,
            n_x,
            n_u,
        }
    }

    pub fn n_subsystems(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_block<'a>(&self, x: &'a DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.state_offsets[i], self.state_dims[i]).into()
    }
}

/// Block-assembled centralized model.
#[derive(Debug, Clone)]
pub struct AggregateModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub dims: Dims,
}

impl AggregateModel {
    /// Closed-loop matrix `A + B K`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.k
    }
}

/// Neighborhood structure of the coupling graph. `neighbors[i]` is the set
/// of subsystems with a direct dynamical interaction on subsystem `i`,
/// including `i` itself.
#[derive(Debug, Clone)]
pub struct CouplingGraph {
    neighbors: Vec<BTreeSet<usize>>,
}

impl CouplingGraph {
    pub fn from_network(network: &NetworkSpec) -> Self {
        let neighbors = network
            .subsystems
            .iter()
            .map(|s| {
                let mut n: BTreeSet<usize> = s.a_blocks.keys().copied().collect();
                n.extend(s.b_blocks.keys().copied());
                n.insert(s.index);
                n
            })
            .collect();
        CouplingGraph { neighbors }
    }

    pub fn n_subsystems(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> Result<&BTreeSet<usize>> {
        self.neighbors.get(i).ok_or(Error::UnknownSubsystem(i))
    }

    /// The r-step extended neighborhood: N^i_1 = N^i and
    /// N^i_r = union of N^j over j in N^i_{r-1}.
    pub fn extended_neighborhood(&self, i: usize, r: usize) -> Result<BTreeSet<usize>> {
        assert!(r >= 1, "extended neighborhood requires r >= 1");
        let mut current = self.neighbors(i)?.clone();
        for _ in 1..r {
            let mut next = BTreeSet::new();
            for &j in &current {
                next.extend(self.neighbors(j)?.iter().copied());
            }
            if next == current {
                break;
            }
            current = next;
        }
        Ok(current)
    }
}

/// Assembles the centralized model from the per-subsystem blocks. Blocks not
/// declared are exactly zero in the aggregate.
pub fn assemble_aggregate(network: &NetworkSpec) -> Result<AggregateModel> {
    let dims = Dims::from_network(network);
    let m = network.subsystems.len();
    let mut a = DMatrix::zeros(dims.n_x, dims.n_x);
    let mut b = DMatrix::zeros(dims.n_x, dims.n_u);
    let mut q = DMatrix::zeros(dims.n_x, dims.n_x);
    let mut r = DMatrix::zeros(dims.n_u, dims.n_u);
    let mut p = DMatrix::zeros(dims.n_x, dims.n_x);
    let mut k = DMatrix::zeros(dims.n_u, dims.n_x);

    for (i, s) in network.subsystems.iter().enumerate() {
        let (ro, ni) = (dims.state_offsets[i], dims.state_dims[i]);
        for (&j, block) in &s.a_blocks {
            if j >= m {
                return Err(Error::UnknownSubsystem(j));
            }
            let (co, nj) = (dims.state_offsets[j], dims.state_dims[j]);
            if block.nrows() != ni || block.ncols() != nj {
                return Err(Error::dims(format!(
                    "A block ({i},{j}) is {}x{}, expected {ni}x{nj}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            a.view_mut((ro, co), (ni, nj)).copy_from(block);
        }
        for (&j, block) in &s.b_blocks {
            if j >= m {
                return Err(Error::UnknownSubsystem(j));
            }
            let (co, mj) = (dims.input_offsets[j], dims.input_dims[j]);
            if block.nrows() != ni || block.ncols() != mj {
                return Err(Error::dims(format!(
                    "B block ({i},{j}) is {}x{}, expected {ni}x{mj}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            b.view_mut((ro, co), (ni, mj)).copy_from(block);
        }
        let (io, mi) = (dims.input_offsets[i], dims.input_dims[i]);
        if s.q.nrows() != ni || s.q.ncols() != ni {
            return Err(Error::dims(format!("Q block {i} has wrong shape")));
        }
        if s.r.nrows() != mi || s.r.ncols() != mi {
            return Err(Error::dims(format!("R block {i} has wrong shape")));
        }
        if s.p.nrows() != ni || s.p.ncols() != ni {
            return Err(Error::dims(format!("P block {i} has wrong shape")));
        }
        if s.k.nrows() != mi || s.k.ncols() != ni {
            return Err(Error::dims(format!("K block {i} has wrong shape")));
        }
        q.view_mut((ro, ro), (ni, ni)).copy_from(&s.q);
        p.view_mut((ro, ro), (ni, ni)).copy_from(&s.p);
        r.view_mut((io, io), (mi, mi)).copy_from(&s.r);
        k.view_mut((io, ro), (mi, ni)).copy_from(&s.k);
    }

    Ok(AggregateModel {
        a,
        b,
        q,
        r,
        p,
        k,
        dims,
    })
}

/// Largest eigenvalue magnitude of a square real matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max)
}

/// Outcome of the Schur stability check on `A + B K`.
#[derive(Debug, Clone, Copy)]
pub struct SchurCertificate {
    pub radius: f64,
    pub pass: bool,
}

/// Verifies that the aggregate feedback gain is block-diagonal (the control
/// law is decentralized) and that `A + B K` is Schur.
pub fn check_schur(model: &AggregateModel) -> Result<SchurCertificate> {
    let dims = &model.dims;
    for i in 0..dims.n_subsystems() {
        for j in 0..dims.n_subsystems() {
            if i == j {
                continue;
            }
            let block = model.k.view(
                (dims.input_offsets[i], dims.state_offsets[j]),
                (dims.input_dims[i], dims.state_dims[j]),
            );
            for r in 0..block.nrows() {
                for c in 0..block.ncols() {
                    if block[(r, c)] != 0.0 {
                        return Err(Error::NotBlockDiagonalK {
                            row: dims.input_offsets[i] + r,
                            col: dims.state_offsets[j] + c,
                        });
                    }
                }
            }
        }
    }
    let radius = spectral_radius(&model.closed_loop());
    Ok(SchurCertificate {
        radius,
        pass: radius < 1.0 - tol::SCHUR_MARGIN,
    })
}

/// Outcome of the terminal-set invariance check.
#[derive(Debug, Clone, Copy)]
pub struct InvarianceCertificate {
    pub worst_margin: f64,
    pub pass: bool,
}

/// Checks that every vertex of the terminal set maps strictly inside it
/// under the closed loop. By convexity this certifies that the whole set
/// interior is mapped into the interior.
pub fn check_terminal_invariance(
    model: &AggregateModel,
    terminal: &Polytope,
    vertex_cap: usize,
) -> Result<InvarianceCertificate> {
    if terminal.vertices.len() > vertex_cap {
        return Err(Error::VertexEnumerationTooLarge {
            count: terminal.vertices.len(),
            cap: vertex_cap,
        });
    }
    let a_cl = model.closed_loop();
    let mut worst = f64::INFINITY;
    for v in &terminal.vertices {
        let mapped = &a_cl * v;
        worst = worst.min(terminal.min_slack(&mapped));
    }
    Ok(InvarianceCertificate {
        worst_margin: worst,
        pass: worst > tol::INTERIOR_STRICT,
    })
}

fn check_spd(m: &DMatrix<f64>, field: &str) -> Result<()> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims(format!("{field} is not square")));
    }
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                return Err(Error::validation(field, "matrix is not symmetric"));
            }
        }
    }
    let min_eig = nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        return Err(Error::validation(
            field,
            format!("matrix is not positive definite (min eigenvalue {min_eig:.3e})"),
        ));
    }
    Ok(())
}

impl NetworkSpec {
    pub fn n_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    /// Runs all structural validations: subsystem invariants, block shape
    /// consistency, polytope consistency, interior witnesses, and the
    /// terminal-set containment Xf ⊆ X.
    pub fn validate(&self) -> Result<()> {
        if self.subsystems.is_empty() {
            return Err(Error::validation("subsystems", "network has no subsystems"));
        }
        if self.horizon < 1 {
            return Err(Error::HorizonTooSmall(self.horizon));
        }
        let m = self.subsystems.len();
        for (i, s) in self.subsystems.iter().enumerate() {
            let field = format!("subsystems[{i}]");
            if s.index != i {
                return Err(Error::validation(
                    format!("{field}.index"),
                    format!("index {} does not match position {i}", s.index),
                ));
            }
            if s.state_dim == 0 || s.input_dim == 0 {
                return Err(Error::validation(&field, "zero state or input dimension"));
            }
            check_spd(&s.q, &format!("{field}.Q"))?;
            check_spd(&s.r, &format!("{field}.R"))?;
            check_spd(&s.p, &format!("{field}.P"))?;
            if s.input_box.dim() != s.input_dim {
                return Err(Error::dims(format!("{field}.input_box dimension")));
            }
            if !s.input_box.has_interior() {
                return Err(Error::validation(
                    format!("{field}.input_box"),
                    "box has empty interior (needs lo < hi in every coordinate)",
                ));
            }
            if !s.a_blocks.contains_key(&i) {
                return Err(Error::validation(
                    format!("{field}.a_blocks"),
                    "missing self block (i must belong to its own neighborhood)",
                ));
            }
            for &j in s.a_blocks.keys().chain(s.b_blocks.keys()) {
                if j >= m {
                    return Err(Error::UnknownSubsystem(j));
                }
            }
        }
        // Shape consistency is rechecked during assembly.
        let agg = assemble_aggregate(self)?;
        let n_x = agg.dims.n_x;
        for (poly, name) in [
            (&self.state_poly, "X"),
            (&self.terminal_poly, "Xf"),
            (&self.input_poly, "U"),
        ] {
            let expect = if name == "U" { agg.dims.n_u } else { n_x };
            if poly.dim() != expect {
                return Err(Error::dims(format!(
                    "{name} lives in R^{} but the aggregate dimension is {expect}",
                    poly.dim()
                )));
            }
            poly.validate(name)?;
        }
        // Xf ⊆ X by vertex containment.
        for (idx, v) in self.terminal_poly.vertices.iter().enumerate() {
            if !self.state_poly.contains(v, tol::INTERIOR_STRICT) {
                return Err(Error::validation(
                    format!("Xf.vertices[{idx}]"),
                    "terminal-set vertex lies outside X",
                ));
            }
        }
        Ok(())
    }
}
