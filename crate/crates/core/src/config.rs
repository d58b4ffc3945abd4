//! Configuration document: parsing, validation, and the mapping onto the
//! network types. Matrices are row-major nested arrays with explicit
//! dimensions; nothing is inferred from data shapes.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condense::{condense, CondensedProblem};
use crate::error::{Error, Result};
use crate::model::{Bounds, NetworkSpec, Polytope, SubsystemSpec};
use crate::tighten::SlaterCertificate;
use crate::tol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixConfig {
    pub fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows {
            return Err(Error::validation(
                field,
                format!("declared {} rows but data has {}", self.rows, self.data.len()),
            ));
        }
        for (i, row) in self.data.iter().enumerate() {
            if row.len() != self.cols {
                return Err(Error::validation(
                    field,
                    format!(
                        "declared {} cols but data row {i} has {}",
                        self.cols,
                        row.len()
                    ),
                ));
            }
        }
        let flat: Vec<f64> = self.data.iter().flatten().copied().collect();
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &flat))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixConfig {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingBlockConfig {
    pub neighbor: usize,
    pub matrix: MatrixConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemConfig {
    pub index: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub a_blocks: Vec<CouplingBlockConfig>,
    pub b_blocks: Vec<CouplingBlockConfig>,
    pub q: MatrixConfig,
    pub r: MatrixConfig,
    pub p: MatrixConfig,
    pub k: MatrixConfig,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeConfig {
    pub a: MatrixConfig,
    pub b: Vec<f64>,
    pub vertices: Vec<Vec<f64>>,
}

impl PolytopeConfig {
    fn to_polytope(&self, field: &str) -> Result<Polytope> {
        let a = self.a.to_matrix(&format!("{field}.a"))?;
        let dim = a.ncols();
        for (i, v) in self.vertices.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::validation(
                    format!("{field}.vertices[{i}]"),
                    format!("vertex has dimension {}, polytope lives in R^{dim}", v.len()),
                ));
            }
        }
        Ok(Polytope::new(
            a,
            DVector::from_row_slice(&self.b),
            self.vertices
                .iter()
                .map(|v| DVector::from_row_slice(v))
                .collect(),
        ))
    }

    pub fn from_polytope(p: &Polytope) -> Self {
        PolytopeConfig {
            a: MatrixConfig::from_matrix(&p.a),
            b: p.b.iter().copied().collect(),
            vertices: p
                .vertices
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
        }
    }
}

/// Solver options carried in the config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Echoed into the trace header; reserved for sampling diagnostics.
    pub seed: u64,
    pub early_exit: bool,
    pub single_thread: bool,
    /// Cap on terminal-set vertices enumerated by the invariance check.
    pub vertex_cap: usize,
    /// Emit one trace sub-record per outer iteration.
    pub trace_outer_records: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            seed: 0,
            early_exit: false,
            single_thread: false,
            vertex_cap: tol::VERTEX_CAP_DEFAULT,
            trace_outer_records: false,
        }
    }
}

/// The problem as the user states it, one document per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub schema_version: u32,
    pub horizon: usize,
    pub subsystems: Vec<SubsystemConfig>,
    /// Aggregate state constraints X.
    pub state_constraints: PolytopeConfig,
    /// Terminal constraints Xf.
    pub terminal_constraints: PolytopeConfig,
    /// Aggregate input constraints U.
    pub input_constraints: PolytopeConfig,
    pub x0: Vec<f64>,
    /// Off-line Slater vector for the first step, subsystem-major.
    pub u_bar0: Vec<f64>,
    #[serde(default)]
    pub delta0: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
}

pub const SCHEMA_VERSION: u32 = 1;

impl ConfigDocument {
    pub fn to_network(&self) -> Result<NetworkSpec> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let mut subsystems = Vec::with_capacity(self.subsystems.len());
        for (i, s) in self.subsystems.iter().enumerate() {
            let field = format!("subsystems[{i}]");
            let mut a_blocks = BTreeMap::new();
            for blk in &s.a_blocks {
                let m = blk
                    .matrix
                    .to_matrix(&format!("{field}.a_blocks[{}]", blk.neighbor))?;
                if a_blocks.insert(blk.neighbor, m).is_some() {
                    return Err(Error::validation(
                        format!("{field}.a_blocks"),
                        format!("duplicate neighbor {}", blk.neighbor),
                    ));
                }
            }
            let mut b_blocks = BTreeMap::new();
            for blk in &s.b_blocks {
                let m = blk
                    .matrix
                    .to_matrix(&format!("{field}.b_blocks[{}]", blk.neighbor))?;
                if b_blocks.insert(blk.neighbor, m).is_some() {
                    return Err(Error::validation(
                        format!("{field}.b_blocks"),
                        format!("duplicate neighbor {}", blk.neighbor),
                    ));
                }
            }
            if s.input_lo.len() != s.input_dim || s.input_hi.len() != s.input_dim {
                return Err(Error::validation(
                    format!("{field}.input_lo"),
                    "input box length does not match input_dim",
                ));
            }
            subsystems.push(SubsystemSpec {
                index: s.index,
                state_dim: s.state_dim,
                input_dim: s.input_dim,
                a_blocks,
                b_blocks,
                q: s.q.to_matrix(&format!("{field}.Q"))?,
                r: s.r.to_matrix(&format!("{field}.R"))?,
                p: s.p.to_matrix(&format!("{field}.P"))?,
                k: s.k.to_matrix(&format!("{field}.K"))?,
                input_box: Bounds::new(
                    DVector::from_row_slice(&s.input_lo),
                    DVector::from_row_slice(&s.input_hi),
                ),
            });
        }
        Ok(NetworkSpec {
            subsystems,
            horizon: self.horizon,
            state_poly: self.state_constraints.to_polytope("state_constraints")?,
            terminal_poly: self
                .terminal_constraints
                .to_polytope("terminal_constraints")?,
            input_poly: self.input_constraints.to_polytope("input_constraints")?,
        })
    }
}

/// A parsed, fully validated instance.
#[derive(Debug)]
pub struct LoadedInstance {
    pub doc: ConfigDocument,
    pub network: NetworkSpec,
    pub problem: CondensedProblem,
    pub x0: DVector<f64>,
    pub u_bar0: DVector<f64>,
    /// Hex digest identifying the document, echoed into traces.
    pub hash: String,
}

pub fn parse_config(json: &str) -> Result<ConfigDocument> {
    Ok(serde_json::from_str(json)?)
}

pub fn serialize_config(doc: &ConfigDocument) -> String {
    serde_json::to_string_pretty(doc).expect("config serialization cannot fail")
}

/// First 16 hex characters of the SHA-256 of the canonical serialization.
pub fn instance_hash(doc: &ConfigDocument) -> String {
    let canonical = serde_json::to_string(doc).expect("config serialization cannot fail");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Loads and fully validates a config document: model invariants, polytope
/// consistency, initial state membership, and strict feasibility of the
/// off-line Slater vector for the t = 0 condensed constraints.
pub fn load_config(path: &Path) -> Result<LoadedInstance> {
    let text = std::fs::read_to_string(path)?;
    load_config_str(&text)
}

pub fn load_config_str(text: &str) -> Result<LoadedInstance> {
    let doc = parse_config(text)?;
    let network = doc.to_network()?;
    network.validate()?;
    let problem = condense(&network)?;
    let x0 = DVector::from_row_slice(&doc.x0);
    if x0.len() != problem.n_x {
        return Err(Error::validation(
            "x0",
            format!("length {} does not match aggregate state dimension {}", x0.len(), problem.n_x),
        ));
    }
    if !network.state_poly.contains(&x0, tol::INTERIOR_STRICT) {
        return Err(Error::validation("x0", "initial state lies outside X"));
    }
    let u_bar0 = DVector::from_row_slice(&doc.u_bar0);
    if u_bar0.len() != problem.n_u() {
        return Err(Error::validation(
            "u_bar0",
            format!(
                "length {} does not match stacked input dimension {}",
                u_bar0.len(),
                problem.n_u()
            ),
        ));
    }
    match SlaterCertificate::new(&problem, u_bar0.clone(), &x0) {
        Ok(_) => {}
        Err(Error::SlaterViolated { min_margin }) => {
            return Err(Error::validation(
                "u_bar0",
                format!("Slater margin {min_margin:.6e} <= 0"),
            ));
        }
        Err(Error::Validation { reason, .. }) => {
            return Err(Error::validation("u_bar0", reason));
        }
        Err(e) => return Err(e),
    }
    if let Some(d) = doc.delta0 {
        if d <= 0.0 {
            return Err(Error::validation("delta0", "must be positive when given"));
        }
    }
    let hash = instance_hash(&doc);
    Ok(LoadedInstance {
        doc,
        network,
        problem,
        x0,
        u_bar0,
        hash,
    })
}

/// Serializes a network back into a document; the inverse of `to_network`,
/// used to write fixtures and by tests.
pub fn document_from_network(
    net: &NetworkSpec,
    x0: &DVector<f64>,
    u_bar0: &DVector<f64>,
) -> ConfigDocument {
    ConfigDocument {
        schema_version: SCHEMA_VERSION,
        horizon: net.horizon,
        subsystems: net
            .subsystems
            .iter()
            .map(|s| SubsystemConfig {
                index: s.index,
                state_dim: s.state_dim,
                input_dim: s.input_dim,
                a_blocks: s
                    .a_blocks
                    .iter()
                    .map(|(&j, m)| CouplingBlockConfig {
                        neighbor: j,
                        matrix: MatrixConfig::from_matrix(m),
                    })
                    .collect(),
                b_blocks: s
                    .b_blocks
                    .iter()
                    .map(|(&j, m)| CouplingBlockConfig {
                        neighbor: j,
                        matrix: MatrixConfig::from_matrix(m),
                    })
                    .collect(),
                q: MatrixConfig::from_matrix(&s.q),
                r: MatrixConfig::from_matrix(&s.r),
                p: MatrixConfig::from_matrix(&s.p),
                k: MatrixConfig::from_matrix(&s.k),
                input_lo: s.input_box.lo.iter().copied().collect(),
                input_hi: s.input_box.hi.iter().copied().collect(),
            })
            .collect(),
        state_constraints: PolytopeConfig::from_polytope(&net.state_poly),
        terminal_constraints: PolytopeConfig::from_polytope(&net.terminal_poly),
        input_constraints: PolytopeConfig::from_polytope(&net.input_poly),
        x0: x0.iter().copied().collect(),
        u_bar0: u_bar0.iter().copied().collect(),
        delta0: None,
        solver: SolverConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{twin_network, twin_u_bar0, twin_x0};

    #[test]
    fn twin_document_round_trips() {
        let doc = document_from_network(&twin_network(), &twin_x0(), &twin_u_bar0());
        let text = serialize_config(&doc);
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, doc);
        let inst = load_config_str(&text).unwrap();
        assert_eq!(inst.problem.n_u(), 4);
        assert_eq!(inst.hash.len(), 16);
        // Hash is stable under round-trip.
        assert_eq!(instance_hash(&parsed), inst.hash);
    }

    #[test]
    fn slater_violation_reported_with_field_path() {
        let mut doc = document_from_network(&twin_network(), &twin_x0(), &twin_u_bar0());
        doc.u_bar0 = vec![0.9, 0.9, 0.9, 0.9]; // drives the terminal state out of Xf
        let text = serialize_config(&doc);
        match load_config_str(&text) {
            Err(Error::Validation { field, reason }) => {
                assert_eq!(field, "u_bar0");
                assert!(reason.contains("Slater"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn indefinite_q_reported_with_field_path() {
        let mut doc = document_from_network(&twin_network(), &twin_x0(), &twin_u_bar0());
        doc.subsystems[0].q.data[0][0] = -1.0;
        match load_config_str(&serialize_config(&doc)) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "subsystems[0].Q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_shape_mismatch_is_rejected() {
        let mut doc = document_from_network(&twin_network(), &twin_x0(), &twin_u_bar0());
        doc.subsystems[0].k.cols = 2; // data still 1x1
        match load_config_str(&serialize_config(&doc)) {
            Err(Error::Validation { field, .. }) => assert!(field.contains("K")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let doc = document_from_network(&twin_network(), &twin_x0(), &twin_u_bar0());
        let mut value: serde_json::Value =
            serde_json::from_str(&serialize_config(&doc)).unwrap();
        value["unexpected"] = serde_json::json!(1);
        match parse_config(&value.to_string()) {
            Err(Error::Parse(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
