//! A-priori certification checklist: everything the guarantees need that
//! can be verified before running the loop, plus a marker for the one
//! condition that is only checkable at runtime.

use nalgebra::DVector;

use crate::condense::condense;
use crate::error::{Error, Result};
use crate::inner_jacobi::certify_contraction;
use crate::model::{assemble_aggregate, check_schur, check_terminal_invariance, NetworkSpec};
use crate::tighten::{choose_margin, initial_norm_bound, SlaterCertificate};

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Outcome of the certification checklist.
#[derive(Debug, Clone)]
pub struct CertifyReport {
    pub lines: Vec<CheckLine>,
    /// Jacobi step coefficient, when the coupling check passed.
    pub gamma: Option<f64>,
    /// Contraction modulus, when the coupling check passed.
    pub phi: Option<f64>,
    /// Initial norm bound, when computable.
    pub l0: Option<f64>,
    /// Slater margin of the tightened constraints at t = 0.
    pub gamma_t0: Option<f64>,
}

impl CertifyReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

/// Runs the full pre-flight checklist on a validated network.
pub fn certify_instance(
    network: &NetworkSpec,
    x0: &DVector<f64>,
    u_bar0: &DVector<f64>,
    vertex_cap: usize,
) -> Result<CertifyReport> {
    let model = assemble_aggregate(network)?;
    let mut lines = Vec::new();
    let mut gamma = None;
    let mut phi = None;
    let mut l0 = None;
    let mut gamma_t0 = None;

    match check_schur(&model) {
        Ok(cert) => lines.push(CheckLine {
            name: "closed_loop_schur",
            pass: cert.pass,
            detail: format!("spectral radius of A+BK = {:.6e}", cert.radius),
        }),
        Err(Error::NotBlockDiagonalK { row, col }) => lines.push(CheckLine {
            name: "closed_loop_schur",
            pass: false,
            detail: format!("K has a cross-subsystem entry at ({row}, {col})"),
        }),
        Err(e) => return Err(e),
    }

    match check_terminal_invariance(&model, &network.terminal_poly, vertex_cap) {
        Ok(cert) => lines.push(CheckLine {
            name: "terminal_invariance",
            pass: cert.pass,
            detail: format!("worst vertex margin = {:.6e}", cert.worst_margin),
        }),
        Err(e @ Error::VertexEnumerationTooLarge { .. }) => lines.push(CheckLine {
            name: "terminal_invariance",
            pass: false,
            detail: e.to_string(),
        }),
        Err(e) => return Err(e),
    }

    let problem = condense(network)?;
    match SlaterCertificate::new(&problem, u_bar0.clone(), x0) {
        Ok(slater) => {
            let c = choose_margin(&slater)?;
            gamma_t0 = Some(slater.min_margin - c);
            lines.push(CheckLine {
                name: "slater_t0",
                pass: true,
                detail: format!(
                    "min margin = {:.6e}, tightening c_0 = {:.6e}",
                    slater.min_margin, c
                ),
            });
        }
        Err(Error::SlaterViolated { min_margin }) => lines.push(CheckLine {
            name: "slater_t0",
            pass: false,
            detail: format!("min margin = {min_margin:.6e} (needs > 0)"),
        }),
        Err(Error::Validation { reason, .. }) => lines.push(CheckLine {
            name: "slater_t0",
            pass: false,
            detail: reason,
        }),
        Err(e) => return Err(e),
    }

    match initial_norm_bound(&problem, x0) {
        Ok(bound) => {
            l0 = Some(bound);
            lines.push(CheckLine {
                name: "norm_bound_l0",
                pass: true,
                detail: format!("L_0 = {bound:.6e}"),
            });
        }
        Err(e @ Error::UnboundedBox) => lines.push(CheckLine {
            name: "norm_bound_l0",
            pass: false,
            detail: e.to_string(),
        }),
        Err(e) => return Err(e),
    }

    match certify_contraction(&problem) {
        Ok(cert) => {
            gamma = Some(cert.gamma);
            phi = Some(cert.phi);
            lines.push(CheckLine {
                name: "weak_coupling",
                pass: true,
                detail: format!("gamma = {:.6e}, phi = {:.6e}", cert.gamma, cert.phi),
            });
        }
        Err(Error::WeakCouplingViolated {
            block,
            lambda_min,
            sigma_sum,
        }) => lines.push(CheckLine {
            name: "weak_coupling",
            pass: false,
            detail: format!(
                "block {block}: lambda_min(H_ii) = {lambda_min:.6e} <= sigma sum {sigma_sum:.6e}"
            ),
        }),
        Err(e) => return Err(e),
    }

    lines.push(CheckLine {
        name: "cost_decrease_assumption",
        pass: true,
        detail: "runtime-checked at every step".to_string(),
    });

    Ok(CertifyReport {
        lines,
        gamma,
        phi,
        l0,
        gamma_t0,
    })
}
