//! Trace serialization: one JSON object per line, header first, then one
//! record per MPC step, with optional per-outer-iteration sub-records.
//!
//! Numeric fields are written as exact decimal renderings of the underlying
//! 64-bit floats (17 significant digits, exponent form), so a trace is both
//! machine-parseable and byte-reproducible: the same run always produces the
//! same file.

use std::io::Write;

use crate::coord_harness::MessageCounts;
use crate::mpc_loop::TraceRecord;

/// Exact decimal rendering of an f64: 17 significant digits in exponent
/// form, which round-trips to the identical bit pattern.
pub fn fmt_f64(v: f64) -> String {
    debug_assert!(v.is_finite(), "traces only carry finite values");
    format!("{v:.16e}")
}

fn fmt_vec(v: &nalgebra::DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", parts.join(","))
}

/// Header echo of the run configuration.
#[derive(Debug, Clone)]
pub struct TraceHeader {
    pub instance_hash: String,
    pub horizon: usize,
    pub n_subsystems: usize,
    pub steps_requested: usize,
    pub seed: u64,
    pub delta0: Option<f64>,
    pub distributed: bool,
    pub single_thread: bool,
    pub early_exit: bool,
}

/// Line-oriented trace writer.
#[derive(Debug)]
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write_header(&mut self, h: &TraceHeader) -> std::io::Result<()> {
        let delta0 = match h.delta0 {
            Some(d) => fmt_f64(d),
            None => "null".to_string(),
        };
        writeln!(
            self.out,
            "{{\"type\":\"header\",\"schema_version\":1,\"instance_hash\":\"{}\",\
             \"horizon\":{},\"subsystems\":{},\"steps_requested\":{},\"seed\":{},\
             \"delta0\":{},\"distributed\":{},\"single_thread\":{},\"early_exit\":{}}}",
            h.instance_hash,
            h.horizon,
            h.n_subsystems,
            h.steps_requested,
            h.seed,
            delta0,
            h.distributed,
            h.single_thread,
            h.early_exit,
        )
    }

    pub fn write_record(&mut self, r: &TraceRecord) -> std::io::Result<()> {
        let messages = match &r.message_counts {
            Some(c) => fmt_message_counts(c),
            None => "null".to_string(),
        };
        writeln!(
            self.out,
            "{{\"type\":\"step\",\"t\":{},\"x\":{},\"u\":{},\"f\":{},\"violation\":{},\
             \"delta\":{},\"alpha\":{},\"eps\":{},\"k_bar\":{},\"inner_sweeps\":{},\
             \"lyapunov_ok\":{},\"messages\":{}}}",
            r.t,
            fmt_vec(&r.x),
            fmt_vec(&r.u_applied),
            fmt_f64(r.f_value),
            fmt_f64(r.violation_norm),
            fmt_f64(r.delta),
            fmt_f64(r.alpha),
            fmt_f64(r.eps),
            r.k_bar,
            r.total_inner_sweeps,
            r.lyapunov_ok,
            messages,
        )
    }

    /// Optional per-outer-iteration sub-record.
    pub fn write_outer_record(
        &mut self,
        t: usize,
        k: usize,
        violation_hat: f64,
        f_hat: f64,
        inner_sweeps: usize,
    ) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{{\"type\":\"outer\",\"t\":{},\"k\":{},\"violation\":{},\"f\":{},\"sweeps\":{}}}",
            t,
            k,
            fmt_f64(violation_hat),
            fmt_f64(f_hat),
            inner_sweeps,
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn fmt_message_counts(c: &MessageCounts) -> String {
    format!(
        "{{\"param_announce\":{},\"dual_broadcast\":{},\"local_update\":{},\
         \"constraint_contribution\":{},\"ack\":{},\"total\":{},\"bytes\":{}}}",
        c.param_announce,
        c.dual_broadcast,
        c.local_update,
        c.constraint_contribution,
        c.ack,
        c.total,
        c.bytes
    )
}
