//! Coordinator/agent execution of one MPC step over a simulated synchronous
//! network.
//!
//! The coordinator owns the dual variables and the common parameters; agents
//! own their block data and run the local minimizations, exchanging block
//! iterates only with the subsystems that need them. Rounds are synchronous
//! (a barrier separates sweeps and outer iterations), matching the
//! assumptions behind the contraction certificate. Agents and the monolithic
//! solver share the same block solver and accumulation order, so the two
//! paths agree componentwise.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::condense::CondensedProblem;
use crate::error::{Error, Result};
use crate::inner_jacobi::{
    block_argmin_against, extract_block, inner_sweep_count, BlockData, ContractionCertificate,
};
use crate::model::CouplingGraph;
use crate::outer_subgrad::{dual_update, OuterParams, StepSolution};
use crate::tighten::TightenedProblem;

/// Node addresses on the simulated network. The coordinator is node 0;
/// agent for subsystem `i` is node `i + 1`.
pub type NodeId = usize;

pub const COORDINATOR: NodeId = 0;

pub fn agent_node(subsystem: usize) -> NodeId {
    subsystem + 1
}

/// Wire vocabulary of the protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum MessageKind {
    /// Common parameters for the step, announced once per agent.
    ParamAnnounce {
        alpha: f64,
        eps: f64,
        k_bar: usize,
        phi: f64,
    },
    /// Dual vector at the start of outer iteration `k`.
    DualBroadcast { k: usize, mu: DVector<f64> },
    /// Block iterate of subsystem `i` after sweep `p`.
    LocalUpdate {
        p: usize,
        i: usize,
        u_i: DVector<f64>,
    },
    /// Subsystem `i`'s constraint contribution `Theta_i u^i` at iteration `k`.
    ConstraintContribution {
        k: usize,
        i: usize,
        theta_u: DVector<f64>,
    },
    Ack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u64,
}

/// Ordered log of every message the simulated network delivered.
#[derive(Debug, Clone, Default)]
pub struct NetworkLog {
    pub messages: Vec<Message>,
}

/// Communication sets: `C^i` is the extended neighborhood `N^i_{N-1}` of
/// subsystem `i`, widened by any subsystem whose H block against `i` is
/// structurally nonzero (the two coincide when the coupling graph diameter
/// is at most N-1).
#[derive(Debug, Clone)]
pub struct CommSets {
    pub sets: Vec<BTreeSet<usize>>,
}

impl CommSets {
    pub fn build(
        p: &CondensedProblem,
        graph: &CouplingGraph,
        horizon: usize,
    ) -> Result<CommSets> {
        let m = p.n_subsystems();
        let mut sets = Vec::with_capacity(m);
        for i in 0..m {
            let mut set = if horizon >= 2 {
                graph.extended_neighborhood(i, horizon - 1)?
            } else {
                BTreeSet::from([i])
            };
            for j in 0..m {
                if j != i && p.h_block(i, j).iter().any(|&v| v != 0.0) {
                    set.insert(j);
                }
            }
            set.insert(i);
            sets.push(set);
        }
        Ok(CommSets { sets })
    }

    /// Messages per sweep: every `i` sends its block to each `j != i` with
    /// `i` in `C^j`.
    pub fn local_updates_per_sweep(&self) -> usize {
        self.sets
            .iter()
            .enumerate()
            .map(|(j, set)| set.iter().filter(|&&i| i != j).count())
            .sum()
    }
}

/// The simulated network: assigns per-channel sequence numbers, validates
/// payload dimensions, and logs every message.
#[derive(Debug)]
struct SimNetwork {
    log: NetworkLog,
    next_seq: BTreeMap<(NodeId, NodeId), u64>,
    m_c: usize,
    block_dims: Vec<usize>,
}

impl SimNetwork {
    fn new(m_c: usize, block_dims: Vec<usize>) -> Self {
        SimNetwork {
            log: NetworkLog::default(),
            next_seq: BTreeMap::new(),
            m_c,
            block_dims,
        }
    }

    fn send(&mut self, src: NodeId, dst: NodeId, kind: MessageKind) -> Result<()> {
        let seq = self.next_seq.entry((src, dst)).or_insert(0);
        *seq += 1;
        let msg = Message {
            kind,
            src,
            dst,
            seq: *seq,
        };
        self.validate(&msg)?;
        self.log.messages.push(msg);
        Ok(())
    }

    /// Accepts an externally built frame, enforcing channel ordering and
    /// payload dimensions. Normal operation goes through `send`; this is the
    /// entry point a fault-injection test can abuse.
    #[allow(dead_code)] // exercised by protocol-validation tests
    fn inject(&mut self, msg: Message) -> Result<()> {
        let last = self.next_seq.get(&(msg.src, msg.dst)).copied().unwrap_or(0);
        if msg.seq <= last {
            return Err(Error::ProtocolViolation(format!(
                "sequence {} on channel {}->{} not above {}",
                msg.seq, msg.src, msg.dst, last
            )));
        }
        self.validate(&msg)?;
        self.next_seq.insert((msg.src, msg.dst), msg.seq);
        self.log.messages.push(msg);
        Ok(())
    }

    fn validate(&self, msg: &Message) -> Result<()> {
        let check_block = |i: usize, v: &DVector<f64>| -> Result<()> {
            let expect = *self
                .block_dims
                .get(i)
                .ok_or_else(|| Error::ProtocolViolation(format!("unknown subsystem {i}")))?;
            if v.len() != expect {
                return Err(Error::ProtocolViolation(format!(
                    "block payload for subsystem {i} has length {}, expected {expect}",
                    v.len()
                )));
            }
            Ok(())
        };
        match &msg.kind {
            MessageKind::DualBroadcast { mu, .. } => {
                if mu.len() != self.m_c {
                    return Err(Error::ProtocolViolation(format!(
                        "dual payload has length {}, expected {}",
                        mu.len(),
                        self.m_c
                    )));
                }
            }
            MessageKind::LocalUpdate { i, u_i, .. } => check_block(*i, u_i)?,
            MessageKind::ConstraintContribution { i, theta_u, .. } => {
                if theta_u.len() != self.m_c {
                    return Err(Error::ProtocolViolation(format!(
                        "contribution from subsystem {i} has length {}, expected {}",
                        theta_u.len(),
                        self.m_c
                    )));
                }
            }
            MessageKind::ParamAnnounce { .. } | MessageKind::Ack => {}
        }
        Ok(())
    }
}

/// Per-subsystem worker: holds only its own rows/columns of the problem data
/// plus the blocks of its communication set.
#[derive(Debug)]
pub struct AgentState {
    pub id: usize,
    block: BlockData,
    /// `G_i x_t`, fixed for the step.
    lin0: DVector<f64>,
    /// Theta columns of this subsystem.
    theta_cols: DMatrix<f64>,
    pub comm: BTreeSet<usize>,
    pub u: DVector<f64>,
    /// Latest received block iterates, indexed by subsystem id.
    neighbor_u: Vec<DVector<f64>>,
    /// Current Lagrangian linear term `lin0 + Theta_i' mu`.
    lin: DVector<f64>,
    primal_sum: DVector<f64>,
    cache: Option<usize>,
}

impl AgentState {
    fn new(tight: &TightenedProblem<'_>, comm: &CommSets, i: usize) -> AgentState {
        let p = tight.base;
        let b = &p.blocks[i];
        let g_rows = p.g.rows(b.start, b.len()).into_owned();
        let lin0 = &g_rows * &tight.x;
        let theta_cols = p.theta_block(i).into_owned();
        let start = p.clamp_to_box(&DVector::zeros(p.n_u()));
        let neighbor_u: Vec<DVector<f64>> = p
            .blocks
            .iter()
            .map(|nb| start.rows(nb.start, nb.len()).into())
            .collect();
        let dim = b.len();
        AgentState {
            id: i,
            block: extract_block(p, i),
            lin: lin0.clone(),
            lin0,
            theta_cols,
            comm: comm.sets[i].clone(),
            u: neighbor_u[i].clone(),
            neighbor_u,
            primal_sum: DVector::zeros(dim),
            cache: None,
        }
    }

    fn receive_dual(&mut self, mu: &DVector<f64>) {
        self.lin = &self.lin0 + self.theta_cols.transpose() * mu;
    }

    fn local_step(&mut self) -> Result<DVector<f64>> {
        // Jacobi semantics: read only previous-round state. Own block is
        // taken from neighbor_u[id], kept in sync with `u`.
        block_argmin_against(&self.block, &self.lin, &self.neighbor_u, &mut self.cache)
    }

    fn contribution(&self) -> DVector<f64> {
        &self.theta_cols * &self.u
    }
}

/// Runs one full MPC-step solve as the coordinator/agent protocol and
/// returns the solution together with the message log. With identical
/// inputs the result matches `solve_tightened_step` componentwise.
pub fn run_distributed_step(
    tight: &TightenedProblem<'_>,
    params: &OuterParams,
    cert: &ContractionCertificate,
    comm: &CommSets,
) -> Result<(StepSolution, NetworkLog)> {
    assert!(params.k_bar >= 1, "outer iteration count must be set");
    let p = tight.base;
    let m = p.n_subsystems();
    let block_dims: Vec<usize> = p.blocks.iter().map(|b| b.len()).collect();
    let mut net = SimNetwork::new(p.m_c(), block_dims);
    let mut agents: Vec<AgentState> = (0..m).map(|i| AgentState::new(tight, comm, i)).collect();

    for i in 0..m {
        net.send(
            COORDINATOR,
            agent_node(i),
            MessageKind::ParamAnnounce {
                alpha: params.alpha,
                eps: params.eps,
                k_bar: params.k_bar,
                phi: cert.phi,
            },
        )?;
    }

    let affine = &p.xi * &tight.x + p.tau.add_scalar(tight.c);
    let mut mu = DVector::zeros(p.m_c());
    let mut total_inner_sweeps = 0;

    for k in 0..params.k_bar {
        for agent in agents.iter_mut() {
            net.send(
                COORDINATOR,
                agent_node(agent.id),
                MessageKind::DualBroadcast { k, mu: mu.clone() },
            )?;
            agent.receive_dual(&mu);
        }
        // The coordinator fixes the sweep budget from the same formula the
        // monolithic solver uses.
        let p_bar = inner_sweep_count(tight, cert, &mu, params.eps);
        total_inner_sweeps += p_bar;
        for sweep in 0..p_bar {
            let new_blocks: Vec<DVector<f64>> = agents
                .iter_mut()
                .map(|a| a.local_step())
                .collect::<Result<_>>()?;
            // Synchronous exchange: everyone publishes, then everyone reads.
            for (i, u_new) in new_blocks.iter().enumerate() {
                for j in 0..m {
                    if j != i && comm.sets[j].contains(&i) {
                        net.send(
                            agent_node(i),
                            agent_node(j),
                            MessageKind::LocalUpdate {
                                p: sweep,
                                i,
                                u_i: u_new.clone(),
                            },
                        )?;
                    }
                }
            }
            for (i, u_new) in new_blocks.iter().enumerate() {
                for j in 0..m {
                    if j != i && comm.sets[j].contains(&i) {
                        agents[j].neighbor_u[i] = u_new.clone();
                    }
                }
                agents[i].u = u_new.clone();
                agents[i].neighbor_u[i] = u_new.clone();
            }
        }
        // Constraint assembly: g' = Xi x + sum_i Theta_i u^i + tau + c·1,
        // accumulated in ascending agent order.
        let mut theta_u = DVector::zeros(p.m_c());
        for agent in agents.iter_mut() {
            let contribution = agent.contribution();
            net.send(
                agent_node(agent.id),
                COORDINATOR,
                MessageKind::ConstraintContribution {
                    k,
                    i: agent.id,
                    theta_u: contribution.clone(),
                },
            )?;
            theta_u += &contribution;
            agent.primal_sum += &agent.u;
        }
        let d = &affine + theta_u;
        mu = dual_update(&mu, params.alpha, &d);
    }

    let k_used = params.k_bar;
    let mut u_hat = DVector::zeros(p.n_u());
    for (agent, b) in agents.iter().zip(&p.blocks) {
        u_hat
            .rows_mut(b.start, b.len())
            .copy_from(&(&agent.primal_sum / k_used as f64));
    }
    let g_hat = p.eval_constraints(&u_hat, &tight.x)?;
    let worst = g_hat.max();
    if worst >= 0.0 {
        return Err(Error::FeasibilityCertificateFailed { worst });
    }
    let violation = g_hat
        .iter()
        .map(|&v| v.max(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    let sol = StepSolution {
        f_value: p.eval_cost(&u_hat, &tight.x)?,
        violation,
        u_hat,
        k_used,
        total_inner_sweeps,
        feasible: true,
        history: Vec::new(),
    };
    Ok((sol, net.log))
}

/// Totals per message kind plus the exact encoded byte count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageCounts {
    pub param_announce: usize,
    pub dual_broadcast: usize,
    pub local_update: usize,
    pub constraint_contribution: usize,
    pub ack: usize,
    pub total: usize,
    pub bytes: usize,
}

pub fn message_stats(log: &NetworkLog) -> MessageCounts {
    let mut c = MessageCounts {
        param_announce: 0,
        dual_broadcast: 0,
        local_update: 0,
        constraint_contribution: 0,
        ack: 0,
        total: log.messages.len(),
        bytes: 0,
    };
    for msg in &log.messages {
        match &msg.kind {
            MessageKind::ParamAnnounce { .. } => c.param_announce += 1,
            MessageKind::DualBroadcast { .. } => c.dual_broadcast += 1,
            MessageKind::LocalUpdate { .. } => c.local_update += 1,
            MessageKind::ConstraintContribution { .. } => c.constraint_contribution += 1,
            MessageKind::Ack => c.ack += 1,
        }
        c.bytes += encoded_len(msg);
    }
    c
}

/// Verifies the counting contract of a completed run: per outer iteration,
/// `M` dual broadcasts, `M` constraint contributions, and one local update
/// per sweep per directed communication edge; one announcement per agent.
pub fn verify_message_counts(
    log: &NetworkLog,
    comm: &CommSets,
    sol: &StepSolution,
) -> Result<()> {
    let m = comm.sets.len();
    let stats = message_stats(log);
    let expect_local = sol.total_inner_sweeps * comm.local_updates_per_sweep();
    let checks = [
        ("ParamAnnounce", stats.param_announce, m),
        ("DualBroadcast", stats.dual_broadcast, sol.k_used * m),
        (
            "ConstraintContribution",
            stats.constraint_contribution,
            sol.k_used * m,
        ),
        ("LocalUpdate", stats.local_update, expect_local),
        ("Ack", stats.ack, 0),
    ];
    for (name, got, expect) in checks {
        if got != expect {
            return Err(Error::ProtocolViolation(format!(
                "{name} count {got} does not match the contract value {expect}"
            )));
        }
    }
    Ok(())
}

/// Confirms that no message moved a subsystem's block data to an agent
/// outside that subsystem's communication set.
pub fn audit_locality(log: &NetworkLog, comm: &CommSets) -> Result<()> {
    for msg in &log.messages {
        match &msg.kind {
            MessageKind::LocalUpdate { i, .. } => {
                if msg.src != agent_node(*i) {
                    return Err(Error::ProtocolViolation(format!(
                        "local update for subsystem {i} sent by node {}",
                        msg.src
                    )));
                }
                let dst_sub = msg
                    .dst
                    .checked_sub(1)
                    .ok_or_else(|| Error::ProtocolViolation("update sent to coordinator".into()))?;
                if !comm.sets[dst_sub].contains(i) {
                    return Err(Error::ProtocolViolation(format!(
                        "subsystem {i} data delivered to agent {dst_sub} outside its communication set"
                    )));
                }
            }
            MessageKind::ConstraintContribution { .. } => {
                if msg.dst != COORDINATOR {
                    return Err(Error::ProtocolViolation(
                        "constraint contribution not addressed to the coordinator".into(),
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

// Binary log framing: tag u8, src u32, dst u32, seq u64, then the payload;
// vectors are length-prefixed (u32) little-endian f64s.

fn kind_tag(kind: &MessageKind) -> u8 {
    match kind {
        MessageKind::ParamAnnounce { .. } => 0,
        MessageKind::DualBroadcast { .. } => 1,
        MessageKind::LocalUpdate { .. } => 2,
        MessageKind::ConstraintContribution { .. } => 3,
        MessageKind::Ack => 4,
    }
}

fn encoded_len(msg: &Message) -> usize {
    let header = 1 + 4 + 4 + 8;
    let payload = match &msg.kind {
        MessageKind::ParamAnnounce { .. } => 8 + 8 + 8 + 8,
        MessageKind::DualBroadcast { mu, .. } => 8 + 4 + 8 * mu.len(),
        MessageKind::LocalUpdate { u_i, .. } => 8 + 4 + 4 + 8 * u_i.len(),
        MessageKind::ConstraintContribution { theta_u, .. } => 8 + 4 + 4 + 8 * theta_u.len(),
        MessageKind::Ack => 0,
    };
    header + payload
}

fn write_vec(out: &mut Vec<u8>, v: &DVector<f64>) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for &x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(msg));
    out.push(kind_tag(&msg.kind));
    out.extend_from_slice(&(msg.src as u32).to_le_bytes());
    out.extend_from_slice(&(msg.dst as u32).to_le_bytes());
    out.extend_from_slice(&msg.seq.to_le_bytes());
    match &msg.kind {
        MessageKind::ParamAnnounce {
            alpha,
            eps,
            k_bar,
            phi,
        } => {
            out.extend_from_slice(&alpha.to_le_bytes());
            out.extend_from_slice(&eps.to_le_bytes());
            out.extend_from_slice(&(*k_bar as u64).to_le_bytes());
            out.extend_from_slice(&phi.to_le_bytes());
        }
        MessageKind::DualBroadcast { k, mu } => {
            out.extend_from_slice(&(*k as u64).to_le_bytes());
            write_vec(&mut out, mu);
        }
        MessageKind::LocalUpdate { p, i, u_i } => {
            out.extend_from_slice(&(*p as u64).to_le_bytes());
            out.extend_from_slice(&(*i as u32).to_le_bytes());
            write_vec(&mut out, u_i);
        }
        MessageKind::ConstraintContribution { k, i, theta_u } => {
            out.extend_from_slice(&(*k as u64).to_le_bytes());
            out.extend_from_slice(&(*i as u32).to_le_bytes());
            write_vec(&mut out, theta_u);
        }
        MessageKind::Ack => {}
    }
    debug_assert_eq!(out.len(), encoded_len(msg));
    out
}

pub fn write_binary_log<W: Write>(log: &NetworkLog, mut out: W) -> std::io::Result<()> {
    for msg in &log.messages {
        out.write_all(&encode_message(msg))?;
    }
    Ok(())
}

fn read_exact_or_end<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::ProtocolViolation("truncated frame".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    if !read_exact_or_end(input, &mut b)? {
        return Err(Error::ProtocolViolation("truncated frame".into()));
    }
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    if !read_exact_or_end(input, &mut b)? {
        return Err(Error::ProtocolViolation("truncated frame".into()));
    }
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(input)?))
}

fn read_dvec<R: Read>(input: &mut R) -> Result<DVector<f64>> {
    let len = read_u32(input)? as usize;
    let mut v = DVector::zeros(len);
    for i in 0..len {
        v[i] = read_f64(input)?;
    }
    Ok(v)
}

/// Decodes a framed binary log, the inverse of `write_binary_log`.
pub fn read_binary_log<R: Read>(mut input: R) -> Result<NetworkLog> {
    let mut log = NetworkLog::default();
    loop {
        let mut tag = [0u8; 1];
        if !read_exact_or_end(&mut input, &mut tag)? {
            return Ok(log);
        }
        let src = read_u32(&mut input)? as usize;
        let dst = read_u32(&mut input)? as usize;
        let seq = read_u64(&mut input)?;
        let kind = match tag[0] {
            0 => MessageKind::ParamAnnounce {
                alpha: read_f64(&mut input)?,
                eps: read_f64(&mut input)?,
                k_bar: read_u64(&mut input)? as usize,
                phi: read_f64(&mut input)?,
            },
            1 => MessageKind::DualBroadcast {
                k: read_u64(&mut input)? as usize,
                mu: read_dvec(&mut input)?,
            },
            2 => MessageKind::LocalUpdate {
                p: read_u64(&mut input)? as usize,
                i: read_u32(&mut input)? as usize,
                u_i: read_dvec(&mut input)?,
            },
            3 => MessageKind::ConstraintContribution {
                k: read_u64(&mut input)? as usize,
                i: read_u32(&mut input)? as usize,
                theta_u: read_dvec(&mut input)?,
            },
            4 => MessageKind::Ack,
            t => {
                return Err(Error::ProtocolViolation(format!("unknown frame tag {t}")));
            }
        };
        log.messages.push(Message {
            kind,
            src,
            dst,
            seq,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::condense;
    use crate::inner_jacobi::certify_contraction;
    use crate::model::{assemble_aggregate, CouplingGraph};
    use crate::outer_subgrad::{
        compute_step_params, outer_iterations_needed, solve_tightened_step, SolveOpts,
    };
    use crate::testutil::{scalar_network_validated, twin_network, twin_u_bar0, twin_x0};
    use crate::tighten::{build_tightened, initial_norm_bound, SlaterCertificate};

    fn twin_pipeline(
        p: &CondensedProblem,
        k_cap: Option<usize>,
    ) -> (TightenedProblem<'_>, OuterParams, ContractionCertificate, CommSets) {
        let net = twin_network();
        let x = twin_x0();
        let l = initial_norm_bound(p, &x).unwrap();
        let slater = SlaterCertificate::new(p, twin_u_bar0(), &x).unwrap();
        let tight = build_tightened(p, x, slater, l).unwrap();
        let agg = assemble_aggregate(&net).unwrap();
        let delta = 0.5 * (tight.x.transpose() * &agg.q * &tight.x)[(0, 0)];
        let f_bar = p.eval_cost(&tight.slater.u_bar, &tight.x).unwrap();
        let mut params = compute_step_params(&tight, delta);
        params.k_bar = outer_iterations_needed(&params, f_bar);
        if let Some(cap) = k_cap {
            params.k_bar = params.k_bar.min(cap);
        }
        let cert = certify_contraction(p).unwrap();
        let graph = CouplingGraph::from_network(&net);
        let comm = CommSets::build(p, &graph, net.horizon).unwrap();
        (tight, params, cert, comm)
    }

    #[test]
    fn harness_matches_monolith_on_twin() {
        let p = condense(&twin_network()).unwrap();
        let (tight, params, cert, comm) = twin_pipeline(&p, Some(150));
        let mono = solve_tightened_step(&tight, &params, &cert, SolveOpts::default()).unwrap();
        let (dist, log) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        let diff = (&mono.u_hat - &dist.u_hat).abs().max();
        assert!(diff <= crate::tol::HARNESS_EQUIVALENCE, "diff {diff}");
        assert_eq!(mono.k_used, dist.k_used);
        assert_eq!(mono.total_inner_sweeps, dist.total_inner_sweeps);
        assert!((mono.f_value - dist.f_value).abs() <= 1e-12);
        audit_locality(&log, &comm).unwrap();
        verify_message_counts(&log, &comm, &dist).unwrap();
    }

    #[test]
    fn single_subsystem_counts() {
        let net = scalar_network_validated(0.5, 1.0, 2);
        let p = condense(&net).unwrap();
        let x = DVector::from_element(1, 1.0);
        let l = initial_norm_bound(&p, &x).unwrap();
        let slater =
            SlaterCertificate::new(&p, DVector::from_row_slice(&[-0.45, 0.0]), &x).unwrap();
        let tight = build_tightened(&p, x, slater, l).unwrap();
        let mut params = compute_step_params(&tight, 0.5);
        params.k_bar = 7;
        let cert = certify_contraction(&p).unwrap();
        let graph = CouplingGraph::from_network(&net);
        let comm = CommSets::build(&p, &graph, net.horizon).unwrap();
        let (sol, log) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        let stats = message_stats(&log);
        assert_eq!(stats.local_update, 0);
        assert_eq!(stats.dual_broadcast, 7);
        assert_eq!(stats.constraint_contribution, 7);
        assert_eq!(stats.param_announce, 1);
        assert_eq!(stats.ack, 0);
        verify_message_counts(&log, &comm, &sol).unwrap();
    }

    #[test]
    fn empty_log_stats_are_zero() {
        let stats = message_stats(&NetworkLog::default());
        assert_eq!(stats.total, 0);
        assert_eq!(stats.bytes, 0);
        assert_eq!(stats.param_announce, 0);
    }

    #[test]
    fn tampered_log_fails_count_verification() {
        let p = condense(&twin_network()).unwrap();
        let (tight, mut params, cert, comm) = twin_pipeline(&p, None);
        params.k_bar = 5;
        let (sol, mut log) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        verify_message_counts(&log, &comm, &sol).unwrap();
        log.messages.push(Message {
            kind: MessageKind::Ack,
            src: agent_node(0),
            dst: COORDINATOR,
            seq: 999,
        });
        match verify_message_counts(&log, &comm, &sol) {
            Err(Error::ProtocolViolation(msg)) => assert!(msg.contains("Ack")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn network_rejects_out_of_order_and_bad_dims() {
        let mut net = SimNetwork::new(3, vec![2, 2]);
        net.send(
            COORDINATOR,
            agent_node(0),
            MessageKind::DualBroadcast {
                k: 0,
                mu: DVector::zeros(3),
            },
        )
        .unwrap();
        // Replay at or below the delivered sequence number.
        let stale = Message {
            kind: MessageKind::Ack,
            src: COORDINATOR,
            dst: agent_node(0),
            seq: 1,
        };
        match net.inject(stale) {
            Err(Error::ProtocolViolation(msg)) => assert!(msg.contains("sequence")),
            other => panic!("unexpected {other:?}"),
        }
        // Wrong payload dimension.
        match net.send(
            COORDINATOR,
            agent_node(1),
            MessageKind::DualBroadcast {
                k: 0,
                mu: DVector::zeros(5),
            },
        ) {
            Err(Error::ProtocolViolation(msg)) => assert!(msg.contains("length")),
            other => panic!("unexpected {other:?}"),
        }
        // A fresh Ack with a proper sequence number is accepted.
        net.inject(Message {
            kind: MessageKind::Ack,
            src: agent_node(0),
            dst: COORDINATOR,
            seq: 1,
        })
        .unwrap();
    }

    #[test]
    fn binary_log_round_trip() {
        let p = condense(&twin_network()).unwrap();
        let (tight, mut params, cert, comm) = twin_pipeline(&p, None);
        params.k_bar = 3;
        let (_, log) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        let mut bytes = Vec::new();
        write_binary_log(&log, &mut bytes).unwrap();
        assert_eq!(bytes.len(), message_stats(&log).bytes);
        let decoded = read_binary_log(bytes.as_slice()).unwrap();
        assert_eq!(decoded.messages, log.messages);
    }

    #[test]
    fn two_runs_produce_identical_logs() {
        let p = condense(&twin_network()).unwrap();
        let (tight, mut params, cert, comm) = twin_pipeline(&p, None);
        params.k_bar = 10;
        let (sol_a, log_a) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        let (sol_b, log_b) = run_distributed_step(&tight, &params, &cert, &comm).unwrap();
        assert_eq!(log_a.messages, log_b.messages);
        assert_eq!(sol_a.u_hat, sol_b.u_hat);
    }
}
