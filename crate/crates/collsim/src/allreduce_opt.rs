//! Failure-aware all-reduce planning: the T(Y) partition model with its
//! closed-form optimum and threshold, the two-stage (global + partial ring,
//! tailored broadcast) plan, the recursive multi-bottleneck decomposition,
//! and runtime strategy selection.
//!
//! The model: a server that lost a fraction X of its NIC bandwidth throttles
//! the whole ring. Handing a fraction Y of the data to a partial ring that
//! excludes the degraded server costs a stage-2 broadcast but lets the
//! healthy servers run the Y-share at full speed:
//!
//! ```text
//! T1(Y) = a (1-Y) D / ((1-X) B)     a = 2(ng-1)/(ng)      global ring
//! T2(Y) = b    Y  D / (X B)         b = 2((n-1)g-1)/((n-1)g)   partial ring
//! T3(Y) =      Y  D / (X B)                              stage-2 broadcast
//! T(Y)  = max(T1, T2) + T3
//! ```
//!
//! Below the threshold `X = ng/(3ng-2)` the plain ring wins (Y = 0); above
//! it T attains its unique minimum at the crossing point of T1 and T2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::healthy_assignment;
use crate::collectives::{
    ring_schedule, ApplyOp, CollectiveKind, CollectiveRequest, CommContext, EventHooks, ExecError,
    ExecSession, Reduction, StageOpts,
};
use crate::ids::Side;
use crate::cost_model::CostParams;
use crate::engine::Engine;
use crate::health::HealthMap;
use crate::topology::{ClusterTopology, GpuId, ServerId};
use crate::transport::{Dep, TransportSim};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionInputs {
    /// Server count.
    pub n: usize,
    /// GPUs per server.
    pub g: usize,
    /// Lost-bandwidth fraction of the degraded server, in (0, 1).
    pub x: f64,
    /// Bytes per GPU.
    pub d: f64,
    /// Healthy per-server aggregate bandwidth, bytes/s.
    pub b: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error(
        "lost-bandwidth fraction {0} is outside (0,1); a fully disconnected \
         server cannot be planned around - exclude it via re-ranking instead"
    )]
    XOutOfRange(f64),
    #[error("the partition model needs n >= 2 and g >= 2, got n={n} g={g}")]
    TooSmall { n: usize, g: usize },
    #[error("the partial ring needs at least 2 healthy servers (n >= 3)")]
    TooFewServersForPartial,
    #[error("strategy mismatch: the plan must carry the two-stage strategy")]
    NotTwoStage,
}

impl PartitionInputs {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n < 2 || self.g < 2 {
            return Err(PlanError::TooSmall {
                n: self.n,
                g: self.g,
            });
        }
        if !(self.x > 0.0 && self.x < 1.0) {
            return Err(PlanError::XOutOfRange(self.x));
        }
        Ok(())
    }

    fn a(&self) -> f64 {
        let k = (self.n * self.g) as f64;
        2.0 * (k - 1.0) / k
    }

    fn b_coeff(&self) -> f64 {
        let k = ((self.n - 1) * self.g) as f64;
        2.0 * (k - 1.0) / k
    }
}

/// Stage times `(T1, T2, T3)` for a data split `y`.
pub fn stage_times(y: f64, inp: &PartitionInputs) -> (f64, f64, f64) {
    debug_assert!((0.0..=1.0).contains(&y));
    let t1 = inp.a() * (1.0 - y) * inp.d / ((1.0 - inp.x) * inp.b);
    let t2 = inp.b_coeff() * y * inp.d / (inp.x * inp.b);
    let t3 = y * inp.d / (inp.x * inp.b);
    (t1, t2, t3)
}

/// `max(T1, T2) + T3`.
pub fn total_time(y: f64, inp: &PartitionInputs) -> f64 {
    let (t1, t2, t3) = stage_times(y, inp);
    t1.max(t2) + t3
}

/// Lost-bandwidth fraction above which the two-stage split beats the plain
/// ring: `ng / (3ng - 2)`.
pub fn threshold(n: usize, g: usize) -> f64 {
    let k = (n * g) as f64;
    k / (3.0 * k - 2.0)
}

/// The unique interior minimizer for above-threshold X:
/// `Y* = X + X(1-X) / (X + (g(n-1) - 1) n)`.
pub fn y_star(inp: &PartitionInputs) -> f64 {
    let n = inp.n as f64;
    let g = inp.g as f64;
    let x = inp.x;
    x + x * (1.0 - x) / (x + (g * (n - 1.0) - 1.0) * n)
}

/// Which threshold rule the planner applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// The exact model threshold `ng/(3ng-2)`.
    Exact,
    /// The deployment shorthand: split whenever X >= 1/3.
    PracticalOneThird,
}

impl ThresholdRule {
    pub fn value(self, n: usize, g: usize) -> f64 {
        match self {
            ThresholdRule::Exact => threshold(n, g),
            ThresholdRule::PracticalOneThird => 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    StandardRing,
    #[serde(rename = "r2cc_allreduce")]
    R2ccAllReduce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n: usize,
    pub g: usize,
    pub x: f64,
    pub d: f64,
    pub b: f64,
    pub strategy: PlanStrategy,
    pub y: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t_total: f64,
    pub rule: ThresholdRule,
    pub threshold: f64,
    /// Model caveat surfaced in reports rather than silently absorbed.
    pub note: Option<String>,
}

/// Pick the optimal split for the given degradation: Y = 0 with the plain
/// ring at or below the threshold, the closed-form Y* above it.
pub fn optimal_partition(
    inp: &PartitionInputs,
    rule: ThresholdRule,
) -> Result<PartitionPlan, PlanError> {
    inp.validate()?;
    let thr = rule.value(inp.n, inp.g);
    let (strategy, y) = if inp.x <= thr {
        (PlanStrategy::StandardRing, 0.0)
    } else {
        (PlanStrategy::R2ccAllReduce, y_star(inp))
    };
    let (t1, t2, t3) = stage_times(y, inp);
    let note = if strategy == PlanStrategy::StandardRing {
        Some(
            "bandwidth-only model keeps the standard ring below the threshold; \
             measured systems have been observed to favor the two-stage split \
             for very large messages even at small loss fractions"
                .to_string(),
        )
    } else {
        None
    };
    Ok(PartitionPlan {
        n: inp.n,
        g: inp.g,
        x: inp.x,
        d: inp.d,
        b: inp.b,
        strategy,
        y,
        t1,
        t2,
        t3,
        t_total: t1.max(t2) + t3,
        rule,
        threshold: thr,
        note,
    })
}

/// Executable form of a two-stage plan on a concrete topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStagePlan {
    pub degraded: ServerId,
    pub plan: PartitionPlan,
    pub global_ring: Vec<ServerId>,
    pub partial_ring: Vec<ServerId>,
}

/// Bind a two-stage plan to a topology: the global ring spans every server,
/// the partial ring everyone but the degraded one.
pub fn plan_two_stage(
    topo: &ClusterTopology,
    degraded: ServerId,
    plan: &PartitionPlan,
) -> Result<TwoStagePlan, PlanError> {
    if plan.strategy != PlanStrategy::R2ccAllReduce {
        return Err(PlanError::NotTwoStage);
    }
    if topo.servers() < 3 {
        return Err(PlanError::TooFewServersForPartial);
    }
    let global_ring: Vec<ServerId> = (0..topo.servers()).map(ServerId).collect();
    let partial_ring: Vec<ServerId> = global_ring
        .iter()
        .copied()
        .filter(|&s| s != degraded)
        .collect();
    Ok(TwoStagePlan {
        degraded,
        plan: plan.clone(),
        global_ring,
        partial_ring,
    })
}

/// Rate slices used by the staged plans.
const SLICE_GLOBAL: u32 = 1;
const SLICE_PARTIAL_BASE: u32 = 2;
const SLICE_STAGE2: u32 = 64;

#[derive(Debug)]
pub struct StagedOutcome {
    pub completion: f64,
    /// When the concurrent stage-1 rings all finished.
    pub stage1_completion: f64,
    /// Per-GPU buffers, `[0..elems)` holding the all-reduce result.
    pub buffers: Vec<Vec<f64>>,
    pub intact: bool,
    /// Per-server (tx, rx) bytes moved during stage 1.
    pub stage1_traffic: Vec<(u64, u64)>,
    /// Per-server (tx, rx) bytes moved during stage 2.
    pub stage2_traffic: Vec<(u64, u64)>,
}

fn floor_multiple(x: usize, m: usize) -> usize {
    (x / m) * m
}

fn gpus_of(topo: &ClusterTopology, servers: &[ServerId]) -> Vec<GpuId> {
    servers.iter().flat_map(|&s| topo.gpus_on(s)).collect()
}

/// Spread the connections of every degraded server over its healthy NIC
/// pool, so staged plans never stack two channels onto one backup lane and
/// resident channels share lanes symmetrically with displaced ones. Called
/// at staging boundaries, before the engine pumps.
fn pool_impaired_assignments(
    engine: &mut Engine,
    transport: &mut TransportSim,
    health: &HealthMap,
) -> Result<(), ExecError> {
    let topo = transport.topology().clone();
    let degraded: std::collections::BTreeSet<ServerId> = (0..topo.servers())
        .map(ServerId)
        .filter(|&s| {
            topo.nics_on(s)
                .map(|nics| nics.iter().any(|&n| !health.nic_healthy(n)))
                .unwrap_or(false)
        })
        .collect();
    if degraded.is_empty() {
        return Ok(());
    }
    let ids: Vec<crate::ids::ConnId> = transport
        .connections()
        .iter()
        .filter(|c| c.cross_server && !c.pending_failure)
        .map(|c| c.id)
        .collect();
    for id in ids {
        let conn = transport.conn(id);
        let src_bad =
            degraded.contains(&conn.src_server) || conn.side_impaired(Side::Src, health);
        let dst_bad =
            degraded.contains(&conn.dst_server) || conn.side_impaired(Side::Dst, health);
        if !src_bad && !dst_bad {
            continue;
        }
        let (src_server, dst_server) = (conn.src_server, conn.dst_server);
        let (bl_src, bl_dst) = (conn.blacklist_src.clone(), conn.blacklist_dst.clone());
        let spread = |server: ServerId, bl: &std::collections::BTreeSet<crate::topology::NicId>| {
            healthy_assignment(&topo, server, |n| health.nic_healthy(n) && !bl.contains(&n))
        };
        let src_assign = src_bad.then(|| spread(src_server, &bl_src));
        let dst_assign = dst_bad.then(|| spread(dst_server, &bl_dst));
        if src_assign.as_ref().is_some_and(|a| a.is_empty())
            || dst_assign.as_ref().is_some_and(|a| a.is_empty())
        {
            return Err(ExecError::Transport(crate::transport::TransportError::NoBackup));
        }
        transport.reassign(engine, id, src_assign, dst_assign)?;
    }
    Ok(())
}

fn server_traffic_snapshot(topo: &ClusterTopology, transport: &TransportSim) -> Vec<(u64, u64)> {
    (0..topo.servers())
        .map(|s| transport.server_traffic(ServerId(s)))
        .collect()
}

fn traffic_delta(after: &[(u64, u64)], before: &[(u64, u64)]) -> Vec<(u64, u64)> {
    after
        .iter()
        .zip(before)
        .map(|(a, b)| (a.0 - b.0, a.1 - b.1))
        .collect()
}

/// Execute a bound two-stage plan: stage 1 runs the global and partial rings
/// concurrently on partitioned bandwidth slices; stage 2 folds in the
/// degraded server's contribution, pipelines the finished Y-share around the
/// healthy ring and delivers it back.
#[allow(clippy::too_many_arguments)]
pub fn execute_two_stage(
    tsp: &TwoStagePlan,
    bytes_per_gpu: u64,
    inputs: &[Vec<f64>],
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &mut CommContext,
    health: &HealthMap,
    hooks: &mut dyn EventHooks,
    channels: usize,
) -> Result<StagedOutcome, ExecError> {
    let topo = transport.topology().clone();
    let channels = channels.max(1);
    let y = tsp.plan.y;
    let x = tsp.plan.x;

    let global_gpus = gpus_of(&topo, &tsp.global_ring);
    let partial_gpus = gpus_of(&topo, &tsp.partial_ring);
    let k_all = global_gpus.len();
    let k_h = partial_gpus.len();
    let elems = inputs[0].len();

    // element layout: [0, e_g) global share, [e_g, e_g + e_p_pad) partial share
    let e_g = floor_multiple(
        ((1.0 - y) * elems as f64).round() as usize,
        k_all * channels,
    );
    let e_p_log = elems - e_g;
    let e_p_pad = e_p_log.div_ceil(k_h * channels) * (k_h * channels);
    let buf_len = e_g + e_p_pad;

    let bytes_g = ((1.0 - y) * bytes_per_gpu as f64).round() as u64;
    let bytes_p = bytes_per_gpu - bytes_g.min(bytes_per_gpu);

    let mut session = ExecSession::new(topo.num_gpus(), buf_len);
    for (g, buf) in inputs.iter().enumerate() {
        session.set_input(GpuId(g), 0, buf);
    }

    // bandwidth split: the degraded server spends everything it has left on
    // the global ring; healthy servers give it a (1-X) slice and the partial
    // ring the X remainder
    let mut factors_g = BTreeMap::new();
    let mut factors_p = BTreeMap::new();
    let mut factors_s2 = BTreeMap::new();
    for s in 0..topo.servers() {
        let sid = ServerId(s);
        let nominal = topo.nominal_nic_bw(sid);
        let remaining = topo.aggregate_nic_bw(health, sid).max(1e-9);
        let f_g = ((1.0 - x) * nominal / remaining).min(1.0);
        let f_p = (x * nominal / remaining).min(1.0);
        factors_g.insert(sid, f_g);
        factors_p.insert(sid, f_p);
        factors_s2.insert(sid, f_p);
    }

    // stage 1: both rings concurrently
    let req_g = CollectiveRequest {
        kind: CollectiveKind::AllReduce,
        bytes_per_gpu: bytes_g,
        participants: global_gpus.clone(),
        root: 0,
        channels,
        reduction: Reduction::Sum,
    };
    let sched_g = ring_schedule(&req_g, None)?;
    comm.prepare(&sched_g, channels, transport, health)?;
    let opts_g = StageOpts {
        channels,
        slice: SLICE_GLOBAL,
        factors: factors_g,
        elem_offset: 0,
        elem_len: e_g,
        bytes: bytes_g,
    };

    let req_p = CollectiveRequest {
        kind: CollectiveKind::AllReduce,
        bytes_per_gpu: bytes_p,
        participants: partial_gpus.clone(),
        root: 0,
        channels,
        reduction: Reduction::Sum,
    };
    let sched_p = ring_schedule(&req_p, None)?;
    comm.prepare(&sched_p, channels, transport, health)?;
    let opts_p = StageOpts {
        channels,
        slice: SLICE_PARTIAL_BASE,
        factors: factors_p,
        elem_offset: e_g,
        elem_len: e_p_pad,
        bytes: bytes_p,
    };

    let before = server_traffic_snapshot(&topo, transport);
    if e_g > 0 || bytes_g > 0 {
        session.stage_schedule(&sched_g, &opts_g, engine, transport, comm)?;
    }
    session.stage_schedule(&sched_p, &opts_p, engine, transport, comm)?;
    pool_impaired_assignments(engine, transport, health)?;
    let stage1_completion = session.pump(engine, transport, hooks)?;
    let mid = server_traffic_snapshot(&topo, transport);

    // stage 2: contribution in, pipelined broadcast around, delivery back.
    // With a single excluded server the broadcast chains chunk-wise off the
    // contribution, so the whole stitching pipelines in one pass.
    let tails = stage_share_contributions(
        &mut session,
        engine,
        transport,
        comm,
        health,
        &topo,
        &tsp.partial_ring,
        &[tsp.degraded],
        e_g,
        e_p_pad,
        bytes_p,
        channels,
        &factors_s2,
        SLICE_STAGE2,
    )?;
    stage_share_broadcast(
        &mut session,
        engine,
        transport,
        comm,
        health,
        &topo,
        &tsp.partial_ring,
        &[tsp.degraded],
        e_g,
        e_p_pad,
        bytes_p,
        channels,
        &factors_s2,
        SLICE_STAGE2,
        Some(&tails),
    )?;
    pool_impaired_assignments(engine, transport, health)?;
    let completion = session.pump(engine, transport, hooks)?;
    let after = server_traffic_snapshot(&topo, transport);

    let intact = session.intact(transport);
    let buffers: Vec<Vec<f64>> = session
        .work
        .iter()
        .map(|b| b[..elems.min(b.len())].to_vec())
        .collect();
    Ok(StagedOutcome {
        completion,
        stage1_completion,
        buffers,
        intact,
        stage1_traffic: traffic_delta(&mid, &before),
        stage2_traffic: traffic_delta(&after, &mid),
    })
}

/// Stage-2 contribution phase for one excluded-share range: every excluded
/// server pre-reduces its share over the intra-node fabric and folds it into
/// the sub-ring's entry node. Returns the per-channel tail transfer (the
/// last contribution into the entry node); with one excluded server the
/// broadcast may chain on it chunk-wise, with several the caller must pump
/// to a barrier first. 
#[allow(clippy::too_many_arguments)]
fn stage_share_contributions(
    session: &mut ExecSession,
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &mut CommContext,
    health: &HealthMap,
    topo: &ClusterTopology,
    sub_ring: &[ServerId],
    excluded: &[ServerId],
    elem_offset: usize,
    elem_len: usize,
    share_bytes: u64,
    channels: usize,
    factors: &BTreeMap<ServerId, f64>,
    slice: u32,
) -> Result<Vec<Option<crate::ids::TransferId>>, ExecError> {
    if elem_len == 0 && share_bytes == 0 {
        return Ok(vec![None; channels]);
    }
    let entry = |s: ServerId| topo.gpus_on(s).next().unwrap();
    let exit = |s: ServerId| topo.gpus_on(s).last().unwrap();
    let per_ch_bytes = share_bytes.div_ceil(channels as u64);
    let sub = elem_len / channels;
    let opts = StageOpts {
        channels,
        slice,
        factors: factors.clone(),
        elem_offset,
        elem_len,
        bytes: share_bytes,
    };

    let mut tails = vec![None; channels];
    for (c, tail) in tails.iter_mut().enumerate() {
        let start = elem_offset + c * sub;
        for &ex in excluded {
            let ex_gpus: Vec<GpuId> = topo.gpus_on(ex).collect();
            let mut parent: Option<crate::ids::TransferId> = None;
            for w in ex_gpus.windows(2) {
                let conn = comm.open_edge(w[0], w[1], c, transport, health)?;
                let dep = parent.map(Dep::Chunkwise).unwrap_or(Dep::None);
                let tid = session.stage_leg(
                    engine,
                    transport,
                    conn,
                    per_ch_bytes,
                    dep,
                    &opts,
                    w[0],
                    w[1],
                    start,
                    start,
                    sub,
                    ApplyOp::AddOrig,
                    false,
                );
                parent = Some(tid);
            }
            // reduced share crosses into the sub-ring entry
            let conn = comm.open_edge(exit(ex), entry(sub_ring[0]), c, transport, health)?;
            let dep = parent.map(Dep::Chunkwise).unwrap_or(Dep::None);
            let tid = session.stage_leg(
                engine,
                transport,
                conn,
                per_ch_bytes,
                dep,
                &opts,
                exit(ex),
                entry(sub_ring[0]),
                start,
                start,
                sub,
                ApplyOp::AddInto,
                false,
            );
            *tail = Some(tid);
        }
    }
    Ok(tails)
}

/// Stage-2 broadcast phase: the finished share pipelines around the sub-ring
/// from its entry node, fans out over each server's intra-node fabric, and
/// delivery legs bring it back to the excluded servers. `chain` carries the
/// per-channel contribution tails to pipeline against; pass `None` after a
/// pump barrier.
#[allow(clippy::too_many_arguments)]
fn stage_share_broadcast(
    session: &mut ExecSession,
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &mut CommContext,
    health: &HealthMap,
    topo: &ClusterTopology,
    sub_ring: &[ServerId],
    excluded: &[ServerId],
    elem_offset: usize,
    elem_len: usize,
    share_bytes: u64,
    channels: usize,
    factors: &BTreeMap<ServerId, f64>,
    slice: u32,
    chain: Option<&[Option<crate::ids::TransferId>]>,
) -> Result<(), ExecError> {
    if elem_len == 0 && share_bytes == 0 {
        return Ok(());
    }
    let entry = |s: ServerId| topo.gpus_on(s).next().unwrap();
    let per_ch_bytes = share_bytes.div_ceil(channels as u64);
    let sub = elem_len / channels;
    let opts = StageOpts {
        channels,
        slice,
        factors: factors.clone(),
        elem_offset,
        elem_len,
        bytes: share_bytes,
    };

    for c in 0..channels {
        let start = elem_offset + c * sub;

        // pipelined ring broadcast across the sub-ring
        let mut parent: Option<crate::ids::TransferId> =
            chain.and_then(|t| t.get(c).copied().flatten());
        let mut ring_tids = vec![None; sub_ring.len()];
        ring_tids[0] = parent;
        for i in 0..sub_ring.len() - 1 {
            let (a, b) = (sub_ring[i], sub_ring[i + 1]);
            let conn = comm.open_edge(entry(a), entry(b), c, transport, health)?;
            let dep = parent.map(Dep::Chunkwise).unwrap_or(Dep::None);
            let tid = session.stage_leg(
                engine,
                transport,
                conn,
                per_ch_bytes,
                dep,
                &opts,
                entry(a),
                entry(b),
                start,
                start,
                sub,
                ApplyOp::Copy,
                false,
            );
            ring_tids[i + 1] = Some(tid);
            parent = Some(tid);
        }

        // deliver the finished share back to each excluded server, spread
        // over the tail of the sub-ring
        let mut delivery = Vec::new();
        for (i, &ex) in excluded.iter().enumerate() {
            let from_idx = sub_ring.len() - 1 - (i % sub_ring.len());
            let from = sub_ring[from_idx];
            let conn = comm.open_edge(entry(from), entry(ex), c, transport, health)?;
            let dep = ring_tids[from_idx].map(Dep::Chunkwise).unwrap_or(Dep::None);
            let tid = session.stage_leg(
                engine,
                transport,
                conn,
                per_ch_bytes,
                dep,
                &opts,
                entry(from),
                entry(ex),
                start,
                start,
                sub,
                ApplyOp::Copy,
                false,
            );
            delivery.push((ex, tid));
        }

        // intra-node fan-out inside every server
        for (i, &s) in sub_ring.iter().enumerate() {
            let gpus: Vec<GpuId> = topo.gpus_on(s).collect();
            let mut parent = ring_tids[i];
            for w in gpus.windows(2) {
                let conn = comm.open_edge(w[0], w[1], c, transport, health)?;
                let dep = parent.map(Dep::Chunkwise).unwrap_or(Dep::None);
                let tid = session.stage_leg(
                    engine,
                    transport,
                    conn,
                    per_ch_bytes,
                    dep,
                    &opts,
                    w[0],
                    w[1],
                    start,
                    start,
                    sub,
                    ApplyOp::Copy,
                    false,
                );
                parent = Some(tid);
            }
        }
        for &(ex, tid) in &delivery {
            let gpus: Vec<GpuId> = topo.gpus_on(ex).collect();
            let mut parent = Some(tid);
            for w in gpus.windows(2) {
                let conn = comm.open_edge(w[0], w[1], c, transport, health)?;
                let dep = parent.map(Dep::Chunkwise).unwrap_or(Dep::None);
                let tid = session.stage_leg(
                    engine,
                    transport,
                    conn,
                    per_ch_bytes,
                    dep,
                    &opts,
                    w[0],
                    w[1],
                    start,
                    start,
                    sub,
                    ApplyOp::Copy,
                    false,
                );
                parent = Some(tid);
            }
        }
    }
    Ok(())
}

/// One level of the recursive decomposition: a ring over `group` carrying
/// `share_fraction` of the data; `excluded` is the bottleneck peeled off to
/// the deeper levels (absent on the terminal level).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecursiveLevel {
    pub group: Vec<ServerId>,
    pub excluded: Option<ServerId>,
    /// Fraction of the total data this level's ring reduces.
    pub share_fraction: f64,
    /// The split applied at this level (0 on terminal levels).
    pub y: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecursivePlan {
    pub levels: Vec<RecursiveLevel>,
    pub predicted_time: f64,
    pub var_eps: f64,
}

pub const RECURSION_VAR_EPS: f64 = 0.05;
pub const RECURSION_DEPTH_CAP: usize = 4;

/// Peel bottleneck servers off recursively: each level isolates the current
/// slowest node, re-applies the two-group partition against the residual
/// group's average bandwidth, and stops when the group is small, bandwidth
/// spread is negligible, or the model prefers the plain ring.
pub fn recursive_plan(bandwidths: &[f64], g: usize, d: f64) -> RecursivePlan {
    assert!(bandwidths.len() >= 2, "need at least two servers");
    assert!(
        bandwidths.iter().all(|&b| b > 0.0),
        "bandwidths must be positive"
    );

    let mut levels = Vec::new();
    let mut group: Vec<(ServerId, f64)> = bandwidths
        .iter()
        .enumerate()
        .map(|(i, &b)| (ServerId(i), b))
        .collect();
    let mut share = 1.0;
    let mut predicted = 0.0;
    let mut broadcast_total = 0.0;

    loop {
        let ids: Vec<ServerId> = group.iter().map(|&(s, _)| s).collect();
        let n = group.len();
        let min_bw = group.iter().map(|&(_, b)| b).fold(f64::INFINITY, f64::min);
        let max_bw = group.iter().map(|&(_, b)| b).fold(0.0, f64::max);
        let spread = (max_bw - min_bw) / max_bw;
        let terminal = |levels: &mut Vec<RecursiveLevel>, predicted: &mut f64| {
            let k = (n * g) as f64;
            let a = 2.0 * (k - 1.0) / k;
            *predicted = predicted.max(a * share * d / min_bw);
            levels.push(RecursiveLevel {
                group: ids.clone(),
                excluded: None,
                share_fraction: share,
                y: 0.0,
                x: 0.0,
            });
        };

        if n < 3 || levels.len() + 1 >= RECURSION_DEPTH_CAP || spread < RECURSION_VAR_EPS {
            terminal(&mut levels, &mut predicted);
            break;
        }

        let (slow_idx, &(slow_id, slow_bw)) = group
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.1 .0.cmp(&b.1 .0)))
            .unwrap();
        let rest: Vec<(ServerId, f64)> = group
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != slow_idx)
            .map(|(_, &p)| p)
            .collect();
        let rest_avg = rest.iter().map(|&(_, b)| b).sum::<f64>() / rest.len() as f64;
        let x = 1.0 - slow_bw / rest_avg;
        if x <= 0.0 {
            terminal(&mut levels, &mut predicted);
            break;
        }

        let inp = PartitionInputs {
            n,
            g,
            x,
            d: share * d,
            b: rest_avg,
        };
        let plan = match optimal_partition(&inp, ThresholdRule::Exact) {
            Ok(p) => p,
            Err(_) => {
                terminal(&mut levels, &mut predicted);
                break;
            }
        };
        if plan.strategy == PlanStrategy::StandardRing {
            terminal(&mut levels, &mut predicted);
            break;
        }

        predicted = predicted.max(plan.t1.max(plan.t2));
        broadcast_total += plan.t3;
        levels.push(RecursiveLevel {
            group: ids,
            excluded: Some(slow_id),
            share_fraction: share * (1.0 - plan.y),
            y: plan.y,
            x,
        });
        share *= plan.y;
        group = rest;
    }

    RecursivePlan {
        levels,
        predicted_time: predicted + broadcast_total,
        var_eps: RECURSION_VAR_EPS,
    }
}

/// Execute a recursive plan: all level rings reduce concurrently on disjoint
/// data ranges and bandwidth slices; contribution legs then stitch excluded
/// servers' shares inward, and broadcast legs fan the finished shares back
/// out, range by range.
#[allow(clippy::too_many_arguments)]
pub fn execute_recursive(
    plan: &RecursivePlan,
    bytes_per_gpu: u64,
    inputs: &[Vec<f64>],
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &mut CommContext,
    health: &HealthMap,
    hooks: &mut dyn EventHooks,
    channels: usize,
) -> Result<StagedOutcome, ExecError> {
    let topo = transport.topology().clone();
    let channels = channels.max(1);
    let g = topo.gpus_per_server();
    let elems = inputs[0].len();
    let levels = &plan.levels;

    // element and byte ranges per level, padded to each ring's divisor
    let mut offsets = Vec::with_capacity(levels.len());
    let mut lens = Vec::with_capacity(levels.len());
    let mut log_lens = Vec::with_capacity(levels.len());
    let mut bytes = Vec::with_capacity(levels.len());
    let mut cursor = 0usize;
    let mut remaining_elems = elems;
    let mut remaining_bytes = bytes_per_gpu;
    for (i, lv) in levels.iter().enumerate() {
        let k = lv.group.len() * g;
        let (e_log, b) = if i + 1 == levels.len() {
            (remaining_elems, remaining_bytes)
        } else {
            let e = floor_multiple(
                (lv.share_fraction * elems as f64).round() as usize,
                k * channels,
            );
            let by = (lv.share_fraction * bytes_per_gpu as f64).round() as u64;
            (e.min(remaining_elems), by.min(remaining_bytes))
        };
        let e_pad = e_log.div_ceil(k * channels) * (k * channels);
        offsets.push(cursor);
        log_lens.push(e_log);
        lens.push(e_pad);
        bytes.push(b);
        cursor += e_pad;
        remaining_elems -= e_log;
        remaining_bytes -= b;
    }
    let buf_len = cursor;

    let mut session = ExecSession::new(topo.num_gpus(), buf_len.max(elems));
    // logical elements are contiguous per level range; copy each range in
    for (gpu, buf) in inputs.iter().enumerate() {
        let mut taken = 0usize;
        for i in 0..levels.len() {
            let part = &buf[taken..taken + log_lens[i]];
            session.set_input(GpuId(gpu), offsets[i], part);
            taken += log_lens[i];
        }
    }

    // per-level bandwidth slices: level rings pace at the residual rate of
    // their slowest member; deeper levels inherit the X-budget
    let mut stage1_factors: Vec<BTreeMap<ServerId, f64>> = Vec::new();
    let mut budget: BTreeMap<ServerId, f64> = (0..topo.servers())
        .map(|s| {
            let sid = ServerId(s);
            (sid, topo.aggregate_nic_bw(health, sid))
        })
        .collect();
    for lv in levels {
        let pace = lv
            .group
            .iter()
            .map(|s| budget[s])
            .fold(f64::INFINITY, f64::min)
            .max(1e-9);
        let mut f = BTreeMap::new();
        for s in 0..topo.servers() {
            let sid = ServerId(s);
            let rem = topo.aggregate_nic_bw(health, sid).max(1e-9);
            if lv.group.contains(&sid) {
                f.insert(sid, (pace / rem).min(1.0));
            }
        }
        for s in &lv.group {
            let b = budget.get_mut(s).unwrap();
            *b = (*b - pace).max(0.0);
        }
        // the excluded server keeps nothing back: it only rides this ring
        if let Some(ex) = lv.excluded {
            f.insert(ex, 1.0);
        }
        stage1_factors.push(f);
    }

    // stage 1: all rings concurrently
    let before = server_traffic_snapshot(&topo, transport);
    for (i, lv) in levels.iter().enumerate() {
        if lens[i] == 0 && bytes[i] == 0 {
            continue;
        }
        let participants = gpus_of(&topo, &lv.group);
        let req = CollectiveRequest {
            kind: CollectiveKind::AllReduce,
            bytes_per_gpu: bytes[i],
            participants,
            root: 0,
            channels,
            reduction: Reduction::Sum,
        };
        let sched = ring_schedule(&req, None)?;
        comm.prepare(&sched, channels, transport, health)?;
        let opts = StageOpts {
            channels,
            slice: SLICE_PARTIAL_BASE + i as u32,
            factors: stage1_factors[i].clone(),
            elem_offset: offsets[i],
            elem_len: lens[i],
            bytes: bytes[i],
        };
        session.stage_schedule(&sched, &opts, engine, transport, comm)?;
    }
    pool_impaired_assignments(engine, transport, health)?;
    let stage1_completion = session.pump(engine, transport, hooks)?;
    let mid = server_traffic_snapshot(&topo, transport);

    // stage 2: stitch each level's range, contributions from every server
    // excluded at a shallower level, then broadcast back out
    let mut full_factors = BTreeMap::new();
    for s in 0..topo.servers() {
        full_factors.insert(ServerId(s), 1.0);
    }
    for (i, lv) in levels.iter().enumerate().skip(1) {
        if lens[i] == 0 && bytes[i] == 0 {
            continue;
        }
        let excluded: Vec<ServerId> = levels[..i].iter().filter_map(|l| l.excluded).collect();
        if excluded.is_empty() {
            continue;
        }
        stage_share_contributions(
            &mut session,
            engine,
            transport,
            comm,
            health,
            &topo,
            &lv.group,
            &excluded,
            offsets[i],
            lens[i],
            bytes[i],
            channels,
            &full_factors,
            SLICE_STAGE2 + i as u32,
        )?;
    }
    pool_impaired_assignments(engine, transport, health)?;
    session.pump(engine, transport, hooks)?;
    for (i, lv) in levels.iter().enumerate().skip(1) {
        if lens[i] == 0 && bytes[i] == 0 {
            continue;
        }
        let excluded: Vec<ServerId> = levels[..i].iter().filter_map(|l| l.excluded).collect();
        if excluded.is_empty() {
            continue;
        }
        stage_share_broadcast(
            &mut session,
            engine,
            transport,
            comm,
            health,
            &topo,
            &lv.group,
            &excluded,
            offsets[i],
            lens[i],
            bytes[i],
            channels,
            &full_factors,
            SLICE_STAGE2 + i as u32,
            None,
        )?;
    }
    pool_impaired_assignments(engine, transport, health)?;
    let completion = session.pump(engine, transport, hooks)?;
    let after = server_traffic_snapshot(&topo, transport);

    let intact = session.intact(transport);
    // stitch logical ranges back together
    let buffers: Vec<Vec<f64>> = session
        .work
        .iter()
        .map(|b| {
            let mut out = Vec::with_capacity(elems);
            for i in 0..levels.len() {
                out.extend_from_slice(&b[offsets[i]..offsets[i] + log_lens[i]]);
            }
            out
        })
        .collect();
    Ok(StagedOutcome {
        completion,
        stage1_completion,
        buffers,
        intact,
        stage1_traffic: traffic_delta(&mid, &before),
        stage2_traffic: traffic_delta(&after, &mid),
    })
}

/// Extra serial latency steps the two-stage plan pays over the plain ring
/// (contribution, ring broadcast hops, delivery).
fn stage2_latency_steps(n: usize) -> usize {
    n + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StrategyChoice {
    /// Keep the schedule, rebalance traffic over healthy NICs.
    Balance,
    /// Two-stage split around a single degraded server.
    TwoStage(Box<PartitionPlan>),
    /// Recursive decomposition over a bandwidth spectrum.
    Recursive(Box<RecursivePlan>),
}

/// Runtime strategy pick: non-all-reduce kinds always rebalance; all-reduce
/// compares alpha-beta predicted times of the candidates at the actual
/// message size, so the crossover adapts to the hardware instead of a fixed
/// message-size threshold.
pub fn select_strategy(
    req: &CollectiveRequest,
    topo: &ClusterTopology,
    health: &HealthMap,
    cost: &CostParams,
) -> StrategyChoice {
    select_strategy_with_rule(req, topo, health, cost, ThresholdRule::Exact)
}

/// [`select_strategy`] with an explicit threshold rule.
pub fn select_strategy_with_rule(
    req: &CollectiveRequest,
    topo: &ClusterTopology,
    health: &HealthMap,
    cost: &CostParams,
    rule: ThresholdRule,
) -> StrategyChoice {
    if req.kind != CollectiveKind::AllReduce {
        return StrategyChoice::Balance;
    }
    let n = topo.servers();
    let g = topo.gpus_per_server();
    let k = (n * g) as f64;
    let a = 2.0 * (k - 1.0) / k;
    let d = req.bytes_per_gpu as f64;

    let degraded: Vec<(ServerId, f64)> = (0..n)
        .map(ServerId)
        .filter_map(|s| {
            let nominal = topo.nominal_nic_bw(s);
            let rem = topo.aggregate_nic_bw(health, s);
            (rem < nominal).then(|| (s, 1.0 - rem / nominal))
        })
        .collect();
    if degraded.is_empty() || n < 3 || g < 2 {
        return StrategyChoice::Balance;
    }

    let b = (0..n)
        .map(ServerId)
        .filter(|s| degraded.iter().all(|&(d, _)| d != *s))
        .map(|s| topo.nominal_nic_bw(s))
        .fold(
            f64::NAN,
            |acc: f64, v| if acc.is_nan() { v } else { acc.min(v) },
        );
    let b = if b.is_nan() {
        topo.nominal_nic_bw(ServerId(0))
    } else {
        b
    };

    let worst_rem = (0..n)
        .map(|s| topo.aggregate_nic_bw(health, ServerId(s)))
        .fold(f64::INFINITY, f64::min)
        .max(1e-9);
    let t_balance = 2.0 * (k - 1.0) * cost.alpha + a * d / worst_rem;

    if degraded.len() == 1 {
        let x = degraded[0].1;
        let inp = PartitionInputs { n, g, x, d, b };
        if let Ok(plan) = optimal_partition(&inp, rule) {
            if plan.strategy == PlanStrategy::R2ccAllReduce {
                let t_two =
                    (2.0 * (k - 1.0) + stage2_latency_steps(n) as f64) * cost.alpha + plan.t_total;
                if t_two < t_balance {
                    return StrategyChoice::TwoStage(Box::new(plan));
                }
            }
        }
        StrategyChoice::Balance
    } else {
        let bws: Vec<f64> = (0..n)
            .map(|s| topo.aggregate_nic_bw(health, ServerId(s)))
            .collect();
        let plan = recursive_plan(&bws, g, d);
        let extra_steps: f64 = plan
            .levels
            .iter()
            .map(|lv| stage2_latency_steps(lv.group.len()) as f64)
            .sum();
        let t_rec = (2.0 * (k - 1.0) + extra_steps) * cost.alpha + plan.predicted_time;
        if plan.levels.len() > 1 && t_rec < t_balance {
            StrategyChoice::Recursive(Box::new(plan))
        } else {
            StrategyChoice::Balance
        }
    }
}
