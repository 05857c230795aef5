//! Ring schedules for the core collectives, the brute-force semantic oracle
//! that defines correctness, and the executor that drives schedules through
//! the transport layer.
//!
//! Schedules move shard tokens between ring positions; shard blocks are
//! labeled by participant index, so permuting the ring order changes timing
//! but never the final buffers. Data values ride as small element arrays (one
//! value per element), while transfer byte sizes are tracked independently,
//! which keeps semantic checks exact without materializing gigabytes.
//!
//! [`ExecSession`] lets several schedules share one event loop and one set of
//! rank buffers, which is how the two-stage and recursive plans run their
//! global and partial rings concurrently on partitioned bandwidth slices.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, Event, EventKind};
use crate::health::HealthMap;
use crate::ids::{ConnId, TransferId};
use crate::topology::{GpuId, ServerId};
use crate::transport::{Dep, TransportError, TransportSim};

/// Transfer sizes are quantized to this many bytes before being split over
/// channels and shards.
pub const PAD_GRANULARITY: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    ReduceScatter,
    AllGather,
    Broadcast,
    Reduce,
    AllReduce,
    SendRecv,
    AllToAll,
}

impl CollectiveKind {
    pub fn uses_shard_ring(self) -> bool {
        matches!(
            self,
            CollectiveKind::ReduceScatter | CollectiveKind::AllGather | CollectiveKind::AllReduce
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveRequest {
    pub kind: CollectiveKind,
    /// Bytes per GPU buffer.
    pub bytes_per_gpu: u64,
    pub participants: Vec<GpuId>,
    /// Participant index of the root (Broadcast, Reduce) or sender (SendRecv).
    pub root: usize,
    pub channels: usize,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    ReduceScatter,
    AllGather,
    Pipeline,
    Exchange,
}

/// One ring step: `sender` and `receiver` are ring positions, `shard` is the
/// block (participant index) whose token moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    pub shard: usize,
    pub stage: StageTag,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("a collective needs at least 2 participants")]
    TooFewParticipants,
    #[error("participants must be distinct")]
    DuplicateParticipants,
    #[error("ring order must be a permutation of the participants")]
    NotAPermutation,
    #[error("root index {0} is out of range")]
    BadRoot(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: CollectiveKind,
    pub participants: Vec<GpuId>,
    pub ring_order: Vec<GpuId>,
    /// Participant index sitting at each ring position.
    pub rank_of_pos: Vec<usize>,
    pub root_pos: usize,
}

/// Build a ring schedule. `ring_order` defaults to the participant order;
/// when given it must be a permutation of the participants.
pub fn ring_schedule(
    req: &CollectiveRequest,
    ring_order: Option<Vec<GpuId>>,
) -> Result<Schedule, ScheduleError> {
    let participants = req.participants.clone();
    if participants.len() < 2 {
        return Err(ScheduleError::TooFewParticipants);
    }
    let mut seen = participants.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != participants.len() {
        return Err(ScheduleError::DuplicateParticipants);
    }
    if req.root >= participants.len() {
        return Err(ScheduleError::BadRoot(req.root));
    }
    let ring_order = ring_order.unwrap_or_else(|| participants.clone());
    let mut sorted = ring_order.clone();
    sorted.sort();
    if sorted != seen {
        return Err(ScheduleError::NotAPermutation);
    }
    let rank_of_pos = ring_order
        .iter()
        .map(|g| participants.iter().position(|p| p == g).unwrap())
        .collect::<Vec<_>>();
    let root_pos = rank_of_pos.iter().position(|&r| r == req.root).unwrap();
    Ok(Schedule {
        kind: req.kind,
        participants,
        ring_order,
        rank_of_pos,
        root_pos,
    })
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.ring_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring_order.is_empty()
    }

    pub fn rounds(&self) -> usize {
        let k = self.len();
        match self.kind {
            CollectiveKind::ReduceScatter | CollectiveKind::AllGather => k - 1,
            CollectiveKind::AllReduce => 2 * (k - 1),
            CollectiveKind::Broadcast | CollectiveKind::Reduce => k - 1,
            CollectiveKind::SendRecv => 1,
            CollectiveKind::AllToAll => 1,
        }
    }

    /// Shard block sent by ring position `p` in `round`. Reduce-scatter
    /// rounds walk backwards from the position's predecessor block so each
    /// position ends up holding its own block fully reduced; all-gather
    /// rounds then forward the freshly owned blocks around.
    fn shard_sent(&self, p: usize, round: usize) -> (usize, StageTag) {
        let k = self.len();
        let (pos_shift, stage) = match self.kind {
            CollectiveKind::ReduceScatter => (p + k - 1 - round, StageTag::ReduceScatter),
            CollectiveKind::AllGather => (p + k - round, StageTag::AllGather),
            CollectiveKind::AllReduce => {
                if round < k - 1 {
                    (p + k - 1 - round, StageTag::ReduceScatter)
                } else {
                    (p + 2 * k - 1 - round, StageTag::AllGather)
                }
            }
            _ => unreachable!("shard_sent only applies to shard-ring kinds"),
        };
        (self.rank_of_pos[pos_shift % k], stage)
    }

    /// Materialize the step list (mostly for inspection and tests).
    pub fn steps(&self) -> Vec<Step> {
        let k = self.len();
        let mut steps = Vec::new();
        match self.kind {
            CollectiveKind::ReduceScatter
            | CollectiveKind::AllGather
            | CollectiveKind::AllReduce => {
                for round in 0..self.rounds() {
                    for p in 0..k {
                        let (shard, stage) = self.shard_sent(p, round);
                        steps.push(Step {
                            round,
                            sender: p,
                            receiver: (p + 1) % k,
                            shard,
                            stage,
                        });
                    }
                }
            }
            CollectiveKind::Broadcast | CollectiveKind::Reduce => {
                let offset = if self.kind == CollectiveKind::Reduce {
                    1
                } else {
                    0
                };
                for round in 0..k - 1 {
                    let sender = (self.root_pos + round + offset) % k;
                    let receiver = (sender + 1) % k;
                    steps.push(Step {
                        round,
                        sender,
                        receiver,
                        shard: 0,
                        stage: StageTag::Pipeline,
                    });
                }
            }
            CollectiveKind::SendRecv => {
                steps.push(Step {
                    round: 0,
                    sender: self.root_pos,
                    receiver: (self.root_pos + 1) % k,
                    shard: 0,
                    stage: StageTag::Exchange,
                });
            }
            CollectiveKind::AllToAll => {
                for p in 0..k {
                    for q in 0..k {
                        if p != q {
                            steps.push(Step {
                                round: 0,
                                sender: p,
                                receiver: q,
                                shard: self.rank_of_pos[q],
                                stage: StageTag::Exchange,
                            });
                        }
                    }
                }
            }
        }
        steps
    }
}

/// Direct elementwise computation of the collective's result: the ground
/// truth every executed schedule must match exactly.
///
/// Input/output shapes per rank:
/// - reduce_scatter: input full buffer, output = the rank's reduced block
/// - all_gather: input = the rank's block, output = full concatenation
/// - all_reduce: full in, full out (elementwise reduction, replicated)
/// - broadcast: root's buffer everywhere
/// - reduce: full sum at the root, inputs echoed elsewhere
/// - send_recv: `[src, dst]` participants; dst receives src's buffer
/// - all_to_all: block j of rank r's output is block r of rank j's input
pub fn oracle(kind: CollectiveKind, inputs: &[Vec<f64>], root: usize) -> Vec<Vec<f64>> {
    let k = inputs.len();
    assert!(k >= 2);
    match kind {
        CollectiveKind::AllReduce => {
            let e = inputs[0].len();
            let mut sum = vec![0.0; e];
            for buf in inputs {
                for (s, v) in sum.iter_mut().zip(buf) {
                    *s += v;
                }
            }
            vec![sum; k]
        }
        CollectiveKind::Reduce => {
            let e = inputs[0].len();
            let mut sum = vec![0.0; e];
            for buf in inputs {
                for (s, v) in sum.iter_mut().zip(buf) {
                    *s += v;
                }
            }
            inputs
                .iter()
                .enumerate()
                .map(|(r, buf)| if r == root { sum.clone() } else { buf.clone() })
                .collect()
        }
        CollectiveKind::ReduceScatter => {
            let e = inputs[0].len();
            assert_eq!(e % k, 0, "buffer not divisible into shards");
            let block = e / k;
            (0..k)
                .map(|r| {
                    let mut shard = vec![0.0; block];
                    for buf in inputs {
                        for i in 0..block {
                            shard[i] += buf[r * block + i];
                        }
                    }
                    shard
                })
                .collect()
        }
        CollectiveKind::AllGather => {
            let mut cat = Vec::new();
            for buf in inputs {
                cat.extend_from_slice(buf);
            }
            vec![cat; k]
        }
        CollectiveKind::Broadcast => vec![inputs[root].clone(); k],
        CollectiveKind::SendRecv => {
            assert_eq!(k, 2);
            let src = root;
            let dst = 1 - root;
            let mut out = inputs.to_vec();
            out[dst] = inputs[src].clone();
            out
        }
        CollectiveKind::AllToAll => {
            let e = inputs[0].len();
            assert_eq!(e % k, 0);
            let block = e / k;
            (0..k)
                .map(|r| {
                    let mut out = vec![0.0; e];
                    for (j, buf) in inputs.iter().enumerate() {
                        out[j * block..(j + 1) * block]
                            .copy_from_slice(&buf[r * block..(r + 1) * block]);
                    }
                    out
                })
                .collect()
        }
    }
}

/// Side-channel for non-transfer events (fault injections, probe results,
/// recoveries) surfacing during an execution.
pub trait EventHooks {
    fn handle(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        ev: &Event,
    ) -> Result<(), TransportError>;
}

/// Ignores everything; for fault-free executions.
pub struct NoHooks;

impl EventHooks for NoHooks {
    fn handle(
        &mut self,
        _: &mut Engine,
        _: &mut TransportSim,
        _: &Event,
    ) -> Result<(), TransportError> {
        Ok(())
    }
}

/// Connection cache shared by the collectives of one scenario: ring edges are
/// opened once and reused, mirroring a communicator's persistent transports.
#[derive(Debug, Default)]
pub struct CommContext {
    conns: BTreeMap<(GpuId, GpuId, usize), ConnId>,
}

impl CommContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edge(&self, a: GpuId, b: GpuId, channel: usize) -> Option<ConnId> {
        self.conns.get(&(a, b, channel)).copied()
    }

    pub fn open_edge(
        &mut self,
        a: GpuId,
        b: GpuId,
        channel: usize,
        transport: &mut TransportSim,
        health: &HealthMap,
    ) -> Result<ConnId, TransportError> {
        if let Some(c) = self.conns.get(&(a, b, channel)) {
            return Ok(*c);
        }
        let c = transport.open_conn(a, b, channel, health)?;
        self.conns.insert((a, b, channel), c);
        Ok(c)
    }

    /// Open every connection the schedule will use.
    pub fn prepare(
        &mut self,
        sched: &Schedule,
        channels: usize,
        transport: &mut TransportSim,
        health: &HealthMap,
    ) -> Result<(), TransportError> {
        let k = sched.len();
        let mut edges: Vec<(GpuId, GpuId)> = Vec::new();
        match sched.kind {
            CollectiveKind::AllToAll => {
                for p in 0..k {
                    for q in 0..k {
                        if p != q {
                            edges.push((sched.ring_order[p], sched.ring_order[q]));
                        }
                    }
                }
            }
            CollectiveKind::SendRecv => {
                edges.push((
                    sched.ring_order[sched.root_pos],
                    sched.ring_order[(sched.root_pos + 1) % k],
                ));
            }
            _ => {
                for p in 0..k {
                    edges.push((sched.ring_order[p], sched.ring_order[(p + 1) % k]));
                }
            }
        }
        for (a, b) in edges {
            for c in 0..channels {
                self.open_edge(a, b, c, transport, health)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("schedule error: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("execution stalled: {pending} transfers can never complete (chain exhausted?)")]
    Stalled { pending: usize },
    #[error("missing connection for edge {0:?} -> {1:?} channel {2}")]
    MissingEdge(GpuId, GpuId, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOp {
    /// Overwrite the destination range.
    Copy,
    /// Incoming plus the receiver's original contribution (running reduction).
    AddOrig,
    /// Incoming plus whatever the receiver currently holds (stitching).
    AddInto,
}

struct Action {
    receiver: usize,
    sender: usize,
    src_start: usize,
    dst_start: usize,
    len: usize,
    op: ApplyOp,
    /// Read the sender's immutable input rather than its working buffer;
    /// concurrent exchanges would otherwise race with incoming writes.
    from_orig: bool,
}

/// Per-schedule staging options.
#[derive(Debug, Clone, Default)]
pub struct StageOpts {
    pub channels: usize,
    /// Rate slice the transfers run on (bandwidth partitioning).
    pub slice: u32,
    /// Per-server fraction of NIC line rate; servers not listed run at 1.0.
    pub factors: BTreeMap<ServerId, f64>,
    /// Element range of the rank buffers this schedule operates on.
    pub elem_offset: usize,
    pub elem_len: usize,
    /// Bytes per GPU this schedule moves (the range's share of the payload).
    pub bytes: u64,
}

/// Shared executor state: rank buffers (indexed by `GpuId`), the staged
/// transfer graph, and the completion bookkeeping for pumping the engine.
pub struct ExecSession {
    pub work: Vec<Vec<f64>>,
    orig: Vec<Vec<f64>>,
    actions: Vec<Action>,
    tid2action: BTreeMap<TransferId, usize>,
    pending: BTreeSet<TransferId>,
    all_tids: Vec<TransferId>,
    completion: f64,
}

impl ExecSession {
    /// Buffers for `num_gpus` ranks of `buf_len` elements each, all zero.
    pub fn new(num_gpus: usize, buf_len: usize) -> Self {
        ExecSession {
            work: vec![vec![0.0; buf_len]; num_gpus],
            orig: vec![vec![0.0; buf_len]; num_gpus],
            actions: Vec::new(),
            tid2action: BTreeMap::new(),
            pending: BTreeSet::new(),
            all_tids: Vec::new(),
            completion: 0.0,
        }
    }

    /// Install a rank's input at an offset of its buffer.
    pub fn set_input(&mut self, gpu: GpuId, offset: usize, data: &[f64]) {
        self.work[gpu.0][offset..offset + data.len()].copy_from_slice(data);
        self.orig[gpu.0][offset..offset + data.len()].copy_from_slice(data);
    }

    /// Refresh the immutable snapshot after direct writes to `work`
    /// (used between stitching phases).
    pub fn snapshot_orig(&mut self) {
        self.orig = self.work.clone();
    }

    pub fn transfers(&self) -> &[TransferId] {
        &self.all_tids
    }

    fn factor(opts: &StageOpts, server: ServerId) -> f64 {
        opts.factors.get(&server).copied().unwrap_or(1.0)
    }

    /// Stage one point-to-point leg. Returns the transfer id for chaining.
    #[allow(clippy::too_many_arguments)]
    pub fn stage_leg(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        conn: ConnId,
        bytes: u64,
        dep: Dep,
        opts: &StageOpts,
        sender: GpuId,
        receiver: GpuId,
        src_start: usize,
        dst_start: usize,
        len: usize,
        op: ApplyOp,
        from_orig: bool,
    ) -> TransferId {
        self.actions.push(Action {
            receiver: receiver.0,
            sender: sender.0,
            src_start,
            dst_start,
            len,
            op,
            from_orig,
        });
        let f_src = Self::factor(opts, transport.topology().server_of_gpu(sender).unwrap());
        let f_dst = Self::factor(opts, transport.topology().server_of_gpu(receiver).unwrap());
        let tid = transport.send(
            engine,
            conn,
            bytes,
            dep,
            opts.slice,
            f_src,
            f_dst,
            (self.actions.len() - 1) as u64,
        );
        self.tid2action.insert(tid, self.actions.len() - 1);
        self.pending.insert(tid);
        self.all_tids.push(tid);
        tid
    }

    /// Stage a whole ring schedule over the session's element range.
    pub fn stage_schedule(
        &mut self,
        sched: &Schedule,
        opts: &StageOpts,
        engine: &mut Engine,
        transport: &mut TransportSim,
        comm: &CommContext,
    ) -> Result<(), ExecError> {
        let k = sched.len();
        let channels = opts.channels.max(1);
        let sharded = sched.kind.uses_shard_ring() || sched.kind == CollectiveKind::AllToAll;
        assert!(
            !sharded || opts.elem_len.is_multiple_of(k * channels),
            "element range must divide into shards and channels"
        );
        let block = if sharded {
            opts.elem_len / k
        } else {
            opts.elem_len
        };

        let d_pad = if sharded {
            pad_to(opts.bytes, channels as u64 * k as u64 * PAD_GRANULARITY)
        } else {
            pad_to(opts.bytes, channels as u64 * PAD_GRANULARITY)
        };
        let piece = if sharded {
            d_pad / (channels as u64 * k as u64)
        } else {
            d_pad / channels as u64
        };

        let edge_conn = |a: GpuId, b: GpuId, c: usize| -> Result<ConnId, ExecError> {
            comm.edge(a, b, c).ok_or(ExecError::MissingEdge(a, b, c))
        };

        for c in 0..channels {
            match sched.kind {
                CollectiveKind::ReduceScatter
                | CollectiveKind::AllGather
                | CollectiveKind::AllReduce => {
                    let sub = block / channels;
                    let mut prev: Vec<Option<TransferId>> = vec![None; k];
                    for round in 0..sched.rounds() {
                        let mut next: Vec<Option<TransferId>> = vec![None; k];
                        for p in 0..k {
                            let (shard, stage) = sched.shard_sent(p, round);
                            let recv_pos = (p + 1) % k;
                            let conn =
                                edge_conn(sched.ring_order[p], sched.ring_order[recv_pos], c)?;
                            let start = opts.elem_offset + shard * block + c * sub;
                            let op = if stage == StageTag::ReduceScatter {
                                ApplyOp::AddOrig
                            } else {
                                ApplyOp::Copy
                            };
                            let dep = match prev[(p + k - 1) % k] {
                                Some(parent) => Dep::Chunkwise(parent),
                                None => Dep::None,
                            };
                            let tid = self.stage_leg(
                                engine,
                                transport,
                                conn,
                                piece,
                                dep,
                                opts,
                                sched.ring_order[p],
                                sched.ring_order[recv_pos],
                                start,
                                start,
                                sub,
                                op,
                                false,
                            );
                            next[p] = Some(tid);
                        }
                        prev = next;
                    }
                }
                CollectiveKind::Broadcast | CollectiveKind::Reduce => {
                    let sub = opts.elem_len / channels;
                    let start = opts.elem_offset + c * sub;
                    let offset = if sched.kind == CollectiveKind::Reduce {
                        1
                    } else {
                        0
                    };
                    let mut parent: Option<TransferId> = None;
                    for round in 0..sched.rounds() {
                        let sender = (sched.root_pos + round + offset) % k;
                        let recv_pos = (sender + 1) % k;
                        let conn =
                            edge_conn(sched.ring_order[sender], sched.ring_order[recv_pos], c)?;
                        let dep = match parent {
                            Some(t) => Dep::Chunkwise(t),
                            None => Dep::None,
                        };
                        let op = if sched.kind == CollectiveKind::Reduce {
                            ApplyOp::AddOrig
                        } else {
                            ApplyOp::Copy
                        };
                        let tid = self.stage_leg(
                            engine,
                            transport,
                            conn,
                            piece,
                            dep,
                            opts,
                            sched.ring_order[sender],
                            sched.ring_order[recv_pos],
                            start,
                            start,
                            sub,
                            op,
                            false,
                        );
                        parent = Some(tid);
                    }
                }
                CollectiveKind::SendRecv => {
                    let sub = opts.elem_len / channels;
                    let sender = sched.root_pos;
                    let recv_pos = (sender + 1) % k;
                    let conn = edge_conn(sched.ring_order[sender], sched.ring_order[recv_pos], c)?;
                    self.stage_leg(
                        engine,
                        transport,
                        conn,
                        piece,
                        Dep::None,
                        opts,
                        sched.ring_order[sender],
                        sched.ring_order[recv_pos],
                        opts.elem_offset + c * sub,
                        opts.elem_offset + c * sub,
                        sub,
                        ApplyOp::Copy,
                        true,
                    );
                }
                CollectiveKind::AllToAll => {
                    let sub = block / channels;
                    for p in 0..k {
                        for q in 0..k {
                            if p == q {
                                continue;
                            }
                            let conn = edge_conn(sched.ring_order[p], sched.ring_order[q], c)?;
                            // the sender's block for the receiver lands at the
                            // sender's index in the receiver's buffer
                            let (rs, rq) = (sched.rank_of_pos[p], sched.rank_of_pos[q]);
                            self.stage_leg(
                                engine,
                                transport,
                                conn,
                                piece,
                                Dep::None,
                                opts,
                                sched.ring_order[p],
                                sched.ring_order[q],
                                opts.elem_offset + rq * block + c * sub,
                                opts.elem_offset + rs * block + c * sub,
                                sub,
                                ApplyOp::Copy,
                                true,
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Pump the engine until every staged transfer confirmed. Non-transfer
    /// events go to the hooks. Returns the completion time of the last
    /// transfer confirmed so far.
    pub fn pump(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        hooks: &mut dyn EventHooks,
    ) -> Result<f64, ExecError> {
        while !self.pending.is_empty() {
            let Some(ev) = engine.step() else {
                return Err(ExecError::Stalled {
                    pending: self.pending.len(),
                });
            };
            match ev.kind {
                EventKind::ChunkComplete { .. } | EventKind::ChunkReady { .. } => {
                    if let Some(notice) = transport.on_chunk_complete(engine, &ev) {
                        if let Some(&ai) = self.tid2action.get(&notice.transfer) {
                            apply_action(&mut self.work, &self.orig, &self.actions[ai]);
                            self.pending.remove(&notice.transfer);
                            self.completion = self.completion.max(notice.at);
                        }
                    }
                }
                _ => hooks.handle(engine, transport, &ev)?,
            }
        }
        Ok(self.completion)
    }

    pub fn completion(&self) -> f64 {
        self.completion
    }

    /// Every staged transfer confirmed bit-exact on its receiver.
    pub fn intact(&self, transport: &TransportSim) -> bool {
        self.all_tids.iter().all(|&t| {
            let tr = transport.transfer(t);
            tr.completed_at.is_some() && tr.ledger.assembled_matches()
        })
    }

    fn orig_buf(&self, gpu: usize) -> &[f64] {
        &self.orig[gpu]
    }
}

fn apply_action(work: &mut [Vec<f64>], orig: &[Vec<f64>], a: &Action) {
    let (s, r) = (a.sender, a.receiver);
    let src: Vec<f64> = if a.from_orig {
        orig[s][a.src_start..a.src_start + a.len].to_vec()
    } else {
        work[s][a.src_start..a.src_start + a.len].to_vec()
    };
    let dst = &mut work[r][a.dst_start..a.dst_start + a.len];
    match a.op {
        ApplyOp::Copy => dst.copy_from_slice(&src),
        ApplyOp::AddOrig => {
            for (i, v) in src.iter().enumerate() {
                dst[i] = v + orig[r][a.dst_start + i];
            }
        }
        ApplyOp::AddInto => {
            for (i, v) in src.iter().enumerate() {
                dst[i] += v;
            }
        }
    }
}

fn pad_to(x: u64, m: u64) -> u64 {
    x.div_ceil(m) * m
}

fn pad_elems(e: usize, m: usize) -> usize {
    e.div_ceil(m) * m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOptions {
    pub channels: usize,
    pub slice: u32,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            channels: 1,
            slice: 0,
        }
    }
}

#[derive(Debug)]
pub struct ExecOutcome {
    /// Simulation time when the last transfer confirmed.
    pub completion: f64,
    /// Canonical per-rank outputs, shaped like [`oracle`]'s.
    pub buffers: Vec<Vec<f64>>,
    /// Every transfer of this execution confirmed bit-exact.
    pub intact: bool,
    pub transfers: Vec<TransferId>,
}

/// Execute one collective end to end: builds a session, stages the schedule,
/// pumps to completion, and extracts the canonical outputs.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    sched: &Schedule,
    bytes_per_gpu: u64,
    inputs: &[Vec<f64>],
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &CommContext,
    hooks: &mut dyn EventHooks,
    opts: &ExecOptions,
) -> Result<ExecOutcome, ExecError> {
    let k = sched.len();
    assert_eq!(inputs.len(), k, "one input buffer per participant");
    let channels = opts.channels.max(1);

    let sharded = sched.kind.uses_shard_ring() || sched.kind == CollectiveKind::AllToAll;
    let e_logical = match sched.kind {
        CollectiveKind::AllGather => inputs[0].len() * k,
        _ => inputs[0].len(),
    };
    let e_pad = if sharded {
        pad_elems(e_logical, k * channels)
    } else {
        pad_elems(e_logical.max(1), channels)
    };
    let block = e_pad / k;

    let num_gpus = transport.topology().num_gpus();
    let mut session = ExecSession::new(num_gpus, e_pad);
    for (r, buf) in inputs.iter().enumerate() {
        let gpu = sched.participants[r];
        match sched.kind {
            CollectiveKind::AllGather => session.set_input(gpu, r * block, buf),
            _ => session.set_input(gpu, 0, buf),
        }
    }

    let stage_opts = StageOpts {
        channels,
        slice: opts.slice,
        factors: BTreeMap::new(),
        elem_offset: 0,
        elem_len: e_pad,
        bytes: bytes_per_gpu,
    };
    session.stage_schedule(sched, &stage_opts, engine, transport, comm)?;
    let completion = session.pump(engine, transport, hooks)?;

    // own block never crosses the wire in an exchange
    if sched.kind == CollectiveKind::AllToAll {
        for r in 0..k {
            let gpu = sched.participants[r].0;
            let own = session.orig_buf(gpu)[r * block..(r + 1) * block].to_vec();
            session.work[gpu][r * block..(r + 1) * block].copy_from_slice(&own);
        }
    }

    let intact = session.intact(transport);
    let buffers = canonical_outputs(sched, e_logical, block, &session.work, &session.orig);
    let transfers = session.all_tids;
    Ok(ExecOutcome {
        completion,
        buffers,
        intact,
        transfers,
    })
}

fn canonical_outputs(
    sched: &Schedule,
    e_logical: usize,
    block: usize,
    work: &[Vec<f64>],
    orig: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let k = sched.len();
    let buf = |r: usize| &work[sched.participants[r].0];
    match sched.kind {
        CollectiveKind::ReduceScatter => (0..k)
            .map(|r| {
                let logical_block = e_logical / k;
                buf(r)[r * block..r * block + logical_block].to_vec()
            })
            .collect(),
        CollectiveKind::AllGather | CollectiveKind::AllToAll => {
            let shard_logical = e_logical / k;
            (0..k)
                .map(|r| {
                    let mut out = Vec::with_capacity(e_logical);
                    for b in 0..k {
                        out.extend_from_slice(&buf(r)[b * block..b * block + shard_logical]);
                    }
                    out
                })
                .collect()
        }
        CollectiveKind::AllReduce | CollectiveKind::Broadcast | CollectiveKind::SendRecv => {
            (0..k).map(|r| buf(r)[..e_logical].to_vec()).collect()
        }
        CollectiveKind::Reduce => (0..k)
            .map(|r| {
                if r == sched.rank_of_pos[sched.root_pos] {
                    buf(r)[..e_logical].to_vec()
                } else {
                    orig[sched.participants[r].0][..e_logical].to_vec()
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::ring_allreduce_time;
    use crate::topology::{build_topology, TopologySpec};
    use crate::transport::TransportKnobs;
    use std::sync::Arc;

    fn req(kind: CollectiveKind, participants: Vec<GpuId>, bytes: u64) -> CollectiveRequest {
        CollectiveRequest {
            kind,
            bytes_per_gpu: bytes,
            participants,
            root: 0,
            channels: 1,
            reduction: Reduction::Sum,
        }
    }

    fn gpus(n: usize) -> Vec<GpuId> {
        (0..n).map(GpuId).collect()
    }

    #[test]
    fn oracle_allreduce_sums() {
        let inputs: Vec<Vec<f64>> = (1..=4).map(|r| vec![r as f64; 3]).collect();
        let out = oracle(CollectiveKind::AllReduce, &inputs, 0);
        assert!(out.iter().all(|b| b == &vec![10.0; 3]));

        let zeros: Vec<Vec<f64>> = vec![vec![0.0; 4]; 3];
        let out = oracle(CollectiveKind::AllReduce, &zeros, 0);
        assert!(out.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn oracle_allgather_concatenates() {
        let inputs = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let out = oracle(CollectiveKind::AllGather, &inputs, 0);
        let expect = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        assert!(out.iter().all(|b| b == &expect));
    }

    #[test]
    fn schedule_validation() {
        let r = req(CollectiveKind::AllReduce, vec![GpuId(0)], 64);
        assert_eq!(
            ring_schedule(&r, None).unwrap_err(),
            ScheduleError::TooFewParticipants
        );

        let r = req(CollectiveKind::AllReduce, vec![GpuId(0), GpuId(0)], 64);
        assert_eq!(
            ring_schedule(&r, None).unwrap_err(),
            ScheduleError::DuplicateParticipants
        );

        let r = req(CollectiveKind::AllReduce, gpus(3), 64);
        assert_eq!(
            ring_schedule(&r, Some(vec![GpuId(0), GpuId(1), GpuId(5)])).unwrap_err(),
            ScheduleError::NotAPermutation
        );
    }

    #[test]
    fn reduce_scatter_step_volume() {
        // 2 ranks: one round, each sends half the buffer and keeps its shard
        let r = req(CollectiveKind::ReduceScatter, gpus(2), 1024);
        let sched = ring_schedule(&r, None).unwrap();
        let steps = sched.steps();
        assert_eq!(steps.len(), 2);
        assert_eq!(sched.rounds(), 1);
    }

    /// Full pipeline: schedule -> transport -> buffers, no failures.
    fn run_collective(
        kind: CollectiveKind,
        n: usize,
        g: usize,
        nics: usize,
        bytes: u64,
        channels: usize,
        elems_per_rank: usize,
    ) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let topo = Arc::new(build_topology(&TopologySpec::uniform(n, g, nics, 1e9)).unwrap());
        let mut engine = Engine::new();
        let mut transport = TransportSim::new(
            topo,
            TransportKnobs {
                chunk_size: 4096,
                ..TransportKnobs::default()
            },
        );
        let health = HealthMap::new();
        let participants = gpus(n * g);
        let k = participants.len();
        let inputs: Vec<Vec<f64>> = (0..k)
            .map(|r| {
                let len = if kind == CollectiveKind::AllGather {
                    elems_per_rank / k
                } else {
                    elems_per_rank
                };
                (0..len).map(|i| (r * 31 + i) as f64).collect()
            })
            .collect();
        let mut r = req(kind, participants, bytes);
        r.channels = channels;
        let sched = ring_schedule(&r, None).unwrap();
        let mut comm = CommContext::new();
        comm.prepare(&sched, channels, &mut transport, &health)
            .unwrap();
        let out = execute(
            &sched,
            bytes,
            &inputs,
            &mut engine,
            &mut transport,
            &comm,
            &mut NoHooks,
            &ExecOptions {
                channels,
                ..ExecOptions::default()
            },
        )
        .unwrap();
        assert!(out.intact);
        let expect = oracle(kind, &inputs, 0);
        (out.completion, out.buffers, expect)
    }

    #[test]
    fn executed_collectives_match_oracle() {
        for kind in [
            CollectiveKind::ReduceScatter,
            CollectiveKind::AllGather,
            CollectiveKind::Broadcast,
            CollectiveKind::Reduce,
            CollectiveKind::AllReduce,
            CollectiveKind::AllToAll,
        ] {
            let (_, got, expect) = run_collective(kind, 2, 2, 2, 1 << 16, 2, 16);
            assert_eq!(got, expect, "{kind:?} diverged from the oracle");
        }
    }

    #[test]
    fn executed_send_recv_matches_oracle() {
        let topo = Arc::new(build_topology(&TopologySpec::uniform(2, 1, 2, 1e9)).unwrap());
        let mut engine = Engine::new();
        let mut transport = TransportSim::new(topo, TransportKnobs::default());
        let health = HealthMap::new();
        let inputs = vec![vec![7.0, 8.0], vec![0.0, 0.0]];
        let r = req(CollectiveKind::SendRecv, gpus(2), 4096);
        let sched = ring_schedule(&r, None).unwrap();
        let mut comm = CommContext::new();
        comm.prepare(&sched, 1, &mut transport, &health).unwrap();
        let out = execute(
            &sched,
            4096,
            &inputs,
            &mut engine,
            &mut transport,
            &comm,
            &mut NoHooks,
            &ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(out.buffers, oracle(CollectiveKind::SendRecv, &inputs, 0));
    }

    #[test]
    fn homogeneous_allreduce_matches_ring_time_within_one_percent() {
        let (n, g, nics) = (2, 2, 2);
        let d: u64 = 1 << 20;
        let (makespan, got, expect) =
            run_collective(CollectiveKind::AllReduce, n, g, nics, d, 2, 8);
        assert_eq!(got, expect);
        let b_server = nics as f64 * 1e9;
        let model = ring_allreduce_time(n, g, d as f64, b_server);
        let rel = (makespan - model).abs() / model;
        assert!(
            rel < 0.01,
            "makespan {makespan} vs model {model} (rel {rel})"
        );
    }

    #[test]
    fn zero_size_collective_costs_only_latency_steps() {
        let topo = Arc::new(build_topology(&TopologySpec::uniform(2, 1, 1, 1e9)).unwrap());
        let alpha = 1e-5;
        let mut engine = Engine::new();
        let mut transport = TransportSim::new(
            topo,
            TransportKnobs {
                alpha,
                ..TransportKnobs::default()
            },
        );
        let health = HealthMap::new();
        let inputs = vec![vec![1.0], vec![2.0]];
        let r = req(CollectiveKind::AllReduce, gpus(2), 0);
        let sched = ring_schedule(&r, None).unwrap();
        let mut comm = CommContext::new();
        comm.prepare(&sched, 1, &mut transport, &health).unwrap();
        let out = execute(
            &sched,
            0,
            &inputs,
            &mut engine,
            &mut transport,
            &comm,
            &mut NoHooks,
            &ExecOptions::default(),
        )
        .unwrap();
        // 2(K-1) = 2 rounds, each paying one posting latency along the chain
        let steps = sched.rounds() as f64;
        assert!(
            (out.completion - steps * alpha).abs() < 1e-12,
            "completion {} vs {}",
            out.completion,
            steps * alpha
        );
        assert_eq!(out.buffers, oracle(CollectiveKind::AllReduce, &inputs, 0));
    }

    #[test]
    fn ring_order_permutation_never_changes_buffers() {
        let kinds = [
            CollectiveKind::AllReduce,
            CollectiveKind::ReduceScatter,
            CollectiveKind::AllGather,
        ];
        for kind in kinds {
            let topo = Arc::new(build_topology(&TopologySpec::uniform(2, 2, 2, 1e9)).unwrap());
            let health = HealthMap::new();
            let participants = gpus(4);
            let inputs: Vec<Vec<f64>> = (0..4)
                .map(|r| {
                    let len = if kind == CollectiveKind::AllGather {
                        2
                    } else {
                        8
                    };
                    (0..len).map(|i| (r * 10 + i) as f64).collect()
                })
                .collect();
            let expect = oracle(kind, &inputs, 0);
            for order in [
                vec![GpuId(0), GpuId(1), GpuId(2), GpuId(3)],
                vec![GpuId(2), GpuId(0), GpuId(3), GpuId(1)],
                vec![GpuId(3), GpuId(2), GpuId(1), GpuId(0)],
            ] {
                let mut engine = Engine::new();
                let mut transport = TransportSim::new(Arc::clone(&topo), TransportKnobs::default());
                let r = req(kind, participants.clone(), 1 << 14);
                let sched = ring_schedule(&r, Some(order)).unwrap();
                let mut comm = CommContext::new();
                comm.prepare(&sched, 1, &mut transport, &health).unwrap();
                let out = execute(
                    &sched,
                    1 << 14,
                    &inputs,
                    &mut engine,
                    &mut transport,
                    &comm,
                    &mut NoHooks,
                    &ExecOptions::default(),
                )
                .unwrap();
                assert_eq!(out.buffers, expect, "{kind:?} changed under reordering");
            }
        }
    }

    #[test]
    fn broadcast_three_ranks_two_pipelined_steps() {
        let (_, got, expect) = run_collective(CollectiveKind::Broadcast, 3, 1, 1, 4096, 1, 6);
        assert_eq!(got, expect);
        let r = req(CollectiveKind::Broadcast, gpus(3), 4096);
        let sched = ring_schedule(&r, None).unwrap();
        assert_eq!(sched.rounds(), 2);
    }

    #[test]
    fn cross_server_traffic_matches_lower_bound_at_one_gpu_per_server() {
        use crate::cost_model::min_cross_server_traffic;
        for (kind, n) in [
            (CollectiveKind::ReduceScatter, 4),
            (CollectiveKind::AllGather, 4),
            (CollectiveKind::AllReduce, 4),
        ] {
            let topo = Arc::new(build_topology(&TopologySpec::uniform(n, 1, 1, 1e9)).unwrap());
            let mut engine = Engine::new();
            let mut transport = TransportSim::new(
                Arc::clone(&topo),
                TransportKnobs {
                    chunk_size: 4096,
                    ..TransportKnobs::default()
                },
            );
            let health = HealthMap::new();
            let d: u64 = 1 << 20;
            let k = n;
            let inputs: Vec<Vec<f64>> = (0..k)
                .map(|r| {
                    let len = if kind == CollectiveKind::AllGather {
                        4
                    } else {
                        4 * k
                    };
                    vec![r as f64; len]
                })
                .collect();
            let r = req(kind, gpus(n), d);
            let sched = ring_schedule(&r, None).unwrap();
            let mut comm = CommContext::new();
            comm.prepare(&sched, 1, &mut transport, &health).unwrap();
            execute(
                &sched,
                d,
                &inputs,
                &mut engine,
                &mut transport,
                &comm,
                &mut NoHooks,
                &ExecOptions::default(),
            )
            .unwrap();
            let bound = min_cross_server_traffic(kind, d as f64, n);
            for s in 0..n {
                let (tx, _) = transport.server_traffic(crate::topology::ServerId(s));
                let diff = (tx as f64 - bound).abs();
                assert!(
                    diff <= transport.knobs.chunk_size as f64,
                    "{kind:?} server {s}: tx {tx} vs bound {bound}"
                );
            }
        }
    }
}
