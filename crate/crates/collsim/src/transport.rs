//! Simulated chunked RDMA-style transfers: completion semantics, multi-NIC
//! buffer registration, failover chains and the rollback/retransmit protocol.
//!
//! Timing is a tandem queueing model. Every NIC direction (and each server's
//! intra-node fabric) is a serial lane; a chunk is first serviced by the
//! sender's tx lane, then by the receiver's rx lane, so a fast sender frees
//! its lane while the receiver drains. Lanes arbitrate queued chunks
//! round-robin across connections, the way hardware interleaves queue pairs,
//! so redistributed flows share capacity fairly with resident ones. Rate
//! slices partition a lane's bandwidth between concurrently planned
//! schedules without interference.
//!
//! The ledger records sender completions (polled only once a chunk is fully
//! delivered) and receiver confirmations (one link latency later). Send
//! buffers stay intact until completion, so a rollback can always rewind the
//! sender to its first unacknowledged chunk and retransmit on a backup NIC,
//! while the receiver discards partial chunks. Payloads are carried as
//! per-chunk checksums, which keeps integrity checks bit-exact without
//! materializing gigabytes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{Engine, Event, EventKind};
use crate::faults::FaultTarget;
use crate::health::HealthMap;
use crate::ids::{ConnId, Side, TransferId};
use crate::topology::{ClusterTopology, GpuId, NicId, ServerId};

pub const DEFAULT_CHUNK_SIZE: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkSendState {
    NotSent,
    InFlight,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChunkRecvState {
    NotReceived,
    Partial(u64),
    Confirmed,
}

fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 step; stable content fingerprint per chunk
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-transfer record of each chunk's sender completion and receiver
/// confirmation status.
#[derive(Debug, Clone)]
pub struct ChunkLedger {
    pub chunk_size: u64,
    pub total_bytes: u64,
    send: Vec<ChunkSendState>,
    recv: Vec<ChunkRecvState>,
    sent_checksum: Vec<u64>,
    recv_checksum: Vec<Option<u64>>,
}

impl ChunkLedger {
    pub fn new(total_bytes: u64, chunk_size: u64, payload_seed: u64) -> Self {
        assert!(chunk_size > 0, "chunk_size must be positive");
        let n = total_bytes.div_ceil(chunk_size) as usize;
        ChunkLedger {
            chunk_size,
            total_bytes,
            send: vec![ChunkSendState::NotSent; n],
            recv: vec![ChunkRecvState::NotReceived; n],
            sent_checksum: (0..n as u64).map(|i| mix(payload_seed, i)).collect(),
            recv_checksum: vec![None; n],
        }
    }

    pub fn num_chunks(&self) -> u32 {
        self.send.len() as u32
    }

    pub fn chunk_bytes(&self, i: u32) -> u64 {
        let i = i as u64;
        let start = i * self.chunk_size;
        (self.total_bytes - start).min(self.chunk_size)
    }

    pub fn send_state(&self, i: u32) -> ChunkSendState {
        self.send[i as usize]
    }

    pub fn recv_state(&self, i: u32) -> ChunkRecvState {
        self.recv[i as usize]
    }

    pub fn sent_checksum(&self, i: u32) -> u64 {
        self.sent_checksum[i as usize]
    }

    /// First chunk without a polled completion; equals `num_chunks` when
    /// everything already completed (nothing to resend).
    pub fn sender_resume(&self) -> u32 {
        self.send
            .iter()
            .position(|s| *s != ChunkSendState::Completed)
            .map(|i| i as u32)
            .unwrap_or(self.num_chunks())
    }

    /// Highest confirmed chunk index, or -1 if none.
    pub fn receiver_floor(&self) -> i64 {
        self.recv
            .iter()
            .rposition(|s| *s == ChunkRecvState::Confirmed)
            .map(|i| i as i64)
            .unwrap_or(-1)
    }

    pub fn all_confirmed(&self) -> bool {
        self.recv.iter().all(|s| *s == ChunkRecvState::Confirmed)
    }

    /// Bit-exactness of the assembled receive buffer against the sender's.
    pub fn assembled_matches(&self) -> bool {
        self.recv_checksum
            .iter()
            .zip(&self.sent_checksum)
            .all(|(r, s)| *r == Some(*s))
    }

    fn confirm(&mut self, i: u32, checksum: u64) {
        let i = i as usize;
        if self.recv[i] == ChunkRecvState::Confirmed {
            // re-confirmation must never change content
            assert_eq!(
                self.recv_checksum[i],
                Some(checksum),
                "confirmed chunk re-written"
            );
            return;
        }
        self.recv[i] = ChunkRecvState::Confirmed;
        self.recv_checksum[i] = Some(checksum);
    }
}

/// How a transfer's chunks gate on another transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dep {
    None,
    /// Start only after the other transfer fully confirmed.
    After(TransferId),
    /// Chunk k may start once chunk k of the other transfer confirmed
    /// (cut-through pipelining along a ring).
    Chunkwise(TransferId),
}

/// One lane of the fabric: a NIC direction or a server's intra-node fabric,
/// per rate slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum LaneKey {
    Tx(NicId, u32),
    Rx(NicId, u32),
    NvLink(ServerId, u32),
}

#[derive(Debug, Clone, Copy)]
struct ChunkFlight {
    src_nic: Option<NicId>,
    dst_nic: Option<NicId>,
    /// Start of the current service phase.
    start: f64,
    end: f64,
    rate: f64,
    aborted: bool,
}

#[derive(Debug, Clone, Copy)]
struct QEntry {
    transfer: TransferId,
    chunk: u32,
    epoch: u32,
}

/// Round-robin queue over connections: hardware-style arbitration so one
/// connection's burst cannot starve another's.
#[derive(Debug, Default)]
struct Lane {
    queues: BTreeMap<ConnId, VecDeque<QEntry>>,
    last_served: Option<ConnId>,
    busy: bool,
    /// Bytes waiting or in service, for backlog-based lane choice.
    backlog: u64,
}

impl Lane {
    fn push(&mut self, conn: ConnId, entry: QEntry, bytes: u64) {
        self.queues.entry(conn).or_default().push_back(entry);
        self.backlog += bytes;
    }

    /// Next entry in round-robin order over connections, restricted to
    /// connections the caller may serve.
    fn pop(&mut self, eligible: impl Fn(ConnId) -> bool) -> Option<(ConnId, QEntry)> {
        if self.queues.is_empty() {
            return None;
        }
        let keys: Vec<ConnId> = self.queues.keys().copied().collect();
        let start = match self.last_served {
            Some(last) => keys.iter().position(|&c| c > last).unwrap_or(0),
            None => 0,
        };
        for i in 0..keys.len() {
            let c = keys[(start + i) % keys.len()];
            if !eligible(c) {
                continue;
            }
            if let Some(q) = self.queues.get_mut(&c) {
                if let Some(e) = q.pop_front() {
                    if q.is_empty() {
                        self.queues.remove(&c);
                    }
                    self.last_served = Some(c);
                    return Some((c, e));
                }
                self.queues.remove(&c);
            }
        }
        None
    }

    fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }
}

/// Shared work queue of a degraded server's NIC pool: any idle lane of the
/// pool pulls from it, so no lane sits idle while spread traffic waits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PoolKey {
    Tx(ServerId, u32),
    Rx(ServerId, u32),
}

#[derive(Debug)]
pub struct Transfer {
    pub id: TransferId,
    pub conn: ConnId,
    pub bytes: u64,
    pub ledger: ChunkLedger,
    pub dep: Dep,
    pub slice: u32,
    /// Fraction of the sender-side NIC line rate this transfer may use.
    pub src_factor: f64,
    /// Fraction of the receiver-side NIC line rate this transfer may use.
    pub dst_factor: f64,
    /// Opaque tag for the layer above (schedule step index, stage, ...).
    pub tag: u64,
    pub completed_at: Option<f64>,
    flights: Vec<Option<ChunkFlight>>,
    confirm_at: Vec<Option<f64>>,
}

impl Transfer {
    pub fn confirm_time(&self, chunk: u32) -> Option<f64> {
        self.confirm_at[chunk as usize]
    }
}

/// Live state of one simulated connection (one direction of a ring edge).
#[derive(Debug)]
pub struct ConnectionState {
    pub id: ConnId,
    pub src_gpu: GpuId,
    pub dst_gpu: GpuId,
    pub src_server: ServerId,
    pub dst_server: ServerId,
    pub channel: usize,
    pub cross_server: bool,
    pub chain_src: Vec<NicId>,
    pub chain_dst: Vec<NicId>,
    pub registered_src: BTreeSet<NicId>,
    pub registered_dst: BTreeSet<NicId>,
    pub active_src: Option<NicId>,
    pub active_dst: Option<NicId>,
    assign_src: Vec<(NicId, f64)>,
    assign_dst: Vec<(NicId, f64)>,
    assigned_bytes_src: BTreeMap<NicId, u64>,
    assigned_bytes_dst: BTreeMap<NicId, u64>,
    /// NICs this connection refuses even if globally healthy (QP-level faults).
    pub blacklist_src: BTreeSet<NicId>,
    pub blacklist_dst: BTreeSet<NicId>,
    pub epoch: u32,
    pub pending_failure: bool,
    transfers: Vec<TransferId>,
}

impl ConnectionState {
    /// The sender-side active NIC.
    pub fn active_nic(&self) -> Option<NicId> {
        self.active_src
    }

    pub fn chain(&self) -> &[NicId] {
        &self.chain_src
    }

    pub fn transfers(&self) -> &[TransferId] {
        &self.transfers
    }

    pub fn src_assignment(&self) -> &[(NicId, f64)] {
        &self.assign_src
    }

    pub fn dst_assignment(&self) -> &[(NicId, f64)] {
        &self.assign_dst
    }

    /// Does the side's current assignment touch an unusable NIC?
    pub fn side_impaired(&self, side: Side, health: &HealthMap) -> bool {
        let (assign, blacklist) = match side {
            Side::Src => (&self.assign_src, &self.blacklist_src),
            Side::Dst => (&self.assign_dst, &self.blacklist_dst),
        };
        assign
            .iter()
            .any(|(n, _)| !health.nic_healthy(*n) || blacklist.contains(n))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("no healthy backup NIC left in the failover chain")]
    NoBackup,
    #[error("rollback/migrate called with no failure pending")]
    NoFailurePending,
    #[error("cannot register NIC {0:?}: it belongs to another server")]
    CrossServerNic(NicId),
    #[error("no healthy NIC available to open the connection")]
    NoHealthyNic,
    #[error("engine refused an event: {0}")]
    Engine(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportKnobs {
    pub chunk_size: u64,
    /// Per-transfer posting latency plus one-hop delivery latency.
    pub alpha: f64,
    /// Multi-registration at connection setup (the normal mode). When false,
    /// every migration to a never-registered NIC pays `registration_cost`.
    pub multi_registration: bool,
    pub registration_cost: f64,
}

impl Default for TransportKnobs {
    fn default() -> Self {
        TransportKnobs {
            chunk_size: DEFAULT_CHUNK_SIZE,
            alpha: 0.0,
            multi_registration: true,
            registration_cost: 2e-3,
        }
    }
}

/// A transfer finished and its payload is confirmed on the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionNotice {
    pub transfer: TransferId,
    pub conn: ConnId,
    pub tag: u64,
    pub at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationOutcome {
    pub src_nic: Option<NicId>,
    pub dst_nic: Option<NicId>,
    /// Extra delay paid for on-demand registration (zero with multi-registration).
    pub registration_penalty_applied: bool,
}

const PHASE_TX: u8 = 0;
const PHASE_DELIVERED: u8 = 1;

/// Owns connections, transfers and fabric lanes for one engine instance.
#[derive(Debug)]
pub struct TransportSim {
    topo: Arc<ClusterTopology>,
    pub knobs: TransportKnobs,
    conns: Vec<ConnectionState>,
    transfers: Vec<Transfer>,
    lanes: BTreeMap<LaneKey, Lane>,
    pools: BTreeMap<PoolKey, Lane>,
    in_service: BTreeMap<(TransferId, u32, u8), LaneKey>,
    chunkwise_dependents: BTreeMap<TransferId, Vec<TransferId>>,
    after_dependents: BTreeMap<TransferId, Vec<TransferId>>,
    nic_tx_bytes: BTreeMap<NicId, u64>,
    nic_rx_bytes: BTreeMap<NicId, u64>,
    server_tx_bytes: BTreeMap<ServerId, u64>,
    server_rx_bytes: BTreeMap<ServerId, u64>,
}

impl TransportSim {
    pub fn new(topo: Arc<ClusterTopology>, knobs: TransportKnobs) -> Self {
        TransportSim {
            topo,
            knobs,
            conns: Vec::new(),
            transfers: Vec::new(),
            lanes: BTreeMap::new(),
            pools: BTreeMap::new(),
            in_service: BTreeMap::new(),
            chunkwise_dependents: BTreeMap::new(),
            after_dependents: BTreeMap::new(),
            nic_tx_bytes: BTreeMap::new(),
            nic_rx_bytes: BTreeMap::new(),
            server_tx_bytes: BTreeMap::new(),
            server_rx_bytes: BTreeMap::new(),
        }
    }

    pub fn topology(&self) -> &Arc<ClusterTopology> {
        &self.topo
    }

    pub fn conn(&self, id: ConnId) -> &ConnectionState {
        &self.conns[id.0 as usize]
    }

    pub fn transfer(&self, id: TransferId) -> &Transfer {
        &self.transfers[id.0 as usize]
    }

    pub fn connections(&self) -> &[ConnectionState] {
        &self.conns
    }

    pub fn nic_traffic(&self) -> impl Iterator<Item = (NicId, u64, u64)> + '_ {
        self.topo.all_nics().iter().map(|n| {
            (
                n.id,
                self.nic_tx_bytes.get(&n.id).copied().unwrap_or(0),
                self.nic_rx_bytes.get(&n.id).copied().unwrap_or(0),
            )
        })
    }

    pub fn server_traffic(&self, server: ServerId) -> (u64, u64) {
        (
            self.server_tx_bytes.get(&server).copied().unwrap_or(0),
            self.server_rx_bytes.get(&server).copied().unwrap_or(0),
        )
    }

    /// Open a connection between two GPUs. Cross-server connections get the
    /// full failover chain (channel's rail NIC first, then PCIe order) and,
    /// in the normal mode, multi-registration of the whole chain.
    pub fn open_conn(
        &mut self,
        src_gpu: GpuId,
        dst_gpu: GpuId,
        channel: usize,
        health: &HealthMap,
    ) -> Result<ConnId, TransportError> {
        let src_server = self.topo.server_of_gpu(src_gpu).expect("src gpu");
        let dst_server = self.topo.server_of_gpu(dst_gpu).expect("dst gpu");
        let cross = src_server != dst_server;
        let id = ConnId(self.conns.len() as u32);

        let (chain_src, chain_dst) = if cross {
            (
                self.channel_chain(src_gpu, channel),
                self.channel_chain(dst_gpu, channel),
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let pick = |chain: &[NicId]| chain.iter().copied().find(|&n| health.nic_healthy(n));
        let (active_src, active_dst) = if cross {
            let a = pick(&chain_src).ok_or(TransportError::NoHealthyNic)?;
            let b = pick(&chain_dst).ok_or(TransportError::NoHealthyNic)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };

        let reg = |chain: &[NicId], active: Option<NicId>| -> BTreeSet<NicId> {
            if self.knobs.multi_registration {
                chain.iter().copied().collect()
            } else {
                active.into_iter().collect()
            }
        };

        self.conns.push(ConnectionState {
            id,
            src_gpu,
            dst_gpu,
            src_server,
            dst_server,
            channel,
            cross_server: cross,
            registered_src: reg(&chain_src, active_src),
            registered_dst: reg(&chain_dst, active_dst),
            chain_src,
            chain_dst,
            active_src,
            active_dst,
            assign_src: active_src.map(|n| (n, 1.0)).into_iter().collect(),
            assign_dst: active_dst.map(|n| (n, 1.0)).into_iter().collect(),
            assigned_bytes_src: BTreeMap::new(),
            assigned_bytes_dst: BTreeMap::new(),
            blacklist_src: BTreeSet::new(),
            blacklist_dst: BTreeSet::new(),
            epoch: 0,
            pending_failure: false,
            transfers: Vec::new(),
        });
        Ok(id)
    }

    fn channel_chain(&self, gpu: GpuId, channel: usize) -> Vec<NicId> {
        let mut chain = self.topo.failover_chain(gpu).expect("gpu in topology");
        let server = self.topo.server_of_gpu(gpu).unwrap();
        let nics = self.topo.nics_on(server).unwrap();
        if !nics.is_empty() {
            let primary = nics[channel % nics.len()];
            if let Some(pos) = chain.iter().position(|&n| n == primary) {
                let nic = chain.remove(pos);
                chain.insert(0, nic);
            }
        }
        chain
    }

    /// Pre-register GPU buffers with a NIC set so later migrations skip the
    /// registration cost. Idempotent; rejects NICs of another server.
    pub fn register_multi(
        &mut self,
        conn: ConnId,
        side: Side,
        nics: &BTreeSet<NicId>,
    ) -> Result<(), TransportError> {
        let c = &mut self.conns[conn.0 as usize];
        let server = match side {
            Side::Src => c.src_server,
            Side::Dst => c.dst_server,
        };
        for &n in nics {
            if self.topo.nic(n).server != server {
                return Err(TransportError::CrossServerNic(n));
            }
        }
        let reg = match side {
            Side::Src => &mut c.registered_src,
            Side::Dst => &mut c.registered_dst,
        };
        *reg = nics.clone();
        Ok(())
    }

    /// Queue `bytes` on the connection as a chunked transfer. Chunks submit
    /// to the fabric as soon as their dependency allows; the whole transfer
    /// pays the posting latency once.
    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &mut self,
        engine: &mut Engine,
        conn: ConnId,
        bytes: u64,
        dep: Dep,
        slice: u32,
        src_factor: f64,
        dst_factor: f64,
        tag: u64,
    ) -> TransferId {
        let id = TransferId(self.transfers.len() as u32);
        let seed = mix(0xc0115e5e, (conn.0 as u64) << 32 | id.0 as u64);
        let ledger = ChunkLedger::new(bytes, self.knobs.chunk_size, seed);
        let n = ledger.num_chunks() as usize;
        self.transfers.push(Transfer {
            id,
            conn,
            bytes,
            ledger,
            dep,
            slice,
            src_factor,
            dst_factor,
            tag,
            completed_at: None,
            flights: vec![None; n],
            confirm_at: vec![None; n],
        });
        self.conns[conn.0 as usize].transfers.push(id);

        match dep {
            Dep::None => self.begin_transfer(engine, id, engine.now()),
            Dep::After(parent) => {
                if let Some(done) = self.transfers[parent.0 as usize].completed_at {
                    let at = done.max(engine.now());
                    self.begin_transfer(engine, id, at);
                } else {
                    self.after_dependents.entry(parent).or_default().push(id);
                }
            }
            Dep::Chunkwise(parent) => {
                let pn = self.transfers[parent.0 as usize].ledger.num_chunks();
                if pn == 0 || pn != self.transfers[id.0 as usize].ledger.num_chunks() {
                    // fall back to whole-transfer gating on size mismatch
                    self.transfers[id.0 as usize].dep = Dep::After(parent);
                    if let Some(done) = self.transfers[parent.0 as usize].completed_at {
                        let at = done.max(engine.now());
                        self.begin_transfer(engine, id, at);
                    } else {
                        self.after_dependents.entry(parent).or_default().push(id);
                    }
                } else {
                    self.chunkwise_dependents
                        .entry(parent)
                        .or_default()
                        .push(id);
                    // chunks already confirmed on the parent unblock now
                    for k in 0..pn {
                        if let Some(t) = self.transfers[parent.0 as usize].confirm_time(k) {
                            let at = t.max(engine.now());
                            self.mark_ready(engine, id, k, at);
                        }
                    }
                }
            }
        }
        id
    }

    fn begin_transfer(&mut self, engine: &mut Engine, id: TransferId, ready: f64) {
        let n = self.transfers[id.0 as usize].ledger.num_chunks();
        let conn = self.transfers[id.0 as usize].conn;
        let epoch = self.conns[conn.0 as usize].epoch;
        if n == 0 {
            // empty payload: complete after the posting latency alone
            let at = ready + self.knobs.alpha;
            engine
                .schedule(
                    at,
                    EventKind::ChunkComplete {
                        conn,
                        transfer: id,
                        chunk: u32::MAX,
                        epoch,
                        phase: PHASE_DELIVERED,
                    },
                )
                .expect("schedule empty-transfer completion");
            return;
        }
        for k in 0..n {
            self.mark_ready(engine, id, k, ready);
        }
    }

    /// Announce a chunk's dependency satisfied at `ready`; it is submitted to
    /// its send lane at that instant.
    fn mark_ready(&mut self, engine: &mut Engine, id: TransferId, chunk: u32, ready: f64) {
        let conn = self.transfers[id.0 as usize].conn;
        let epoch = self.conns[conn.0 as usize].epoch;
        let at = ready.max(engine.now());
        engine
            .schedule(
                at,
                EventKind::ChunkReady {
                    conn,
                    transfer: id,
                    chunk,
                    epoch,
                },
            )
            .expect("chunk ready in the future");
    }

    /// Submit a ready chunk to its first service stage: a single-NIC
    /// assignment queues on that lane, a spread assignment queues on the
    /// server's shared pool.
    fn submit_chunk(&mut self, engine: &mut Engine, id: TransferId, chunk: u32) {
        let (conn_id, slice, chunk_bytes) = {
            let t = &self.transfers[id.0 as usize];
            (t.conn, t.slice, t.ledger.chunk_bytes(chunk))
        };
        if self.conns[conn_id.0 as usize].pending_failure {
            return; // requeued at migration
        }
        let cross = self.conns[conn_id.0 as usize].cross_server;
        let epoch = self.conns[conn_id.0 as usize].epoch;

        {
            let t = &mut self.transfers[id.0 as usize];
            t.ledger.send[chunk as usize] = ChunkSendState::InFlight;
            t.flights[chunk as usize] = Some(ChunkFlight {
                src_nic: None,
                dst_nic: None,
                start: engine.now(),
                end: engine.now(),
                rate: 0.0,
                aborted: false,
            });
        }
        let entry = QEntry {
            transfer: id,
            chunk,
            epoch,
        };
        if !cross {
            let lane = LaneKey::NvLink(self.conns[conn_id.0 as usize].src_server, slice);
            self.lanes
                .entry(lane)
                .or_default()
                .push(conn_id, entry, chunk_bytes);
            self.grant(engine, lane);
            return;
        }
        let c = &self.conns[conn_id.0 as usize];
        if c.assign_src.len() == 1 {
            let nic = c.assign_src[0].0;
            let lane = LaneKey::Tx(nic, slice);
            self.lanes
                .entry(lane)
                .or_default()
                .push(conn_id, entry, chunk_bytes);
            self.grant(engine, lane);
        } else {
            let server = c.src_server;
            let nics: Vec<NicId> = c.assign_src.iter().map(|&(n, _)| n).collect();
            self.pools
                .entry(PoolKey::Tx(server, slice))
                .or_default()
                .push(conn_id, entry, chunk_bytes);
            for nic in nics {
                self.grant(engine, LaneKey::Tx(nic, slice));
            }
        }
    }

    /// Start the next queued chunk on an idle lane: the lane's own queue
    /// first, then its server pool.
    fn grant(&mut self, engine: &mut Engine, lane: LaneKey) {
        loop {
            {
                let l = self.lanes.entry(lane).or_default();
                if l.busy {
                    return;
                }
            }
            let popped = self.pop_for(lane);
            let Some((conn_id, entry)) = popped else {
                return;
            };
            // stale entries from before a rollback are dropped silently
            if self.conns[conn_id.0 as usize].epoch != entry.epoch {
                continue;
            }
            if self.transfers[entry.transfer.0 as usize].flights[entry.chunk as usize]
                .map(|f| f.aborted)
                .unwrap_or(true)
            {
                continue;
            }
            let chunk_bytes = self.transfers[entry.transfer.0 as usize]
                .ledger
                .chunk_bytes(entry.chunk);
            let t = &self.transfers[entry.transfer.0 as usize];
            let (rate, phase, first) = match lane {
                LaneKey::Tx(nic, _) => (
                    self.topo.nic(nic).bandwidth * t.src_factor,
                    PHASE_TX,
                    entry.chunk == 0,
                ),
                LaneKey::Rx(nic, _) => (
                    self.topo.nic(nic).bandwidth * t.dst_factor,
                    PHASE_DELIVERED,
                    false,
                ),
                LaneKey::NvLink(_, _) => (
                    self.topo.nvlink_bw() * t.src_factor,
                    PHASE_DELIVERED,
                    entry.chunk == 0,
                ),
            };
            // the transfer's posting latency rides on its first chunk
            let alpha = if first { self.knobs.alpha } else { 0.0 };
            let dur = alpha + chunk_bytes as f64 / rate.max(1e-9);
            let start = engine.now();
            let end = start + dur;
            {
                let t = &mut self.transfers[entry.transfer.0 as usize];
                let f = t.flights[entry.chunk as usize].as_mut().unwrap();
                f.start = start;
                f.end = end;
                f.rate = chunk_bytes as f64 / dur.max(1e-30);
                match lane {
                    LaneKey::Tx(nic, _) => f.src_nic = Some(nic),
                    LaneKey::Rx(nic, _) => f.dst_nic = Some(nic),
                    LaneKey::NvLink(..) => {}
                }
            }
            match lane {
                LaneKey::Tx(nic, _) => {
                    let c = &mut self.conns[conn_id.0 as usize];
                    *c.assigned_bytes_src.entry(nic).or_insert(0) += chunk_bytes;
                }
                LaneKey::Rx(nic, _) => {
                    let c = &mut self.conns[conn_id.0 as usize];
                    *c.assigned_bytes_dst.entry(nic).or_insert(0) += chunk_bytes;
                }
                LaneKey::NvLink(..) => {}
            }
            self.lanes.get_mut(&lane).unwrap().busy = true;
            self.in_service
                .insert((entry.transfer, entry.chunk, phase), lane);
            engine
                .schedule(
                    end,
                    EventKind::ChunkComplete {
                        conn: conn_id,
                        transfer: entry.transfer,
                        chunk: entry.chunk,
                        epoch: entry.epoch,
                        phase,
                    },
                )
                .expect("service completion in the future");
            return;
        }
    }

    /// Pop the lane's next unit of work: its private queue first, then the
    /// server pool, restricted to connections whose assignment includes this
    /// NIC.
    fn pop_for(&mut self, lane: LaneKey) -> Option<(ConnId, QEntry)> {
        if let Some(l) = self.lanes.get_mut(&lane) {
            if !l.is_empty() {
                if let Some(hit) = l.pop(|_| true) {
                    return Some(hit);
                }
            }
        }
        let (pool_key, nic, rx) = match lane {
            LaneKey::Tx(nic, slice) => (PoolKey::Tx(self.topo.nic(nic).server, slice), nic, false),
            LaneKey::Rx(nic, slice) => (PoolKey::Rx(self.topo.nic(nic).server, slice), nic, true),
            LaneKey::NvLink(..) => return None,
        };
        let conns = &self.conns;
        self.pools.get_mut(&pool_key).and_then(|pool| {
            pool.pop(|c| {
                let conn = &conns[c.0 as usize];
                let assign = if rx {
                    &conn.assign_dst
                } else {
                    &conn.assign_src
                };
                assign.iter().any(|&(n, _)| n == nic)
            })
        })
    }

    /// Handle one transport event (chunk ready or a lane finishing service).
    /// Returns a notice when a whole transfer confirmed.
    pub fn on_chunk_complete(
        &mut self,
        engine: &mut Engine,
        ev: &Event,
    ) -> Option<CompletionNotice> {
        match ev.kind {
            EventKind::ChunkReady {
                conn,
                transfer,
                chunk,
                epoch,
            } => {
                if self.conns[conn.0 as usize].epoch == epoch
                    && self.transfers[transfer.0 as usize].ledger.send_state(chunk)
                        == ChunkSendState::NotSent
                    && self.transfers[transfer.0 as usize].flights[chunk as usize].is_none()
                {
                    self.submit_chunk(engine, transfer, chunk);
                }
                None
            }
            EventKind::ChunkComplete {
                conn,
                transfer,
                chunk,
                epoch,
                phase,
            } => {
                if chunk == u32::MAX {
                    return self.complete_transfer(engine, transfer, ev.time);
                }
                // free the lane first: even aborted service occupied the wire
                if let Some(lane) = self.in_service.remove(&(transfer, chunk, phase)) {
                    if let Some(l) = self.lanes.get_mut(&lane) {
                        l.busy = false;
                    }
                    self.grant(engine, lane);
                }
                if self.conns[conn.0 as usize].epoch != epoch {
                    return None;
                }
                let aborted = self.transfers[transfer.0 as usize].flights[chunk as usize]
                    .map(|f| f.aborted)
                    .unwrap_or(true);
                if aborted {
                    return None;
                }
                if phase == PHASE_TX {
                    self.enter_rx(engine, transfer, chunk);
                    None
                } else {
                    self.deliver_chunk(engine, transfer, chunk, ev.time)
                }
            }
            _ => None,
        }
    }

    /// After the sender NIC finished, the chunk queues on the receiver side.
    fn enter_rx(&mut self, engine: &mut Engine, id: TransferId, chunk: u32) {
        let (conn_id, slice, chunk_bytes) = {
            let t = &self.transfers[id.0 as usize];
            (t.conn, t.slice, t.ledger.chunk_bytes(chunk))
        };
        if self.conns[conn_id.0 as usize].pending_failure {
            return;
        }
        let epoch = self.conns[conn_id.0 as usize].epoch;
        {
            let t = &mut self.transfers[id.0 as usize];
            let f = t.flights[chunk as usize].as_mut().unwrap();
            f.start = engine.now();
        }
        let entry = QEntry {
            transfer: id,
            chunk,
            epoch,
        };
        let c = &self.conns[conn_id.0 as usize];
        if c.assign_dst.len() == 1 {
            let nic = c.assign_dst[0].0;
            let lane = LaneKey::Rx(nic, slice);
            self.lanes
                .entry(lane)
                .or_default()
                .push(conn_id, entry, chunk_bytes);
            self.grant(engine, lane);
        } else {
            let server = c.dst_server;
            let nics: Vec<NicId> = c.assign_dst.iter().map(|&(n, _)| n).collect();
            self.pools
                .entry(PoolKey::Rx(server, slice))
                .or_default()
                .push(conn_id, entry, chunk_bytes);
            for nic in nics {
                self.grant(engine, LaneKey::Rx(nic, slice));
            }
        }
    }

    /// Final delivery: the sender polls its completion and the receiver
    /// confirms the content one link latency later.
    fn deliver_chunk(
        &mut self,
        engine: &mut Engine,
        transfer: TransferId,
        chunk: u32,
        at: f64,
    ) -> Option<CompletionNotice> {
        let confirm = at + self.knobs.alpha;
        let (chunk_bytes, flight) = {
            let t = &mut self.transfers[transfer.0 as usize];
            t.ledger.send[chunk as usize] = ChunkSendState::Completed;
            let checksum = t.ledger.sent_checksum(chunk);
            t.ledger.confirm(chunk, checksum);
            t.confirm_at[chunk as usize] = Some(confirm);
            (
                t.ledger.chunk_bytes(chunk),
                t.flights[chunk as usize].unwrap(),
            )
        };

        // traffic accounting on success
        if let (Some(s), Some(d)) = (flight.src_nic, flight.dst_nic) {
            *self.nic_tx_bytes.entry(s).or_insert(0) += chunk_bytes;
            *self.nic_rx_bytes.entry(d).or_insert(0) += chunk_bytes;
            let (ss, ds) = (self.topo.nic(s).server, self.topo.nic(d).server);
            *self.server_tx_bytes.entry(ss).or_insert(0) += chunk_bytes;
            *self.server_rx_bytes.entry(ds).or_insert(0) += chunk_bytes;
        }

        // unblock chunk-wise dependents
        if let Some(deps) = self.chunkwise_dependents.get(&transfer).cloned() {
            for dep in deps {
                let d = &self.transfers[dep.0 as usize];
                if d.flights[chunk as usize].is_none()
                    && d.ledger.send_state(chunk) == ChunkSendState::NotSent
                {
                    self.mark_ready(engine, dep, chunk, confirm);
                }
            }
        }

        if self.transfers[transfer.0 as usize].ledger.all_confirmed() {
            return self.complete_transfer(engine, transfer, confirm);
        }
        None
    }

    fn complete_transfer(
        &mut self,
        engine: &mut Engine,
        transfer: TransferId,
        at: f64,
    ) -> Option<CompletionNotice> {
        let t = &mut self.transfers[transfer.0 as usize];
        if t.completed_at.is_some() {
            return None;
        }
        t.completed_at = Some(at);
        let notice = CompletionNotice {
            transfer,
            conn: t.conn,
            tag: t.tag,
            at,
        };
        if let Some(deps) = self.after_dependents.remove(&transfer) {
            for dep in deps {
                let ready = at.max(engine.now());
                self.begin_transfer(engine, dep, ready);
            }
        }
        Some(notice)
    }

    /// Connections whose current active NIC pair or assignment touches the
    /// fault target.
    pub fn conns_affected(&self, target: FaultTarget) -> Vec<ConnId> {
        match target {
            FaultTarget::Transport(c) => vec![c],
            FaultTarget::Nic(n) => self
                .conns
                .iter()
                .filter(|c| {
                    c.assign_src.iter().any(|&(a, _)| a == n)
                        || c.assign_dst.iter().any(|&(a, _)| a == n)
                })
                .map(|c| c.id)
                .collect(),
            FaultTarget::Link(a, b) => self
                .conns
                .iter()
                .filter(|c| {
                    (c.assign_src.iter().any(|&(x, _)| x == a)
                        && c.assign_dst.iter().any(|&(x, _)| x == b))
                        || (c.assign_src.iter().any(|&(x, _)| x == b)
                            && c.assign_dst.iter().any(|&(x, _)| x == a))
                })
                .map(|c| c.id)
                .collect(),
        }
    }

    /// Mark a connection broken at `time`: chunks in service on dead lanes
    /// abort with partial receive state, new chunks hold until migration.
    pub fn break_conn(&mut self, conn: ConnId, time: f64, target: FaultTarget) {
        let c = &mut self.conns[conn.0 as usize];
        c.pending_failure = true;
        if let FaultTarget::Transport(_) = target {
            if let Some(n) = c.active_src {
                c.blacklist_src.insert(n);
            }
            if let Some(n) = c.active_dst {
                c.blacklist_dst.insert(n);
            }
        }
        let dead = |nic: Option<NicId>| match (nic, target) {
            (Some(n), FaultTarget::Nic(f)) => n == f,
            (Some(n), FaultTarget::Link(a, b)) => n == a || n == b,
            (_, FaultTarget::Transport(_)) => true,
            _ => false,
        };
        for &tid in &self.conns[conn.0 as usize].transfers.clone() {
            let t = &mut self.transfers[tid.0 as usize];
            if t.completed_at.is_some() {
                continue;
            }
            for k in 0..t.ledger.num_chunks() {
                if t.ledger.send[k as usize] == ChunkSendState::Completed {
                    continue;
                }
                let Some(f) = &mut t.flights[k as usize] else {
                    continue;
                };
                if f.aborted || f.end <= time {
                    continue;
                }
                if dead(f.src_nic) || dead(f.dst_nic) || matches!(target, FaultTarget::Transport(_))
                {
                    f.aborted = true;
                    let moved = if time > f.start && f.end > f.start {
                        (((time - f.start) * f.rate) as u64).min(t.ledger.chunk_bytes(k))
                    } else {
                        0
                    };
                    t.ledger.recv[k as usize] = ChunkRecvState::Partial(moved);
                }
            }
        }
    }

    /// Rewind both endpoints of a broken connection to a consistent point:
    /// the sender to its first unpolled chunk, the receiver to its last
    /// confirmed chunk. In-flight chunks reset to not-sent, partial receives
    /// are dropped. Returns `(sender_resume, receiver_floor)` for the oldest
    /// incomplete transfer.
    pub fn rollback(&mut self, conn: ConnId) -> Result<(u32, i64), TransportError> {
        let c = &mut self.conns[conn.0 as usize];
        if !c.pending_failure {
            return Err(TransportError::NoFailurePending);
        }
        c.epoch += 1;
        let mut result: Option<(u32, i64)> = None;
        for &tid in &self.conns[conn.0 as usize].transfers.clone() {
            let t = &mut self.transfers[tid.0 as usize];
            if t.completed_at.is_some() {
                continue;
            }
            for k in 0..t.ledger.num_chunks() as usize {
                if t.ledger.send[k] == ChunkSendState::InFlight {
                    t.ledger.send[k] = ChunkSendState::NotSent;
                    t.flights[k] = None;
                }
                if let ChunkRecvState::Partial(_) = t.ledger.recv[k] {
                    t.ledger.recv[k] = ChunkRecvState::NotReceived;
                }
            }
            if result.is_none() {
                result = Some((t.ledger.sender_resume(), t.ledger.receiver_floor()));
            }
        }
        // with everything already completed there is nothing to resend
        Ok(result.unwrap_or_else(|| {
            self.conns[conn.0 as usize]
                .transfers
                .last()
                .map(|&tid| {
                    let l = &self.transfers[tid.0 as usize].ledger;
                    (l.num_chunks(), l.num_chunks() as i64 - 1)
                })
                .unwrap_or((0, -1))
        }))
    }

    /// Move the connection to backup NICs and requeue everything from the
    /// rollback point. The chain is walked in PCIe-distance order; only
    /// pre-registered NICs qualify under multi-registration, while the
    /// ablation mode may register on demand at a cost.
    pub fn migrate(
        &mut self,
        engine: &mut Engine,
        conn: ConnId,
        health: &HealthMap,
    ) -> Result<MigrationOutcome, TransportError> {
        let multi = self.knobs.multi_registration;
        let c = &mut self.conns[conn.0 as usize];
        if !c.pending_failure {
            return Err(TransportError::NoFailurePending);
        }
        let mut penalty = false;

        if c.cross_server {
            let pick = |chain: &[NicId],
                        registered: &BTreeSet<NicId>,
                        blacklist: &BTreeSet<NicId>|
             -> Option<NicId> {
                chain.iter().copied().find(|n| {
                    health.nic_healthy(*n)
                        && !blacklist.contains(n)
                        && (!multi || registered.contains(n))
                })
            };
            let src = pick(&c.chain_src, &c.registered_src, &c.blacklist_src)
                .ok_or(TransportError::NoBackup)?;
            let dst = pick(&c.chain_dst, &c.registered_dst, &c.blacklist_dst)
                .ok_or(TransportError::NoBackup)?;
            if !c.registered_src.contains(&src) {
                c.registered_src.insert(src);
                penalty = true;
            }
            if !c.registered_dst.contains(&dst) {
                c.registered_dst.insert(dst);
                penalty = true;
            }
            c.active_src = Some(src);
            c.active_dst = Some(dst);
            c.assign_src = vec![(src, 1.0)];
            c.assign_dst = vec![(dst, 1.0)];
        }
        c.pending_failure = false;
        let delay = if penalty {
            self.knobs.registration_cost
        } else {
            0.0
        };
        let out = MigrationOutcome {
            src_nic: self.conns[conn.0 as usize].active_src,
            dst_nic: self.conns[conn.0 as usize].active_dst,
            registration_penalty_applied: penalty,
        };
        self.resume_conn(engine, conn, engine.now() + delay);
        Ok(out)
    }

    /// Spread the connection's future chunks over a weighted NIC set instead
    /// of a single backup (the load-balancing repair).
    pub fn reassign(
        &mut self,
        engine: &mut Engine,
        conn: ConnId,
        src_assign: Option<Vec<(NicId, f64)>>,
        dst_assign: Option<Vec<(NicId, f64)>>,
    ) -> Result<(), TransportError> {
        {
            let c = &mut self.conns[conn.0 as usize];
            if let Some(a) = src_assign {
                assert!(!a.is_empty());
                c.active_src = Some(a[0].0);
                c.assign_src = a;
            }
            if let Some(a) = dst_assign {
                assert!(!a.is_empty());
                c.active_dst = Some(a[0].0);
                c.assign_dst = a;
            }
            c.pending_failure = false;
        }
        self.resume_conn(engine, conn, engine.now());
        Ok(())
    }

    /// Requeue all rolled-back chunks whose dependencies are satisfied.
    fn resume_conn(&mut self, engine: &mut Engine, conn: ConnId, ready: f64) {
        let tids = self.conns[conn.0 as usize].transfers.clone();
        for tid in tids {
            if self.transfers[tid.0 as usize].completed_at.is_some() {
                continue;
            }
            let dep = self.transfers[tid.0 as usize].dep;
            let n = self.transfers[tid.0 as usize].ledger.num_chunks();
            for k in 0..n {
                if self.transfers[tid.0 as usize].ledger.send_state(k) != ChunkSendState::NotSent
                    || self.transfers[tid.0 as usize].flights[k as usize].is_some()
                {
                    continue;
                }
                let gate = match dep {
                    Dep::None => Some(ready),
                    Dep::After(p) => self.transfers[p.0 as usize]
                        .completed_at
                        .map(|t| t.max(ready)),
                    Dep::Chunkwise(p) => self.transfers[p.0 as usize]
                        .confirm_time(k)
                        .map(|t| t.max(ready)),
                };
                if let Some(at) = gate {
                    self.mark_ready(engine, tid, k, at);
                }
            }
        }
    }

    /// Every transfer confirmed bit-exact on its receiver.
    pub fn all_transfers_intact(&self) -> bool {
        self.transfers
            .iter()
            .all(|t| t.completed_at.is_some() && t.ledger.assembled_matches())
    }
}
