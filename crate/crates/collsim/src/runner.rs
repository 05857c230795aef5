//! Experiment runner: wires topology, transport, fault handling and planning
//! together, executes a scenario's workload against its fault schedule, and
//! reports per-collective makespans, traffic and integrity against a
//! fault-free baseline.
//!
//! Two fidelities. The chunk fidelity drives every byte through the
//! discrete-event transport (ledgers, rollback, migration); it is exact but
//! costs events proportional to chunks. The flow fidelity prices collectives
//! with the analytic bandwidth model instead, which is what large Monte-Carlo
//! sweeps use. `auto` picks chunk up to 32 ranks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::allreduce_opt::{
    execute_recursive, execute_two_stage, optimal_partition, plan_two_stage, recursive_plan,
    select_strategy_with_rule, PartitionInputs, PartitionPlan, PlanStrategy, StrategyChoice,
    ThresholdRule,
};
use crate::balance::{healthy_assignment, route_flow, Headroom};
use crate::collectives::{
    execute, oracle, ring_schedule, CollectiveKind, CollectiveRequest, CommContext, EventHooks,
    ExecError, ExecOptions, Schedule,
};
use crate::cost_model::CostParams;
use crate::engine::{Engine, Event, EventKind};
use crate::faults::{
    notify_oob, probe, triangulate, AuxProbes, Diagnosis, ExponentialBackoff, FaultKnobs,
    FaultTarget, ProbeSet, ProbeStatus, ReprobeStrategy, Verdict,
};
use crate::health::HealthMap;
use crate::ids::{ConnId, ProbeId, Side};
use crate::rerank::{rerank, LogicalRing};
use crate::scenario::{Fidelity, Knobs, Scenario, ScenarioFault, ScenarioTarget, StrategySpec};
use crate::topology::{ClusterTopology, GpuId, NicId, ServerId};
use crate::transport::{TransportError, TransportKnobs, TransportSim};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario has no monte_carlo section; nothing to sweep")]
    NoMonteCarlo,
    #[error("execution error: {0}")]
    Exec(#[from] ExecError),
    #[error("engine error: {0}")]
    Engine(#[from] crate::engine::EngineError),
}

#[derive(Debug, Clone, Serialize)]
pub struct MigrationNote {
    pub conn: u32,
    pub src_nic: Option<usize>,
    pub dst_nic: Option<usize>,
    pub registration_penalty: bool,
    pub rollback_resume: u32,
    pub receiver_floor: i64,
    /// Intra-server route of the detoured flow to its backup NIC.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detour_path: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionRecord {
    pub fault_index: usize,
    pub fault_time: f64,
    pub target: String,
    pub detector_aware: f64,
    pub peer_aware: Option<f64>,
    pub verdict: Option<String>,
    pub secondary_verdict: Option<String>,
    pub verdict_time: Option<f64>,
    pub migrations: Vec<MigrationNote>,
    pub no_backup: bool,
    pub recovery_detected_at: Option<f64>,
}

/// How broken connections come back: a single backup NIC, or spread over all
/// healthy NICs in proportion to bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairMode {
    HotRepair,
    Balance,
}

#[derive(Debug)]
struct PendingProbe {
    fault: usize,
    status: ProbeStatus,
    role: ProbeRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProbeRole {
    AToB,
    BToA,
    AuxA,
    AuxB,
}

#[derive(Debug)]
struct ActiveFault {
    pair: (NicId, NicId),
    aux: Option<NicId>,
    a_to_b: Option<ProbeStatus>,
    b_to_a: Option<ProbeStatus>,
    aux_a: Option<ProbeStatus>,
    aux_b: Option<ProbeStatus>,
    affected: Vec<ConnId>,
    target: FaultTarget,
    record: usize,
    verdict_done: bool,
    recovered: bool,
    recovery_seen: bool,
}

/// Orchestrates detection, localization and repair for injected faults while
/// an execution pumps the engine.
pub struct FaultDriver {
    topo: Arc<ClusterTopology>,
    pub health: HealthMap,
    pub knobs: FaultKnobs,
    pub faults: Vec<ScenarioFault>,
    pub repair: RepairMode,
    states: BTreeMap<usize, ActiveFault>,
    probes: BTreeMap<ProbeId, PendingProbe>,
    next_probe: u32,
    pub records: Vec<DetectionRecord>,
    pub stuck_conns: BTreeSet<ConnId>,
}

impl FaultDriver {
    pub fn new(
        topo: Arc<ClusterTopology>,
        knobs: FaultKnobs,
        faults: Vec<ScenarioFault>,
        repair: RepairMode,
    ) -> Self {
        FaultDriver {
            topo,
            health: HealthMap::new(),
            knobs,
            faults,
            repair,
            states: BTreeMap::new(),
            probes: BTreeMap::new(),
            next_probe: 0,
            records: Vec::new(),
            stuck_conns: BTreeSet::new(),
        }
    }

    /// Schedule every fault injection (and nothing else) into the engine.
    pub fn arm(&self, engine: &mut Engine) {
        for (i, f) in self.faults.iter().enumerate() {
            engine
                .schedule(f.time, EventKind::FaultInject { fault: i })
                .expect("fault times are validated non-negative");
        }
    }

    fn resolve_target(&self, sf: &ScenarioFault, transport: &TransportSim) -> Option<FaultTarget> {
        match sf.target {
            ScenarioTarget::Nic(n) => Some(FaultTarget::Nic(n)),
            ScenarioTarget::Link(a, b) => Some(FaultTarget::Link(a, b)),
            ScenarioTarget::Transport { src, dst, channel } => transport
                .connections()
                .iter()
                .find(|c| c.src_gpu == src && c.dst_gpu == dst && c.channel == channel)
                .map(|c| FaultTarget::Transport(c.id)),
        }
    }

    /// The peer NIC probed against the fault site, and the auxiliary NIC on a
    /// third server when the cluster has one.
    fn probe_pair(&self, target: FaultTarget, transport: &TransportSim) -> (NicId, NicId) {
        match target {
            FaultTarget::Link(a, b) => (a, b),
            FaultTarget::Nic(n) => {
                let server = self.topo.nic(n).server;
                let peer_server = ServerId((server.0 + 1) % self.topo.servers());
                let peers = self.topo.nics_on(peer_server).unwrap();
                let rail = self.topo.nic(n).rail;
                let peer = peers
                    .iter()
                    .copied()
                    .find(|&p| self.topo.nic(p).rail == rail)
                    .unwrap_or(peers[0]);
                (n, peer)
            }
            FaultTarget::Transport(c) => {
                let conn = transport.conn(c);
                (
                    conn.active_src.unwrap_or(NicId(0)),
                    conn.active_dst.unwrap_or(NicId(0)),
                )
            }
        }
    }

    fn pick_aux(&self, a: NicId, b: NicId) -> Option<NicId> {
        let (sa, sb) = (self.topo.nic(a).server, self.topo.nic(b).server);
        (0..self.topo.servers())
            .map(ServerId)
            .filter(|&s| s != sa && s != sb)
            .flat_map(|s| self.topo.nics_on(s).unwrap().iter().copied())
            .find(|&n| self.health.nic_healthy(n))
    }

    fn schedule_probe(
        &mut self,
        engine: &mut Engine,
        fault: usize,
        prober: NicId,
        target: NicId,
        role: ProbeRole,
    ) {
        let status = probe(prober, target, &self.health);
        let delay = match status {
            ProbeStatus::Timeout => self.knobs.probe_timeout,
            _ => self.knobs.probe_rtt,
        };
        let id = ProbeId(self.next_probe);
        self.next_probe += 1;
        self.probes.insert(
            id,
            PendingProbe {
                fault,
                status,
                role,
            },
        );
        engine
            .schedule(engine.now() + delay, EventKind::ProbeResult { probe: id })
            .expect("probe delivery in the future");
    }

    fn on_fault_inject(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        fault: usize,
    ) -> Result<(), TransportError> {
        let sf = self.faults[fault];
        let Some(target) = self.resolve_target(&sf, transport) else {
            self.records.push(DetectionRecord {
                fault_index: fault,
                fault_time: engine.now(),
                target: format!("{:?} (no matching live connection)", sf.target),
                detector_aware: engine.now(),
                peer_aware: None,
                verdict: None,
                secondary_verdict: None,
                verdict_time: None,
                migrations: Vec::new(),
                no_backup: false,
                recovery_detected_at: None,
            });
            return Ok(());
        };
        match target {
            FaultTarget::Nic(n) => self.health.fail_nic(n),
            FaultTarget::Link(a, b) => self.health.fail_link(a, b),
            FaultTarget::Transport(_) => {}
        }
        if let Some(r) = sf.recovery_time {
            engine
                .schedule(r, EventKind::Recovery { fault })
                .expect("recovery validated after fault");
        }

        let affected = transport.conns_affected(target);
        for &c in &affected {
            transport.break_conn(c, engine.now(), target);
        }

        let (a, b) = self.probe_pair(target, transport);
        let aux = self.pick_aux(a, b);
        self.records.push(DetectionRecord {
            fault_index: fault,
            fault_time: engine.now(),
            target: format!("{target:?}"),
            detector_aware: engine.now(),
            peer_aware: None,
            verdict: None,
            secondary_verdict: None,
            verdict_time: None,
            migrations: Vec::new(),
            no_backup: false,
            recovery_detected_at: None,
        });
        let record = self.records.len() - 1;
        self.states.insert(
            fault,
            ActiveFault {
                pair: (a, b),
                aux,
                a_to_b: None,
                b_to_a: None,
                aux_a: None,
                aux_b: None,
                affected: affected.clone(),
                target,
                record,
                verdict_done: false,
                recovered: false,
                recovery_seen: false,
            },
        );

        // the detecting side probes immediately; the peer (and auxiliary)
        // join once the out-of-band notification lands
        self.schedule_probe(engine, fault, a, b, ProbeRole::AToB);
        let conn0 = affected.first().copied().unwrap_or(ConnId(0));
        notify_oob(engine, &self.knobs, fault, conn0, Side::Dst)
            .map_err(|e| TransportError::Engine(e.to_string()))?;
        Ok(())
    }

    fn on_peer_aware(&mut self, engine: &mut Engine, fault: usize) {
        let Some(st) = self.states.get(&fault) else {
            return;
        };
        if st.verdict_done {
            return;
        }
        let (a, b) = st.pair;
        let aux = st.aux;
        self.records[st.record].peer_aware = Some(engine.now());
        self.schedule_probe(engine, fault, b, a, ProbeRole::BToA);
        if let Some(x) = aux {
            self.schedule_probe(engine, fault, x, a, ProbeRole::AuxA);
            self.schedule_probe(engine, fault, x, b, ProbeRole::AuxB);
        }
    }

    fn on_probe_result(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        id: ProbeId,
    ) -> Result<(), TransportError> {
        let Some(p) = self.probes.remove(&id) else {
            return Ok(());
        };
        let Some(st) = self.states.get_mut(&p.fault) else {
            return Ok(());
        };
        match p.role {
            ProbeRole::AToB => st.a_to_b = Some(p.status),
            ProbeRole::BToA => st.b_to_a = Some(p.status),
            ProbeRole::AuxA => st.aux_a = Some(p.status),
            ProbeRole::AuxB => st.aux_b = Some(p.status),
        }
        let complete = st.a_to_b.is_some()
            && st.b_to_a.is_some()
            && (st.aux.is_none() || (st.aux_a.is_some() && st.aux_b.is_some()));
        if !complete || st.verdict_done {
            return Ok(());
        }
        st.verdict_done = true;

        let set = ProbeSet {
            a: st.pair.0,
            b: st.pair.1,
            a_to_b: st.a_to_b.unwrap(),
            b_to_a: st.b_to_a.unwrap(),
            aux: st.aux.map(|aux_nic| AuxProbes {
                aux_nic,
                to_a: st.aux_a.unwrap(),
                to_b: st.aux_b.unwrap(),
            }),
        };
        let diagnosis: Diagnosis = triangulate(&set);
        let record = st.record;
        let affected = st.affected.clone();
        self.records[record].verdict = Some(format!("{:?}", diagnosis.primary));
        self.records[record].secondary_verdict = diagnosis.secondary.map(|v| format!("{v:?}"));
        self.records[record].verdict_time = Some(engine.now());

        // a no-fault round (both sides succeeded) needs no repair unless the
        // break was transport-level, where migration is the only way forward
        let is_transport = matches!(st.target, FaultTarget::Transport(_));
        if diagnosis.primary == Verdict::Inconclusive
            && !is_transport
            && set.a_to_b == ProbeStatus::Success
            && set.b_to_a == ProbeStatus::Success
        {
            return Ok(());
        }

        self.repair_conns(engine, transport, &affected, record)?;

        // periodic reprobe until the component recovers
        let next = engine.now() + self.knobs.reprobe.base;
        engine
            .schedule(
                next,
                EventKind::Reprobe {
                    fault: p.fault,
                    attempt: 0,
                },
            )
            .map_err(|e| TransportError::Engine(e.to_string()))?;
        Ok(())
    }

    fn repair_conns(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        conns: &[ConnId],
        record: usize,
    ) -> Result<(), TransportError> {
        // under the shared-pool repair, sibling connections on the degraded
        // servers re-spread too, so survivors and displaced flows stay
        // symmetric
        if self.repair == RepairMode::Balance {
            let degraded: BTreeSet<ServerId> = conns
                .iter()
                .flat_map(|&c| {
                    let conn = transport.conn(c);
                    [conn.src_server, conn.dst_server]
                })
                .filter(|&s| {
                    self.topo
                        .nics_on(s)
                        .map(|nics| nics.iter().any(|&n| !self.health.nic_healthy(n)))
                        .unwrap_or(false)
                })
                .collect();
            let sibs: Vec<ConnId> = transport
                .connections()
                .iter()
                .filter(|cc| {
                    cc.cross_server
                        && !cc.pending_failure
                        && !conns.contains(&cc.id)
                        && (degraded.contains(&cc.src_server) || degraded.contains(&cc.dst_server))
                })
                .map(|cc| cc.id)
                .collect();
            for sib in sibs {
                let conn = transport.conn(sib);
                let want_src = desired_assignment(
                    &self.topo,
                    &self.health,
                    &conn.chain_src,
                    &conn.blacklist_src,
                    conn.src_server,
                    RepairMode::Balance,
                );
                let want_dst = desired_assignment(
                    &self.topo,
                    &self.health,
                    &conn.chain_dst,
                    &conn.blacklist_dst,
                    conn.dst_server,
                    RepairMode::Balance,
                );
                if want_src.is_empty() || want_dst.is_empty() {
                    continue;
                }
                let src =
                    (!assignments_equal(&want_src, conn.src_assignment())).then_some(want_src);
                let dst =
                    (!assignments_equal(&want_dst, conn.dst_assignment())).then_some(want_dst);
                if src.is_some() || dst.is_some() {
                    transport.reassign(engine, sib, src, dst)?;
                }
            }
        }
        for &c in conns {
            if !transport.conn(c).pending_failure {
                continue;
            }
            let (resume, floor) = transport.rollback(c)?;
            match self.repair {
                RepairMode::HotRepair => match transport.migrate(engine, c, &self.health) {
                    Ok(m) => {
                        let detour = m.src_nic.map(|backup| {
                            let conn = transport.conn(c);
                            let mut hr = Headroom::fresh(&self.topo);
                            let demand = self.topo.nic(backup).bandwidth;
                            let bytes = conn
                                .transfers()
                                .last()
                                .map(|&t| transport.transfer(t).bytes)
                                .unwrap_or(0);
                            let path = route_flow(
                                &self.topo,
                                &mut hr,
                                conn.src_gpu,
                                backup,
                                bytes,
                                demand,
                                &CostParams::bandwidth_only(demand),
                            );
                            format!("{:?}", path.kind)
                        });
                        self.records[record].migrations.push(MigrationNote {
                            conn: c.0,
                            src_nic: m.src_nic.map(|n| n.0),
                            dst_nic: m.dst_nic.map(|n| n.0),
                            registration_penalty: m.registration_penalty_applied,
                            rollback_resume: resume,
                            receiver_floor: floor,
                            detour_path: detour,
                        })
                    }
                    Err(TransportError::NoBackup) => {
                        self.records[record].no_backup = true;
                        self.stuck_conns.insert(c);
                    }
                    Err(e) => return Err(e),
                },
                RepairMode::Balance => {
                    let conn = transport.conn(c);
                    let src_bad = conn.side_impaired(Side::Src, &self.health);
                    let dst_bad = conn.side_impaired(Side::Dst, &self.health);
                    let src_assign = src_bad.then(|| {
                        desired_assignment(
                            &self.topo,
                            &self.health,
                            &conn.chain_src,
                            &conn.blacklist_src,
                            conn.src_server,
                            RepairMode::Balance,
                        )
                    });
                    let dst_assign = dst_bad.then(|| {
                        desired_assignment(
                            &self.topo,
                            &self.health,
                            &conn.chain_dst,
                            &conn.blacklist_dst,
                            conn.dst_server,
                            RepairMode::Balance,
                        )
                    });
                    if src_assign.as_ref().is_some_and(|a| a.is_empty())
                        || dst_assign.as_ref().is_some_and(|a| a.is_empty())
                    {
                        self.records[record].no_backup = true;
                        self.stuck_conns.insert(c);
                        continue;
                    }
                    let head = |a: &Option<Vec<(NicId, f64)>>| {
                        a.as_ref().and_then(|v| v.first()).map(|(n, _)| n.0)
                    };
                    // route the first detoured share for the report
                    let detour = head(&src_assign).map(|backup| {
                        let conn = transport.conn(c);
                        let mut hr = Headroom::fresh(&self.topo);
                        let nic = NicId(backup);
                        let demand = self.topo.nic(nic).bandwidth
                            / src_assign.as_ref().map(|v| v.len()).unwrap_or(1).max(1) as f64;
                        let bytes = conn
                            .transfers()
                            .last()
                            .map(|&t| transport.transfer(t).bytes)
                            .unwrap_or(0);
                        let path = route_flow(
                            &self.topo,
                            &mut hr,
                            conn.src_gpu,
                            nic,
                            bytes,
                            demand,
                            &CostParams::bandwidth_only(self.topo.nic(nic).bandwidth),
                        );
                        format!("{:?}", path.kind)
                    });
                    self.records[record].migrations.push(MigrationNote {
                        conn: c.0,
                        src_nic: head(&src_assign),
                        dst_nic: head(&dst_assign),
                        registration_penalty: false,
                        rollback_resume: resume,
                        receiver_floor: floor,
                        detour_path: detour,
                    });
                    transport.reassign(engine, c, src_assign, dst_assign)?;
                }
            }
        }
        Ok(())
    }

    fn on_recovery(&mut self, fault: usize) {
        let sf = self.faults[fault];
        match sf.target {
            ScenarioTarget::Nic(n) => self.health.recover_nic(n),
            ScenarioTarget::Link(a, b) => self.health.recover_link(a, b),
            ScenarioTarget::Transport { .. } => {}
        }
        if let Some(st) = self.states.get_mut(&fault) {
            st.recovered = true;
        }
    }

    fn target_healthy(&self, fault: usize) -> bool {
        match self.faults[fault].target {
            ScenarioTarget::Nic(n) => self.health.nic_healthy(n),
            ScenarioTarget::Link(a, b) => self.health.link_up(a, b),
            ScenarioTarget::Transport { .. } => true,
        }
    }

    fn on_reprobe(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        fault: usize,
        attempt: u32,
    ) -> Result<(), TransportError> {
        let healthy = self.target_healthy(fault);
        let Some(st) = self.states.get_mut(&fault) else {
            return Ok(());
        };
        if healthy && st.recovered {
            if !st.recovery_seen {
                st.recovery_seen = true;
                let record = st.record;
                self.records[record].recovery_detected_at = Some(engine.now());
                // connections stranded without a backup can come back now
                let stuck: Vec<ConnId> = self.stuck_conns.iter().copied().collect();
                for c in stuck {
                    if transport.conn(c).pending_failure {
                        if transport.migrate(engine, c, &self.health).is_ok() {
                            self.stuck_conns.remove(&c);
                        }
                    } else {
                        self.stuck_conns.remove(&c);
                    }
                }
            }
            return Ok(());
        }
        if self.faults[fault].permanent && attempt >= 24 {
            // capped-interval probing would go on forever; stop tracking once
            // the backoff has long saturated
            return Ok(());
        }
        let next = engine.now() + self.knobs.reprobe.interval(attempt + 1);
        engine
            .schedule(
                next,
                EventKind::Reprobe {
                    fault,
                    attempt: attempt + 1,
                },
            )
            .map_err(|e| TransportError::Engine(e.to_string()))?;
        Ok(())
    }
}

impl EventHooks for FaultDriver {
    fn handle(
        &mut self,
        engine: &mut Engine,
        transport: &mut TransportSim,
        ev: &Event,
    ) -> Result<(), TransportError> {
        match ev.kind {
            EventKind::FaultInject { fault } => self.on_fault_inject(engine, transport, fault),
            EventKind::OobNotify { fault, .. } | EventKind::Timeout { fault, .. } => {
                self.on_peer_aware(engine, fault);
                Ok(())
            }
            EventKind::ProbeResult { probe } => self.on_probe_result(engine, transport, probe),
            EventKind::Recovery { fault } => {
                self.on_recovery(fault);
                Ok(())
            }
            EventKind::Reprobe { fault, attempt } => {
                self.on_reprobe(engine, transport, fault, attempt)
            }
            EventKind::ChunkComplete { .. } | EventKind::ChunkReady { .. } => Ok(()),
        }
    }
}

/// Per-collective outcome of one run (before baseline comparison).
#[derive(Debug, Clone, Serialize)]
pub struct RawCollective {
    pub kind: CollectiveKind,
    pub bytes: u64,
    pub issue_at: f64,
    pub start: f64,
    pub completion: f64,
    pub makespan: f64,
    pub strategy: String,
    pub plan: Option<PartitionPlan>,
    pub recursive_levels: Option<usize>,
    pub integrity: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct RawRun {
    pub collectives: Vec<RawCollective>,
    pub detections: Vec<DetectionRecord>,
    pub nic_traffic: Vec<(usize, usize, u64, u64)>,
    pub end_time: f64,
}

pub fn effective_fidelity(scenario: &Scenario) -> Fidelity {
    match scenario.knobs.fidelity {
        Fidelity::Auto => {
            if scenario.topology.num_gpus() <= 32 {
                Fidelity::Chunk
            } else {
                Fidelity::Flow
            }
        }
        f => f,
    }
}

fn repair_mode(strategy: StrategySpec) -> RepairMode {
    match strategy {
        StrategySpec::HotRepairOnly => RepairMode::HotRepair,
        _ => RepairMode::Balance,
    }
}

fn threshold_rule(knobs: &Knobs) -> ThresholdRule {
    if knobs.practical_threshold {
        ThresholdRule::PracticalOneThird
    } else {
        ThresholdRule::Exact
    }
}

/// Deterministic verification values: rank r, element i.
fn input_value(collective: usize, rank: usize, i: usize) -> f64 {
    ((collective * 7919 + rank * 131 + i * 3) % 1000) as f64
}

fn default_elems(kind: CollectiveKind, k: usize, channels: usize) -> usize {
    let base = k * channels * 2;
    match kind {
        CollectiveKind::AllGather => base,
        _ => base,
    }
}

fn make_inputs(collective: usize, kind: CollectiveKind, k: usize, elems: usize) -> Vec<Vec<f64>> {
    let per_rank = match kind {
        CollectiveKind::AllGather => elems / k,
        _ => elems,
    };
    (0..k)
        .map(|r| {
            (0..per_rank)
                .map(|i| input_value(collective, r, i))
                .collect()
        })
        .collect()
}

/// GPU-level ring order: servers in re-ranked logical order when rails are
/// asymmetric, participants grouped by server.
fn ring_order_for(
    topo: &ClusterTopology,
    health: &HealthMap,
    participants: &[GpuId],
) -> Option<Vec<GpuId>> {
    health.down_nics().next()?;
    let ring = LogicalRing::from_topology(topo, health);
    let (fixed, _) = rerank(&ring);
    let mut by_server: BTreeMap<ServerId, Vec<GpuId>> = BTreeMap::new();
    for &g in participants {
        by_server
            .entry(topo.server_of_gpu(g).unwrap())
            .or_default()
            .push(g);
    }
    let mut order = Vec::with_capacity(participants.len());
    for s in &fixed.order {
        if let Some(gs) = by_server.get(s) {
            order.extend_from_slice(gs);
        }
    }
    (order.len() == participants.len()).then_some(order)
}

/// Canonical assignment for one side of a connection under current health.
/// A fully healthy server keeps per-rail lanes. Under the balance repair a
/// degraded server treats its NICs as a shared pool: every connection on it
/// spreads over the healthy set, so redistributed and resident traffic share
/// lanes symmetrically. A bare hot repair instead walks the chain to one
/// backup NIC, concentrating the displaced load there.
fn desired_assignment(
    topo: &ClusterTopology,
    health: &HealthMap,
    chain: &[NicId],
    blacklist: &BTreeSet<NicId>,
    server: ServerId,
    mode: RepairMode,
) -> Vec<(NicId, f64)> {
    if chain.is_empty() {
        return Vec::new();
    }
    let usable = |n: NicId| health.nic_healthy(n) && !blacklist.contains(&n);
    let primary = chain[0];
    let server_degraded = topo
        .nics_on(server)
        .map(|nics| nics.iter().any(|&n| !health.nic_healthy(n)))
        .unwrap_or(false);
    match mode {
        RepairMode::Balance if server_degraded || !usable(primary) => {
            healthy_assignment(topo, server, usable)
        }
        _ if usable(primary) => vec![(primary, 1.0)],
        RepairMode::HotRepair => chain
            .iter()
            .copied()
            .find(|&n| usable(n))
            .map(|n| vec![(n, 1.0)])
            .unwrap_or_default(),
        RepairMode::Balance => healthy_assignment(topo, server, usable),
    }
}

fn assignments_equal(a: &[(NicId, f64)], b: &[(NicId, f64)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && x.1 == y.1)
}

/// Re-derive NIC assignments of a schedule's connections from current health
/// before staging a new collective: displaced connections spread out (or walk
/// their chain), recovered primaries take their lane back.
fn refresh_assignments(
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &CommContext,
    sched: &Schedule,
    channels: usize,
    driver: &FaultDriver,
) -> Result<(), TransportError> {
    let k = sched.len();
    for p in 0..k {
        let (a, b) = (sched.ring_order[p], sched.ring_order[(p + 1) % k]);
        for c in 0..channels {
            let Some(conn_id) = comm.edge(a, b, c) else {
                continue;
            };
            let conn = transport.conn(conn_id);
            if !conn.cross_server || conn.pending_failure {
                continue;
            }
            let want_src = desired_assignment(
                &driver.topo,
                &driver.health,
                &conn.chain_src,
                &conn.blacklist_src,
                conn.src_server,
                driver.repair,
            );
            let want_dst = desired_assignment(
                &driver.topo,
                &driver.health,
                &conn.chain_dst,
                &conn.blacklist_dst,
                conn.dst_server,
                driver.repair,
            );
            if want_src.is_empty() || want_dst.is_empty() {
                return Err(TransportError::NoBackup);
            }
            let src = (!assignments_equal(&want_src, conn.src_assignment())).then_some(want_src);
            let dst = (!assignments_equal(&want_dst, conn.dst_assignment())).then_some(want_dst);
            if src.is_some() || dst.is_some() {
                transport.reassign(engine, conn_id, src, dst)?;
            }
        }
    }
    Ok(())
}

/// One full chunk-fidelity pass over the workload.
pub fn run_chunk(scenario: &Scenario, with_faults: bool) -> Result<RawRun, RunError> {
    let topo = Arc::new(scenario.topology.clone());
    let knobs = &scenario.knobs;
    let mut engine = Engine::new();
    let mut transport = TransportSim::new(
        Arc::clone(&topo),
        TransportKnobs {
            chunk_size: knobs.chunk_size,
            alpha: scenario.cost.alpha,
            multi_registration: !knobs.registration_ablation,
            registration_cost: knobs.registration_cost,
        },
    );
    let fknobs = FaultKnobs {
        oob_enabled: knobs.oob_enabled,
        oob_latency: knobs.oob_latency,
        probe_rtt: knobs.probe_rtt,
        probe_timeout: knobs.probe_timeout,
        poll_timeout: knobs.poll_timeout,
        reprobe: ExponentialBackoff {
            base: knobs.reprobe_base,
            max: knobs.reprobe_max,
        },
    };
    let faults = if with_faults {
        scenario.faults.clone()
    } else {
        Vec::new()
    };
    let mut driver = FaultDriver::new(
        Arc::clone(&topo),
        fknobs,
        faults,
        repair_mode(scenario.strategy),
    );
    driver.arm(&mut engine);
    let mut comm = CommContext::new();

    // process the workload in issue order (stable)
    let mut order: Vec<usize> = (0..scenario.workload.len()).collect();
    order.sort_by(|&a, &b| {
        scenario.issue_at[a]
            .total_cmp(&scenario.issue_at[b])
            .then(a.cmp(&b))
    });

    let mut collectives = Vec::with_capacity(order.len());
    for &ci in &order {
        let req = &scenario.workload[ci];
        let issue = scenario.issue_at[ci];
        // drain events up to the issue time
        if issue > engine.now() {
            drain_until(&mut engine, &mut transport, &mut driver, issue);
        }
        let start = engine.now().max(issue);
        let outcome = run_one_collective(
            scenario,
            ci,
            req,
            start,
            &mut engine,
            &mut transport,
            &mut comm,
            &mut driver,
        );
        collectives.push(outcome);
    }

    // let outstanding detection work settle, bounded by the fault horizon
    let horizon = scenario
        .faults
        .iter()
        .flat_map(|f| [f.time + 60.0, f.recovery_time.unwrap_or(0.0) + 60.0])
        .fold(engine.now(), f64::max);
    drain_until(&mut engine, &mut transport, &mut driver, horizon);

    let nic_traffic = transport
        .nic_traffic()
        .map(|(n, tx, rx)| (n.0, topo.nic(n).server.0, tx, rx))
        .collect();
    Ok(RawRun {
        collectives,
        detections: std::mem::take(&mut driver.records),
        nic_traffic,
        end_time: engine.now(),
    })
}

fn drain_until(
    engine: &mut Engine,
    transport: &mut TransportSim,
    driver: &mut FaultDriver,
    t: f64,
) {
    engine.run_until(t, |eng, ev| match ev.kind {
        EventKind::ChunkComplete { .. } | EventKind::ChunkReady { .. } => {
            transport.on_chunk_complete(eng, ev);
        }
        _ => {
            let _ = driver.handle(eng, transport, ev);
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn run_one_collective(
    scenario: &Scenario,
    ci: usize,
    req: &CollectiveRequest,
    start: f64,
    engine: &mut Engine,
    transport: &mut TransportSim,
    comm: &mut CommContext,
    driver: &mut FaultDriver,
) -> RawCollective {
    let topo = scenario.topology.clone();
    let k = req.participants.len();
    let channels = req.channels.max(1);
    let elems = scenario
        .knobs
        .verify_elements
        .unwrap_or_else(|| default_elems(req.kind, k, channels));
    let elems = elems.div_ceil(k * channels) * (k * channels);
    let inputs = make_inputs(ci, req.kind, k, elems);
    let expect = oracle(req.kind, &inputs, req.root);

    let mut notes = Vec::new();
    let mut entry = RawCollective {
        kind: req.kind,
        bytes: req.bytes_per_gpu,
        issue_at: scenario.issue_at[ci],
        start,
        completion: start,
        makespan: 0.0,
        strategy: String::new(),
        plan: None,
        recursive_levels: None,
        integrity: String::new(),
        notes: Vec::new(),
    };

    // strategy resolution against current health
    let full_cluster = k == topo.num_gpus();
    let choice = match scenario.strategy {
        StrategySpec::HotRepairOnly | StrategySpec::Balance => StrategyChoice::Balance,
        StrategySpec::R2ccAllReduce if req.kind == CollectiveKind::AllReduce && full_cluster => {
            forced_two_stage(scenario, &driver.health, req).unwrap_or(StrategyChoice::Balance)
        }
        StrategySpec::Recursive if req.kind == CollectiveKind::AllReduce && full_cluster => {
            let bws: Vec<f64> = (0..topo.servers())
                .map(|s| topo.aggregate_nic_bw(&driver.health, ServerId(s)))
                .collect();
            let plan = recursive_plan(&bws, topo.gpus_per_server(), req.bytes_per_gpu as f64);
            if plan.levels.len() > 1 {
                StrategyChoice::Recursive(Box::new(plan))
            } else {
                StrategyChoice::Balance
            }
        }
        StrategySpec::Auto if full_cluster => select_strategy_with_rule(
            req,
            &topo,
            &driver.health,
            &scenario.cost,
            threshold_rule(&scenario.knobs),
        ),
        _ => StrategyChoice::Balance,
    };

    let result: Result<(f64, Vec<Vec<f64>>, bool), ExecError> = match &choice {
        StrategyChoice::Balance => {
            entry.strategy = if driver.repair == RepairMode::HotRepair {
                "hot_repair_only".into()
            } else {
                "balance".into()
            };
            (|| {
                let ring_order = ring_order_for(&topo, &driver.health, &req.participants);
                let sched = ring_schedule(req, ring_order)?;
                comm.prepare(&sched, channels, transport, &driver.health)?;
                refresh_assignments(engine, transport, comm, &sched, channels, driver)?;
                let out = execute(
                    &sched,
                    req.bytes_per_gpu,
                    &inputs,
                    engine,
                    transport,
                    comm,
                    driver,
                    &ExecOptions { channels, slice: 0 },
                )?;
                Ok((out.completion, out.buffers, out.intact))
            })()
        }
        StrategyChoice::TwoStage(plan) => {
            entry.strategy = "r2cc_allreduce".into();
            entry.plan = Some((**plan).clone());
            if let Some(n) = &plan.note {
                notes.push(n.clone());
            }
            (|| {
                let degraded = most_degraded(&topo, &driver.health)
                    .expect("two-stage strategy implies a degraded server");
                let tsp = plan_two_stage(&topo, degraded, plan)
                    .map_err(|e| ExecError::Transport(TransportError::Engine(e.to_string())))?;
                let out = execute_two_stage(
                    &tsp,
                    req.bytes_per_gpu,
                    &inputs,
                    engine,
                    transport,
                    comm,
                    &driver.health.clone(),
                    driver,
                    channels,
                )?;
                Ok((out.completion, out.buffers, out.intact))
            })()
        }
        StrategyChoice::Recursive(plan) => {
            entry.strategy = "recursive".into();
            entry.recursive_levels = Some(plan.levels.len());
            (|| {
                let out = execute_recursive(
                    plan,
                    req.bytes_per_gpu,
                    &inputs,
                    engine,
                    transport,
                    comm,
                    &driver.health.clone(),
                    driver,
                    channels,
                )?;
                Ok((out.completion, out.buffers, out.intact))
            })()
        }
    };

    match result {
        Ok((completion, buffers, intact)) => {
            entry.completion = completion.max(start);
            entry.makespan = entry.completion - start;
            let semantic_ok = buffers == expect;
            entry.integrity = if semantic_ok && intact {
                "pass".into()
            } else {
                format!("fail: semantic_ok={semantic_ok} transport_intact={intact}")
            };
        }
        Err(e) => {
            let stuck = !driver.stuck_conns.is_empty();
            entry.integrity = match e {
                ExecError::Stalled { .. } if stuck => {
                    "failed: no backup NIC left in the failover chain".into()
                }
                other => format!("failed: {other}"),
            };
            entry.completion = engine.now();
            entry.makespan = entry.completion - start;
        }
    }
    entry.notes = notes;
    entry
}

fn most_degraded(topo: &ClusterTopology, health: &HealthMap) -> Option<ServerId> {
    (0..topo.servers())
        .map(ServerId)
        .filter_map(|s| {
            let nominal = topo.nominal_nic_bw(s);
            let rem = topo.aggregate_nic_bw(health, s);
            (rem < nominal).then(|| (s, rem / nominal))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(s, _)| s)
}

fn forced_two_stage(
    scenario: &Scenario,
    health: &HealthMap,
    req: &CollectiveRequest,
) -> Option<StrategyChoice> {
    let topo = &scenario.topology;
    let degraded = most_degraded(topo, health)?;
    if topo.servers() < 3 {
        return None;
    }
    let nominal = topo.nominal_nic_bw(degraded);
    let rem = topo.aggregate_nic_bw(health, degraded);
    let x = 1.0 - rem / nominal;
    let healthy_b = (0..topo.servers())
        .map(ServerId)
        .filter(|&s| s != degraded)
        .map(|s| topo.aggregate_nic_bw(health, s))
        .fold(f64::INFINITY, f64::min);
    let inp = PartitionInputs {
        n: topo.servers(),
        g: topo.gpus_per_server(),
        x,
        d: req.bytes_per_gpu as f64,
        b: healthy_b,
    };
    let plan = optimal_partition(&inp, threshold_rule(&scenario.knobs)).ok()?;
    (plan.strategy == PlanStrategy::R2ccAllReduce).then(|| StrategyChoice::TwoStage(Box::new(plan)))
}

// ---------------------------------------------------------------------------
// flow fidelity: analytic pricing for large sweeps
// ---------------------------------------------------------------------------

fn kind_coeff(kind: CollectiveKind, k: usize) -> f64 {
    let kf = k as f64;
    match kind {
        CollectiveKind::ReduceScatter
        | CollectiveKind::AllGather
        | CollectiveKind::Reduce
        | CollectiveKind::AllToAll => (kf - 1.0) / kf,
        CollectiveKind::AllReduce => 2.0 * (kf - 1.0) / kf,
        CollectiveKind::Broadcast | CollectiveKind::SendRecv => 1.0,
    }
}

fn kind_steps(kind: CollectiveKind, k: usize) -> usize {
    match kind {
        CollectiveKind::ReduceScatter | CollectiveKind::AllGather => k - 1,
        CollectiveKind::AllReduce => 2 * (k - 1),
        CollectiveKind::Broadcast | CollectiveKind::Reduce => k - 1,
        CollectiveKind::SendRecv | CollectiveKind::AllToAll => 1,
    }
}

/// Effective cross-fabric bandwidth of one server under the repair mode:
/// rebalancing pools the healthy NICs; a bare hot repair is limited by the
/// most overloaded backup NIC.
fn server_effective_bw(
    topo: &ClusterTopology,
    health: &HealthMap,
    server: ServerId,
    repair: RepairMode,
) -> f64 {
    let nics = topo.nics_on(server).unwrap();
    match repair {
        RepairMode::Balance => topo.aggregate_nic_bw(health, server),
        RepairMode::HotRepair => {
            let mut load: BTreeMap<NicId, f64> = nics
                .iter()
                .filter(|&&n| health.nic_healthy(n))
                .map(|&n| (n, 1.0))
                .collect();
            if load.is_empty() {
                return 0.0;
            }
            for &n in nics.iter().filter(|&&n| !health.nic_healthy(n)) {
                let chain = topo.failover_chain(topo.nic(n).affinity_gpu).unwrap();
                if let Some(&backup) = chain.iter().find(|&&b| health.nic_healthy(b)) {
                    *load.get_mut(&backup).unwrap() += 1.0;
                }
            }
            let max_load = load.values().cloned().fold(1.0, f64::max);
            topo.nominal_nic_bw(server) / max_load
        }
    }
}

struct FlowPricing {
    time: f64,
    strategy: String,
    plan: Option<PartitionPlan>,
    recursive_levels: Option<usize>,
    notes: Vec<String>,
    /// Per-server one-direction cross bytes, for traffic accounting.
    server_bytes: BTreeMap<ServerId, f64>,
    feasible: bool,
}

fn price_collective(
    scenario: &Scenario,
    req: &CollectiveRequest,
    health: &HealthMap,
) -> FlowPricing {
    let topo = &scenario.topology;
    let cost = &scenario.cost;
    let k = req.participants.len();
    let servers: BTreeSet<ServerId> = req
        .participants
        .iter()
        .map(|&g| topo.server_of_gpu(g).unwrap())
        .collect();
    let volume = kind_coeff(req.kind, k) * req.bytes_per_gpu as f64;
    let steps = kind_steps(req.kind, k) as f64;
    let mode = repair_mode(scenario.strategy);

    if servers.len() < 2 {
        // intra-server collective: NIC health is irrelevant
        let t = steps * cost.alpha
            + kind_coeff(req.kind, k) * req.bytes_per_gpu as f64 / topo.nvlink_bw();
        return FlowPricing {
            time: t,
            strategy: "intra_node".into(),
            plan: None,
            recursive_levels: None,
            notes: Vec::new(),
            server_bytes: BTreeMap::new(),
            feasible: true,
        };
    }

    let mut server_bytes = BTreeMap::new();
    for &s in &servers {
        server_bytes.insert(s, volume);
    }

    let ring_time = |mode: RepairMode| -> (f64, bool) {
        let mut worst: f64 = 0.0;
        let mut feasible = true;
        for &s in &servers {
            let eff = server_effective_bw(topo, health, s, mode);
            if eff <= 0.0 {
                feasible = false;
                continue;
            }
            worst = worst.max(volume / eff);
        }
        (steps * cost.alpha + worst, feasible)
    };

    let full_cluster = k == topo.num_gpus();
    let choice = match scenario.strategy {
        StrategySpec::HotRepairOnly | StrategySpec::Balance => StrategyChoice::Balance,
        StrategySpec::R2ccAllReduce if req.kind == CollectiveKind::AllReduce && full_cluster => {
            forced_two_stage(scenario, health, req).unwrap_or(StrategyChoice::Balance)
        }
        StrategySpec::Recursive if req.kind == CollectiveKind::AllReduce && full_cluster => {
            let bws: Vec<f64> = (0..topo.servers())
                .map(|s| topo.aggregate_nic_bw(health, ServerId(s)))
                .collect();
            let plan = recursive_plan(&bws, topo.gpus_per_server(), req.bytes_per_gpu as f64);
            if plan.levels.len() > 1 {
                StrategyChoice::Recursive(Box::new(plan))
            } else {
                StrategyChoice::Balance
            }
        }
        StrategySpec::Auto if full_cluster => {
            select_strategy_with_rule(req, topo, health, cost, threshold_rule(&scenario.knobs))
        }
        _ => StrategyChoice::Balance,
    };

    match choice {
        StrategyChoice::Balance => {
            let (t, feasible) = ring_time(mode);
            FlowPricing {
                time: t,
                strategy: if mode == RepairMode::HotRepair {
                    "hot_repair_only"
                } else {
                    "balance"
                }
                .into(),
                plan: None,
                recursive_levels: None,
                notes: Vec::new(),
                server_bytes,
                feasible,
            }
        }
        StrategyChoice::TwoStage(plan) => {
            let n = topo.servers();
            let t = (2.0 * (k as f64 - 1.0) + (n + 1) as f64) * cost.alpha + plan.t_total;
            let mut notes = Vec::new();
            if let Some(note) = &plan.note {
                notes.push(note.clone());
            }
            // the degraded server moves only the reduced two-stage volume
            if let Some(degraded) = most_degraded(topo, health) {
                let d = req.bytes_per_gpu as f64;
                let a = 2.0 * (k as f64 - 1.0) / k as f64;
                server_bytes.insert(degraded, a * (1.0 - plan.y) * d + plan.y * d);
            }
            FlowPricing {
                time: t,
                strategy: "r2cc_allreduce".into(),
                plan: Some(*plan),
                recursive_levels: None,
                notes,
                server_bytes,
                feasible: true,
            }
        }
        StrategyChoice::Recursive(plan) => {
            let extra: f64 = plan
                .levels
                .iter()
                .map(|lv| (lv.group.len() + 1) as f64)
                .sum();
            let t = (2.0 * (k as f64 - 1.0) + extra) * cost.alpha + plan.predicted_time;
            FlowPricing {
                time: t,
                strategy: "recursive".into(),
                plan: None,
                recursive_levels: Some(plan.levels.len()),
                notes: Vec::new(),
                server_bytes,
                feasible: true,
            }
        }
    }
}

/// Analytic pass: no transport, bandwidth arithmetic only. Faults take
/// effect at their injection times; a fault landing inside a collective's
/// window splits it into before/after segments plus the detection stall.
pub fn run_flow(scenario: &Scenario, with_faults: bool) -> Result<RawRun, RunError> {
    let topo = &scenario.topology;
    let knobs = &scenario.knobs;
    let faults: Vec<ScenarioFault> = if with_faults {
        scenario.faults.clone()
    } else {
        Vec::new()
    };

    // (time, fault index, is_recovery) ordered
    let mut timeline: Vec<(f64, usize, bool)> = Vec::new();
    for (i, f) in faults.iter().enumerate() {
        timeline.push((f.time, i, false));
        if let Some(r) = f.recovery_time {
            timeline.push((r, i, true));
        }
    }
    timeline.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut health = HealthMap::new();
    let mut applied = 0usize;
    let apply_until = |t: f64, health: &mut HealthMap, applied: &mut usize| {
        while *applied < timeline.len() && timeline[*applied].0 <= t {
            let (_, idx, recov) = timeline[*applied];
            let f = &faults[idx];
            match (f.target, recov) {
                (ScenarioTarget::Nic(n), false) => health.fail_nic(n),
                (ScenarioTarget::Nic(n), true) => health.recover_nic(n),
                (ScenarioTarget::Link(a, b), false) => health.fail_link(a, b),
                (ScenarioTarget::Link(a, b), true) => health.recover_link(a, b),
                (ScenarioTarget::Transport { .. }, _) => {}
            }
            *applied += 1;
        }
    };

    let detection_stall = knobs.oob_latency + knobs.probe_timeout;

    let mut order: Vec<usize> = (0..scenario.workload.len()).collect();
    order.sort_by(|&a, &b| {
        scenario.issue_at[a]
            .total_cmp(&scenario.issue_at[b])
            .then(a.cmp(&b))
    });

    let mut now = 0.0f64;
    let mut collectives = Vec::new();
    let mut server_tx: BTreeMap<ServerId, f64> = BTreeMap::new();
    for &ci in &order {
        let req = &scenario.workload[ci];
        let start = now.max(scenario.issue_at[ci]);
        apply_until(start, &mut health, &mut applied);

        let mut pricing = price_collective(scenario, req, &health);
        let mut cur = start;
        let mut remaining_work = 1.0f64;
        let mut rate_time = pricing.time.max(1e-30);
        // walk health events landing inside the window: finished work keeps,
        // the rest continues at the repriced rate; faults add the detection
        // stall, recoveries take effect silently
        while applied < timeline.len() {
            let (te, _, is_recovery) = timeline[applied];
            let end = cur + remaining_work * rate_time;
            if te >= end {
                break;
            }
            remaining_work -= (te - cur) / rate_time;
            apply_until(te, &mut health, &mut applied);
            let repriced = price_collective(scenario, req, &health);
            rate_time = repriced.time.max(1e-30);
            pricing.strategy = repriced.strategy;
            pricing.feasible &= repriced.feasible;
            cur = te + if is_recovery { 0.0 } else { detection_stall };
        }
        let completion = cur + remaining_work * rate_time;
        let makespan = completion - start;

        for (s, b) in &pricing.server_bytes {
            *server_tx.entry(*s).or_insert(0.0) += b;
        }
        collectives.push(RawCollective {
            kind: req.kind,
            bytes: req.bytes_per_gpu,
            issue_at: scenario.issue_at[ci],
            start,
            completion,
            makespan,
            strategy: pricing.strategy,
            plan: pricing.plan,
            recursive_levels: pricing.recursive_levels,
            integrity: if pricing.feasible {
                "analytic".into()
            } else {
                "failed: no backup NIC left on a participating server".into()
            },
            notes: pricing.notes,
        });
        now = completion;
    }

    // analytic detection records
    let mut detections = Vec::new();
    for (i, f) in faults.iter().enumerate() {
        let peer = if knobs.oob_enabled {
            f.time + knobs.oob_latency
        } else {
            f.time + knobs.poll_timeout
        };
        detections.push(DetectionRecord {
            fault_index: i,
            fault_time: f.time,
            target: format!("{:?}", f.target),
            detector_aware: f.time,
            peer_aware: Some(peer),
            verdict: Some("analytic".into()),
            secondary_verdict: None,
            verdict_time: Some(peer + knobs.probe_timeout),
            migrations: Vec::new(),
            no_backup: false,
            recovery_detected_at: f.recovery_time,
        });
    }

    // spread per-server volume over its healthy NICs for the traffic matrix
    let mut nic_traffic = Vec::new();
    for nic in topo.all_nics() {
        let share = if health.nic_healthy(nic.id) {
            let server_total: f64 = server_tx.get(&nic.server).copied().unwrap_or(0.0);
            let healthy = topo.aggregate_nic_bw(&health, nic.server).max(1e-9);
            server_total * nic.bandwidth / healthy
        } else {
            0.0
        };
        nic_traffic.push((nic.id.0, nic.server.0, share as u64, share as u64));
    }

    Ok(RawRun {
        collectives,
        detections,
        nic_traffic,
        end_time: now,
    })
}

/// Run a scenario at a fidelity.
pub fn run_raw(
    scenario: &Scenario,
    with_faults: bool,
    fidelity: Fidelity,
) -> Result<RawRun, RunError> {
    match fidelity {
        Fidelity::Chunk => run_chunk(scenario, with_faults),
        Fidelity::Flow => run_flow(scenario, with_faults),
        Fidelity::Auto => unreachable!("resolve fidelity before running"),
    }
}

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

/// Run the scenario and its fault-free baseline, producing the comparison
/// report. A fault-free scenario reports exactly zero overhead.
pub fn run(scenario: &Scenario, seed: u64) -> Result<crate::report::Report, RunError> {
    let fidelity = effective_fidelity(scenario);
    let faulted = run_raw(scenario, true, fidelity)?;
    let baseline = run_raw(scenario, false, fidelity)?;
    Ok(crate::report::assemble_report(
        scenario, seed, fidelity, faulted, baseline,
    ))
}

fn splitmix(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-trial overhead curves of the Monte-Carlo sweep: for k = 0..=K, fail
/// the first k NICs of a per-trial random permutation. Failure sets nest as
/// k grows, so every trial's curve is non-decreasing by construction. Always
/// priced with the flow model.
pub fn sweep_curves(scenario: &Scenario, seed: u64) -> Result<Vec<Vec<f64>>, RunError> {
    let mc = scenario.monte_carlo.clone().ok_or(RunError::NoMonteCarlo)?;
    let all_nics: Vec<NicId> = (0..scenario.topology.num_nics()).map(NicId).collect();

    // the baseline never changes across trials
    let baseline = run_flow(scenario, false)?;
    let base_total: f64 = baseline.collectives.iter().map(|c| c.makespan).sum();

    let mut curves = Vec::with_capacity(mc.trials);
    for t in 0..mc.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ mc.seed, t as u64));
        let mut perm = all_nics.clone();
        perm.shuffle(&mut rng);
        let mut curve = Vec::with_capacity(mc.k + 1);
        for k in 0..=mc.k {
            let mut s = scenario.clone();
            s.faults = perm[..k]
                .iter()
                .map(|&n| ScenarioFault {
                    time: 0.0,
                    target: ScenarioTarget::Nic(n),
                    permanent: true,
                    recovery_time: None,
                })
                .collect();
            let run = run_flow(&s, true)?;
            let total: f64 = run.collectives.iter().map(|c| c.makespan).sum();
            curve.push(if base_total > 0.0 {
                total / base_total - 1.0
            } else {
                0.0
            });
        }
        curves.push(curve);
    }
    Ok(curves)
}

/// Aggregate the sweep into per-k overhead statistics.
pub fn sweep(scenario: &Scenario, seed: u64) -> Result<crate::report::SweepReport, RunError> {
    let mc = scenario.monte_carlo.clone().ok_or(RunError::NoMonteCarlo)?;
    let curves = sweep_curves(scenario, seed)?;
    let mut points = Vec::new();
    for k in 0..=mc.k {
        let mut overheads: Vec<f64> = curves.iter().map(|c| c[k]).collect();
        overheads.sort_by(|a, b| a.total_cmp(b));
        let mean = overheads.iter().sum::<f64>() / overheads.len().max(1) as f64;
        let pct = |q: f64| -> f64 {
            if overheads.is_empty() {
                0.0
            } else {
                let idx = ((overheads.len() - 1) as f64 * q).round() as usize;
                overheads[idx]
            }
        };
        points.push(crate::report::SweepPoint {
            k,
            trials: mc.trials,
            mean_overhead: mean,
            p50_overhead: pct(0.5),
            p95_overhead: pct(0.95),
            max_overhead: overheads.last().copied().unwrap_or(0.0),
        });
    }
    Ok(crate::report::SweepReport {
        scenario: scenario.name.clone(),
        seed,
        strategy: format!("{:?}", scenario.strategy).to_lowercase(),
        points,
    })
}
