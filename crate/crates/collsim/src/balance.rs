//! NIC-level traffic redistribution after a failure, plus the per-flow
//! routing policy that decides how detoured traffic reaches its backup NIC.
//!
//! The collective schedule stays untouched; the only degree of freedom is
//! which healthy NIC carries each byte the failed NIC would have sent. Shares
//! are proportional to available bandwidth, so with equal NICs one failure
//! out of m loads every survivor by 1/(m-1) and the server completes in
//! m/(m-1) of its healthy time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CostParams;
use crate::topology::{ClusterTopology, GpuId, NicId, ServerId};

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("no healthy NIC left on the server")]
    AllNicsFailed,
}

/// Proportional redistribution of a server's send volume over its healthy
/// NICs: `share_j = d_i * bw_j / sum(bw)`. Integer remainders go to the
/// highest-bandwidth NIC (lowest id on ties) so shares always sum exactly.
pub fn redistribute(
    d_i: u64,
    nic_bw: &BTreeMap<NicId, f64>,
    failed: &BTreeSet<NicId>,
) -> Result<BTreeMap<NicId, u64>, BalanceError> {
    let healthy: Vec<(NicId, f64)> = nic_bw
        .iter()
        .filter(|(n, _)| !failed.contains(n))
        .map(|(&n, &b)| (n, b))
        .collect();
    if healthy.is_empty() {
        return Err(BalanceError::AllNicsFailed);
    }
    let total: f64 = healthy.iter().map(|(_, b)| b).sum();
    let mut shares: BTreeMap<NicId, u64> = BTreeMap::new();
    let mut assigned: u64 = 0;
    for &(n, b) in &healthy {
        let s = (d_i as f64 * (b / total)).floor() as u64;
        shares.insert(n, s);
        assigned += s;
    }
    let top = healthy
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    *shares.get_mut(&top).unwrap() += d_i - assigned;
    Ok(shares)
}

/// Weighted assignment for the transport layer: healthy NICs with their
/// nominal bandwidths as weights.
pub fn healthy_assignment(
    topo: &ClusterTopology,
    server: ServerId,
    healthy: impl Fn(NicId) -> bool,
) -> Vec<(NicId, f64)> {
    topo.nics_on(server)
        .map(|nics| {
            nics.iter()
                .copied()
                .filter(|&n| healthy(n))
                .map(|n| (n, topo.nic(n).bandwidth))
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    DirectPcie,
    PcieThenCpuInterconnect,
    PxnViaProxyGpu(GpuId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub kind: PathKind,
    pub predicted_time: f64,
}

/// Free capacity left on the intra-server fabrics, consumed as flows are
/// routed. PXN relays additionally hold one of a bounded set of staging
/// buffers on the proxy GPU.
#[derive(Debug, Clone)]
pub struct Headroom {
    /// Free PCIe lane bandwidth towards each NIC, bytes/s.
    pub pcie_free: BTreeMap<NicId, f64>,
    /// Free cross-socket interconnect bandwidth per server, bytes/s.
    pub cpu_free: BTreeMap<ServerId, f64>,
    /// Free intra-node fabric bandwidth per server, bytes/s.
    pub nvlink_free: BTreeMap<ServerId, f64>,
    /// Remaining concurrent PXN relays per server.
    pub pxn_slots: BTreeMap<ServerId, u32>,
}

/// Staging buffers are tens of megabytes; with the default budget a server
/// sustains a handful of concurrent relays.
pub const DEFAULT_PXN_SLOTS: u32 = 8;

/// Cross-socket PCIe paths sustain about half the NIC line rate.
pub const CROSS_NUMA_PCIE_DERATE: f64 = 0.5;

impl Headroom {
    /// Fully idle fabrics.
    pub fn fresh(topo: &ClusterTopology) -> Self {
        let mut pcie_free = BTreeMap::new();
        for nic in topo.all_nics() {
            pcie_free.insert(nic.id, topo.pcie_bw());
        }
        let mut cpu_free = BTreeMap::new();
        let mut nvlink_free = BTreeMap::new();
        let mut pxn_slots = BTreeMap::new();
        for s in 0..topo.servers() {
            cpu_free.insert(ServerId(s), topo.cpu_interconnect_bw());
            nvlink_free.insert(ServerId(s), topo.nvlink_bw());
            pxn_slots.insert(ServerId(s), DEFAULT_PXN_SLOTS);
        }
        Headroom {
            pcie_free,
            cpu_free,
            nvlink_free,
            pxn_slots,
        }
    }
}

/// Route one detoured flow from a GPU to its backup NIC.
///
/// Same NUMA domain with enough free PCIe takes the direct lane (the failed
/// NIC freed its own); across NUMA domains the cheaper of the CPU
/// interconnect and a PXN relay through the backup NIC's affinity GPU wins,
/// with ties to the PCIe family. The chosen path's capacity is consumed.
pub fn route_flow(
    topo: &ClusterTopology,
    headroom: &mut Headroom,
    src_gpu: GpuId,
    backup_nic: NicId,
    flow_bytes: u64,
    demand: f64,
    cost: &CostParams,
) -> Path {
    let nic = topo.nic(backup_nic);
    let gpu_numa = topo.gpu(src_gpu).numa;
    let server = nic.server;
    let pcie_free = headroom.pcie_free.get(&backup_nic).copied().unwrap_or(0.0);

    if nic.numa == gpu_numa && pcie_free >= demand {
        *headroom.pcie_free.get_mut(&backup_nic).unwrap() -= demand;
        let rate = pcie_free.min(nic.bandwidth);
        return Path {
            kind: PathKind::DirectPcie,
            predicted_time: cost.alpha + flow_bytes as f64 / rate,
        };
    }

    // cross-NUMA (or saturated lane): PCIe + CPU interconnect vs PXN relay
    let cpu_free = headroom.cpu_free.get(&server).copied().unwrap_or(0.0);
    let cpu_rate = cpu_free
        .min(nic.bandwidth * CROSS_NUMA_PCIE_DERATE)
        .max(1e-9);
    let t_cpu = cost.alpha + flow_bytes as f64 / cpu_rate;

    let nvlink_free = headroom.nvlink_free.get(&server).copied().unwrap_or(0.0);
    let slots = headroom.pxn_slots.get(&server).copied().unwrap_or(0);
    let pxn_feasible = slots > 0 && nvlink_free >= demand;
    let pxn_rate = nvlink_free.min(nic.bandwidth).max(1e-9);
    // the relay pays one extra intra-node hop before the NIC's own lane
    let t_pxn = 2.0 * cost.alpha + flow_bytes as f64 / pxn_rate;

    // strict inequality: ties stay in the PCIe family
    if pxn_feasible && t_pxn < t_cpu {
        *headroom.nvlink_free.get_mut(&server).unwrap() -= demand;
        *headroom.pxn_slots.get_mut(&server).unwrap() -= 1;
        return Path {
            kind: PathKind::PxnViaProxyGpu(nic.affinity_gpu),
            predicted_time: t_pxn,
        };
    }
    if let Some(v) = headroom.cpu_free.get_mut(&server) {
        *v = (*v - demand).max(0.0);
    }
    Path {
        kind: PathKind::PcieThenCpuInterconnect,
        predicted_time: t_cpu,
    }
}
