//! Cluster model: servers, GPUs, NICs, rails, NUMA domains and link parameters.
//!
//! The topology is immutable once built. Everything downstream (failover
//! ordering, routing, ring construction) asks locality questions here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::health::HealthMap;

/// Server index, dense from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServerId(pub usize);

/// Global GPU index, dense from 0 across the whole cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GpuId(pub usize);

/// Global NIC index, dense from 0 across the whole cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NicId(pub usize);

/// Rail (switch plane) index. The k-th NIC of every server usually sits on rail k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RailId(pub usize);

/// NUMA domain index, local to a server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NumaId(pub usize);

/// One NIC with its locality facts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NicDescriptor {
    pub id: NicId,
    pub server: ServerId,
    pub rail: RailId,
    pub numa: NumaId,
    /// Line rate in bytes/s.
    pub bandwidth: f64,
    /// The GPU this NIC is closest to on the PCIe tree.
    pub affinity_gpu: GpuId,
    /// PCIe hop count from every local GPU to this NIC.
    pub pcie_hops: BTreeMap<GpuId, u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpuDescriptor {
    pub id: GpuId,
    pub server: ServerId,
    pub numa: NumaId,
}

/// NIC template entry in a [`TopologySpec`]. Applied to every server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NicSpec {
    pub rail: usize,
    pub numa: usize,
    /// bytes/s
    pub bandwidth: f64,
    /// Local GPU index this NIC has affinity to.
    pub affinity_gpu: usize,
    /// PCIe hops keyed by local GPU index. Missing entries are an error
    /// unless the whole map is empty, in which case hops default to
    /// `1 + 2*|gpu - affinity|`.
    #[serde(default)]
    pub pcie_hops: BTreeMap<usize, u32>,
}

fn default_nvlink_bw() -> f64 {
    // aggregate per server: eight GPUs at ~900 GB/s each
    7200e9
}
fn default_cpu_interconnect_bw() -> f64 {
    50e9
}
fn default_pcie_bw() -> f64 {
    55e9
}

/// Declarative cluster description, usually the `[topology]` section of a
/// scenario file. Either give `nics_per_server` + `nic_bandwidth` for a
/// uniform rail-optimized layout, or list per-server NIC templates in `nics`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub servers: usize,
    pub gpus_per_server: usize,
    #[serde(default)]
    pub nics_per_server: Option<usize>,
    /// bytes/s, used with `nics_per_server`.
    #[serde(default)]
    pub nic_bandwidth: Option<f64>,
    #[serde(default)]
    pub nics: Vec<NicSpec>,
    /// Aggregate intra-node fabric bandwidth per server, bytes/s.
    #[serde(default = "default_nvlink_bw")]
    pub nvlink_bw: f64,
    /// Cross-socket interconnect (QPI/UPI) bandwidth per server, bytes/s.
    #[serde(default = "default_cpu_interconnect_bw")]
    pub cpu_interconnect_bw: f64,
    /// Per GPU-NIC PCIe lane bandwidth, bytes/s.
    #[serde(default = "default_pcie_bw")]
    pub pcie_bw: f64,
}

impl TopologySpec {
    /// Uniform rail-optimized cluster: `m` NICs per server, one rail each,
    /// NIC i with affinity to GPU i (scaled when counts differ).
    pub fn uniform(
        servers: usize,
        gpus_per_server: usize,
        nics_per_server: usize,
        nic_bw: f64,
    ) -> Self {
        TopologySpec {
            servers,
            gpus_per_server,
            nics_per_server: Some(nics_per_server),
            nic_bandwidth: Some(nic_bw),
            nics: Vec::new(),
            nvlink_bw: default_nvlink_bw(),
            cpu_interconnect_bw: default_cpu_interconnect_bw(),
            pcie_bw: default_pcie_bw(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("cluster needs at least 2 servers, got {0}")]
    TooFewServers(usize),
    #[error("servers need at least 1 GPU, got {0}")]
    NoGpus(usize),
    #[error("no NICs declared for the server template")]
    NoNics,
    #[error("bandwidth must be > 0 (nic template {0})")]
    NonPositiveBandwidth(usize),
    #[error("nvlink/cpu-interconnect/pcie bandwidths must be > 0")]
    NonPositiveFabricBandwidth,
    #[error("duplicate rail {0} in server template")]
    DuplicateRail(usize),
    #[error("nic template {nic} has no pcie_hops entry for local gpu {gpu}")]
    MissingPcieHops { nic: usize, gpu: usize },
    #[error("nic template {nic}: affinity gpu {gpu} out of range")]
    BadAffinity { nic: usize, gpu: usize },
    #[error("nic template {nic}: pcie_hops[affinity] is not minimal")]
    AffinityNotMinimal { nic: usize },
    #[error("unknown gpu {0:?}")]
    UnknownGpu(GpuId),
    #[error("unknown server {0:?}")]
    UnknownServer(ServerId),
}

/// Validated, immutable cluster topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterTopology {
    servers: usize,
    gpus_per_server: usize,
    nics: Vec<NicDescriptor>,
    gpus: Vec<GpuDescriptor>,
    nics_by_server: Vec<Vec<NicId>>,
    nvlink_bw: f64,
    cpu_interconnect_bw: f64,
    pcie_bw: f64,
}

/// Builds and validates a topology from its spec. Identifiers come out dense:
/// GPU `s*g + j`, NIC `s*m + i`.
pub fn build_topology(spec: &TopologySpec) -> Result<ClusterTopology, TopologyError> {
    if spec.servers < 2 {
        return Err(TopologyError::TooFewServers(spec.servers));
    }
    if spec.gpus_per_server < 1 {
        return Err(TopologyError::NoGpus(spec.gpus_per_server));
    }
    if spec.nvlink_bw <= 0.0 || spec.cpu_interconnect_bw <= 0.0 || spec.pcie_bw <= 0.0 {
        return Err(TopologyError::NonPositiveFabricBandwidth);
    }

    let g = spec.gpus_per_server;
    let template = expand_template(spec, g)?;
    let m = template.len();

    let mut nics = Vec::with_capacity(spec.servers * m);
    let mut gpus = Vec::with_capacity(spec.servers * g);
    let mut nics_by_server = Vec::with_capacity(spec.servers);

    for s in 0..spec.servers {
        for j in 0..g {
            // GPUs split evenly over two NUMA domains.
            let numa = if j < g.div_ceil(2) { 0 } else { 1 };
            gpus.push(GpuDescriptor {
                id: GpuId(s * g + j),
                server: ServerId(s),
                numa: NumaId(numa),
            });
        }
        let mut server_nics = Vec::with_capacity(m);
        for (i, t) in template.iter().enumerate() {
            let id = NicId(s * m + i);
            let pcie_hops = t
                .pcie_hops
                .iter()
                .map(|(&j, &h)| (GpuId(s * g + j), h))
                .collect();
            nics.push(NicDescriptor {
                id,
                server: ServerId(s),
                rail: RailId(t.rail),
                numa: NumaId(t.numa),
                bandwidth: t.bandwidth,
                affinity_gpu: GpuId(s * g + t.affinity_gpu),
                pcie_hops,
            });
            server_nics.push(id);
        }
        nics_by_server.push(server_nics);
    }

    Ok(ClusterTopology {
        servers: spec.servers,
        gpus_per_server: g,
        nics,
        gpus,
        nics_by_server,
        nvlink_bw: spec.nvlink_bw,
        cpu_interconnect_bw: spec.cpu_interconnect_bw,
        pcie_bw: spec.pcie_bw,
    })
}

fn expand_template(spec: &TopologySpec, g: usize) -> Result<Vec<NicSpec>, TopologyError> {
    let mut template = if !spec.nics.is_empty() {
        spec.nics.clone()
    } else if let Some(m) = spec.nics_per_server {
        let bw = spec.nic_bandwidth.unwrap_or(50e9);
        (0..m)
            .map(|i| NicSpec {
                rail: i,
                numa: if i < m.div_ceil(2) { 0 } else { 1 },
                bandwidth: bw,
                // Spread affinities when GPU and NIC counts differ.
                affinity_gpu: i * g / m.max(1),
                pcie_hops: BTreeMap::new(),
            })
            .collect()
    } else {
        return Err(TopologyError::NoNics);
    };
    if template.is_empty() {
        return Err(TopologyError::NoNics);
    }

    let mut rails_seen = BTreeMap::new();
    for (i, t) in template.iter_mut().enumerate() {
        if t.bandwidth <= 0.0 {
            return Err(TopologyError::NonPositiveBandwidth(i));
        }
        if let Some(prev) = rails_seen.insert(t.rail, i) {
            let _ = prev;
            return Err(TopologyError::DuplicateRail(t.rail));
        }
        if t.affinity_gpu >= g {
            return Err(TopologyError::BadAffinity {
                nic: i,
                gpu: t.affinity_gpu,
            });
        }
        if t.pcie_hops.is_empty() {
            for j in 0..g {
                let d = (j as i64 - t.affinity_gpu as i64).unsigned_abs() as u32;
                t.pcie_hops.insert(j, 1 + 2 * d);
            }
        } else {
            for j in 0..g {
                if !t.pcie_hops.contains_key(&j) {
                    return Err(TopologyError::MissingPcieHops { nic: i, gpu: j });
                }
            }
            let min = t.pcie_hops.values().min().copied().unwrap();
            if t.pcie_hops[&t.affinity_gpu] != min {
                return Err(TopologyError::AffinityNotMinimal { nic: i });
            }
        }
    }
    Ok(template)
}

impl ClusterTopology {
    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn gpus_per_server(&self) -> usize {
        self.gpus_per_server
    }

    pub fn nics_per_server(&self) -> usize {
        self.nics_by_server[0].len()
    }

    pub fn num_gpus(&self) -> usize {
        self.gpus.len()
    }

    pub fn num_nics(&self) -> usize {
        self.nics.len()
    }

    pub fn nic(&self, id: NicId) -> &NicDescriptor {
        &self.nics[id.0]
    }

    pub fn gpu(&self, id: GpuId) -> &GpuDescriptor {
        &self.gpus[id.0]
    }

    pub fn all_nics(&self) -> &[NicDescriptor] {
        &self.nics
    }

    pub fn nics_on(&self, server: ServerId) -> Result<&[NicId], TopologyError> {
        self.nics_by_server
            .get(server.0)
            .map(|v| v.as_slice())
            .ok_or(TopologyError::UnknownServer(server))
    }

    pub fn gpus_on(&self, server: ServerId) -> impl Iterator<Item = GpuId> + '_ {
        let g = self.gpus_per_server;
        (0..g).map(move |j| GpuId(server.0 * g + j))
    }

    pub fn server_of_gpu(&self, gpu: GpuId) -> Result<ServerId, TopologyError> {
        self.gpus
            .get(gpu.0)
            .map(|d| d.server)
            .ok_or(TopologyError::UnknownGpu(gpu))
    }

    pub fn nvlink_bw(&self) -> f64 {
        self.nvlink_bw
    }

    pub fn cpu_interconnect_bw(&self) -> f64 {
        self.cpu_interconnect_bw
    }

    pub fn pcie_bw(&self) -> f64 {
        self.pcie_bw
    }

    /// All NICs of the GPU's server, closest PCIe distance first, ties broken
    /// by ascending NIC id. This is the failover order a connection walks.
    pub fn failover_chain(&self, gpu: GpuId) -> Result<Vec<NicId>, TopologyError> {
        let server = self.server_of_gpu(gpu)?;
        let mut chain: Vec<NicId> = self.nics_by_server[server.0].clone();
        chain.sort_by_key(|&n| (self.nics[n.0].pcie_hops[&gpu], n));
        Ok(chain)
    }

    /// Rails of the server's NICs currently marked healthy.
    pub fn rail_set(
        &self,
        health: &HealthMap,
        server: ServerId,
    ) -> std::collections::BTreeSet<RailId> {
        self.nics_by_server
            .get(server.0)
            .map(|nics| {
                nics.iter()
                    .filter(|&&n| health.nic_healthy(n))
                    .map(|&n| self.nics[n.0].rail)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Sum of healthy NIC line rates on a server, bytes/s.
    pub fn aggregate_nic_bw(&self, health: &HealthMap, server: ServerId) -> f64 {
        self.nics_by_server[server.0]
            .iter()
            .filter(|&&n| health.nic_healthy(n))
            .map(|&n| self.nics[n.0].bandwidth)
            .sum()
    }

    /// Nominal (fault-free) aggregate NIC rate of a server, bytes/s.
    pub fn nominal_nic_bw(&self, server: ServerId) -> f64 {
        self.nics_by_server[server.0]
            .iter()
            .map(|&n| self.nics[n.0].bandwidth)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_a_two_server_eight_nic_cluster() {
        let topo = build_topology(&TopologySpec::uniform(2, 8, 8, 50e9)).unwrap();
        assert_eq!(topo.num_nics(), 16);
        assert_eq!(topo.num_gpus(), 16);
        let rails: std::collections::BTreeSet<_> = topo.all_nics().iter().map(|n| n.rail).collect();
        assert_eq!(rails.len(), 8);
    }

    #[test]
    fn minimal_cluster_is_two_servers_one_gpu_one_nic() {
        let topo = build_topology(&TopologySpec::uniform(2, 1, 1, 1e9)).unwrap();
        assert_eq!(topo.num_nics(), 2);
        assert_eq!(topo.failover_chain(GpuId(0)).unwrap(), vec![NicId(0)]);
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        let err = build_topology(&TopologySpec::uniform(2, 2, 2, 0.0)).unwrap_err();
        assert_eq!(err, TopologyError::NonPositiveBandwidth(0));
    }

    #[test]
    fn single_server_is_rejected() {
        let err = build_topology(&TopologySpec::uniform(1, 8, 8, 50e9)).unwrap_err();
        assert_eq!(err, TopologyError::TooFewServers(1));
    }

    #[test]
    fn missing_hops_entry_is_rejected() {
        let mut spec = TopologySpec::uniform(2, 2, 1, 1e9);
        spec.nics = vec![NicSpec {
            rail: 0,
            numa: 0,
            bandwidth: 1e9,
            affinity_gpu: 0,
            pcie_hops: BTreeMap::from([(0, 1)]),
        }];
        spec.nics_per_server = None;
        let err = build_topology(&spec).unwrap_err();
        assert_eq!(err, TopologyError::MissingPcieHops { nic: 0, gpu: 1 });
    }

    #[test]
    fn failover_chain_sorts_by_hops_then_id() {
        let mut spec = TopologySpec::uniform(2, 1, 3, 1e9);
        spec.nics = vec![
            NicSpec {
                rail: 0,
                numa: 0,
                bandwidth: 1e9,
                affinity_gpu: 0,
                pcie_hops: BTreeMap::from([(0, 5)]),
            },
            NicSpec {
                rail: 1,
                numa: 0,
                bandwidth: 1e9,
                affinity_gpu: 0,
                pcie_hops: BTreeMap::from([(0, 1)]),
            },
            NicSpec {
                rail: 2,
                numa: 1,
                bandwidth: 1e9,
                affinity_gpu: 0,
                pcie_hops: BTreeMap::from([(0, 3)]),
            },
        ];
        spec.nics_per_server = None;
        // affinity check: nic 0 with hops 5 claims affinity to gpu 0 whose hops are minimal
        // over the single local gpu, so it passes validation trivially.
        let topo = build_topology(&spec).unwrap();
        assert_eq!(
            topo.failover_chain(GpuId(0)).unwrap(),
            vec![NicId(1), NicId(2), NicId(0)]
        );
    }

    #[test]
    fn failover_chain_breaks_ties_by_id() {
        let mut spec = TopologySpec::uniform(2, 1, 2, 1e9);
        spec.nics = vec![
            NicSpec {
                rail: 0,
                numa: 0,
                bandwidth: 1e9,
                affinity_gpu: 0,
                pcie_hops: BTreeMap::from([(0, 2)]),
            },
            NicSpec {
                rail: 1,
                numa: 0,
                bandwidth: 1e9,
                affinity_gpu: 0,
                pcie_hops: BTreeMap::from([(0, 2)]),
            },
        ];
        spec.nics_per_server = None;
        let topo = build_topology(&spec).unwrap();
        assert_eq!(
            topo.failover_chain(GpuId(0)).unwrap(),
            vec![NicId(0), NicId(1)]
        );
    }

    #[test]
    fn failover_chain_unknown_gpu_errors() {
        let topo = build_topology(&TopologySpec::uniform(2, 2, 2, 1e9)).unwrap();
        assert!(topo.failover_chain(GpuId(99)).is_err());
    }

    #[test]
    fn failover_chain_is_a_permutation_with_minimal_head() {
        let topo = build_topology(&TopologySpec::uniform(2, 8, 8, 50e9)).unwrap();
        for j in 0..8 {
            let gpu = GpuId(j);
            let chain = topo.failover_chain(gpu).unwrap();
            let mut sorted = chain.clone();
            sorted.sort();
            assert_eq!(sorted, topo.nics_on(ServerId(0)).unwrap());
            let head_hops = topo.nic(chain[0]).pcie_hops[&gpu];
            for &n in &chain {
                assert!(topo.nic(n).pcie_hops[&gpu] >= head_hops);
            }
        }
    }

    #[test]
    fn rail_set_shrinks_with_failures_and_recovers() {
        let topo = build_topology(&TopologySpec::uniform(2, 8, 8, 50e9)).unwrap();
        let mut health = HealthMap::new();
        let full = topo.rail_set(&health, ServerId(0));
        assert_eq!(full.len(), 8);

        health.fail_nic(NicId(1));
        let degraded = topo.rail_set(&health, ServerId(0));
        assert!(!degraded.contains(&RailId(1)));
        assert_eq!(degraded.len(), 7);
        assert!(degraded.is_subset(&full));

        health.recover_nic(NicId(1));
        assert_eq!(topo.rail_set(&health, ServerId(0)), full);

        for &n in topo.nics_on(ServerId(0)).unwrap() {
            health.fail_nic(n);
        }
        assert!(topo.rail_set(&health, ServerId(0)).is_empty());
    }
}
