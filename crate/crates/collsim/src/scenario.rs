//! Scenario files: the human-editable description of a topology, a workload,
//! a fault schedule, and the knobs a run needs.
//!
//! The format is TOML. A minimal file only needs a `[topology]` section; the
//! default workload is then a single 1 GiB all-reduce over every GPU.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{CollectiveKind, CollectiveRequest, Reduction};
use crate::cost_model::CostParams;
use crate::topology::{build_topology, ClusterTopology, GpuId, NicId, TopologyError, TopologySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    #[default]
    Auto,
    HotRepairOnly,
    Balance,
    #[serde(rename = "r2cc_allreduce")]
    R2ccAllReduce,
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Chunk-level simulation up to 32 ranks, analytic flow model beyond.
    #[default]
    Auto,
    Chunk,
    Flow,
}

fn default_chunk_size() -> u64 {
    1 << 20
}
fn default_oob_latency() -> f64 {
    5e-4
}
fn default_probe_rtt() -> f64 {
    1e-5
}
fn default_probe_timeout() -> f64 {
    5e-3
}
fn default_poll_timeout() -> f64 {
    30.0
}
fn default_true() -> bool {
    true
}
fn default_registration_cost() -> f64 {
    2e-3
}
fn default_reprobe_base() -> f64 {
    0.1
}
fn default_reprobe_max() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knobs {
    #[serde(default = "default_chunk_size")]
    pub chunk_size: u64,
    #[serde(default = "default_oob_latency")]
    pub oob_latency: f64,
    #[serde(default = "default_probe_rtt")]
    pub probe_rtt: f64,
    #[serde(default = "default_probe_timeout")]
    pub probe_timeout: f64,
    #[serde(default = "default_poll_timeout")]
    pub poll_timeout: f64,
    /// Out-of-band peer notification; disabling it is the slow-detection
    /// ablation where peers spin until the poll timeout.
    #[serde(default = "default_true")]
    pub oob_enabled: bool,
    /// When true, buffers are registered with one NIC only and every
    /// migration pays the registration cost.
    #[serde(default)]
    pub registration_ablation: bool,
    #[serde(default = "default_registration_cost")]
    pub registration_cost: f64,
    #[serde(default = "default_reprobe_base")]
    pub reprobe_base: f64,
    #[serde(default = "default_reprobe_max")]
    pub reprobe_max: f64,
    #[serde(default)]
    pub fidelity: Fidelity,
    /// Apply the practical 1/3 threshold instead of the exact one.
    #[serde(default)]
    pub practical_threshold: bool,
    /// Semantic elements per GPU buffer (small; values are checked exactly).
    #[serde(default)]
    pub verify_elements: Option<usize>,
}

impl Default for Knobs {
    fn default() -> Self {
        toml::from_str("").expect("empty knobs parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub kind: CollectiveKind,
    /// Bytes per GPU.
    pub bytes: u64,
    #[serde(default)]
    pub issue_at: f64,
    /// Global GPU ids; defaults to every GPU in the cluster.
    #[serde(default)]
    pub participants: Option<Vec<usize>>,
    #[serde(default)]
    pub root: usize,
    #[serde(default)]
    pub channels: Option<usize>,
}

/// One fault entry. Exactly one of `nic`, `link`, `transport` must be set.
/// `nic = [server, local_nic]`; `link = [[s, n], [s, n]]`;
/// `transport = [src_gpu, dst_gpu, channel]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultItem {
    pub time: f64,
    #[serde(default)]
    pub nic: Option<[usize; 2]>,
    #[serde(default)]
    pub link: Option<[[usize; 2]; 2]>,
    #[serde(default)]
    pub transport: Option<[usize; 3]>,
    #[serde(default)]
    pub permanent: bool,
    #[serde(default)]
    pub recovery_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    /// Sweep runs k = 0..=k failures.
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub topology: TopologySpec,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default)]
    pub faults: Vec<FaultItem>,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloSpec>,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub cost: Option<CostParams>,
    #[serde(default)]
    pub knobs: Option<Knobs>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("workload[{index}]: participant gpu {gpu} does not exist")]
    BadParticipant { index: usize, gpu: usize },
    #[error("workload[{index}]: a collective needs at least 2 participants")]
    TooFewParticipants { index: usize },
    #[error("workload[{index}]: issue_at must be finite and >= 0")]
    BadIssueTime { index: usize },
    #[error("knobs.chunk_size must be > 0")]
    BadChunkSize,
    #[error("monte_carlo.k = {k} exceeds the {nics} NICs in the cluster")]
    TooManyFailures { k: usize, nics: usize },
    #[error("workload[{index}]: root {root} out of range")]
    BadRoot { index: usize, root: usize },
    #[error("workload[{index}]: send_recv needs exactly 2 participants")]
    BadSendRecv { index: usize },
    #[error("faults[{index}]: exactly one of nic/link/transport must be set")]
    AmbiguousFault { index: usize },
    #[error("faults[{index}]: server {server} has no local nic {nic}")]
    BadNic {
        index: usize,
        server: usize,
        nic: usize,
    },
    #[error("faults[{1}]: {0}")]
    BadFault(String, usize),
    #[error("cost: {0}")]
    BadCost(String),
    #[error("monte_carlo.trials must be >= 1")]
    NoTrials,
}

/// A fault target as the scenario names it; transport faults are resolved to
/// live connections only at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioTarget {
    Nic(NicId),
    Link(NicId, NicId),
    Transport {
        src: GpuId,
        dst: GpuId,
        channel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFault {
    pub time: f64,
    pub target: ScenarioTarget,
    pub permanent: bool,
    pub recovery_time: Option<f64>,
}

/// Fully validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub topology: ClusterTopology,
    pub topology_spec: TopologySpec,
    pub workload: Vec<CollectiveRequest>,
    pub issue_at: Vec<f64>,
    pub faults: Vec<ScenarioFault>,
    pub monte_carlo: Option<MonteCarloSpec>,
    pub strategy: StrategySpec,
    pub cost: CostParams,
    pub knobs: Knobs,
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|err| ScenarioError::Io {
        path: path.display().to_string(),
        err,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    scenario_from_str(&text, &name)
}

pub fn scenario_from_str(text: &str, name: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = toml::from_str(text)?;
    let topology = build_topology(&file.topology)?;
    // a scenario that stays silent on cost gets one RDMA round-trip of
    // per-message latency; alpha = 0 is the bandwidth-only mode
    let cost = file.cost.unwrap_or(CostParams {
        alpha: 2e-6,
        beta: topology.nic(NicId(0)).bandwidth,
    });
    cost.validate().map_err(ScenarioError::BadCost)?;
    let knobs = file.knobs.unwrap_or_default();

    let default_channels = topology.nics_per_server();
    let all_gpus: Vec<GpuId> = (0..topology.num_gpus()).map(GpuId).collect();

    let mut items = file.workload;
    if items.is_empty() {
        items.push(WorkloadItem {
            kind: CollectiveKind::AllReduce,
            bytes: 1 << 30,
            issue_at: 0.0,
            participants: None,
            root: 0,
            channels: None,
        });
    }

    let mut workload = Vec::new();
    let mut issue_at = Vec::new();
    for (index, item) in items.iter().enumerate() {
        let participants: Vec<GpuId> = match &item.participants {
            None => all_gpus.clone(),
            Some(ids) => {
                let mut v = Vec::with_capacity(ids.len());
                for &gpu in ids {
                    if gpu >= topology.num_gpus() {
                        return Err(ScenarioError::BadParticipant { index, gpu });
                    }
                    v.push(GpuId(gpu));
                }
                v
            }
        };
        if item.kind == CollectiveKind::SendRecv && participants.len() != 2 {
            return Err(ScenarioError::BadSendRecv { index });
        }
        if participants.len() < 2 {
            return Err(ScenarioError::TooFewParticipants { index });
        }
        if !item.issue_at.is_finite() || item.issue_at < 0.0 {
            return Err(ScenarioError::BadIssueTime { index });
        }
        if item.root >= participants.len() {
            return Err(ScenarioError::BadRoot {
                index,
                root: item.root,
            });
        }
        workload.push(CollectiveRequest {
            kind: item.kind,
            bytes_per_gpu: item.bytes,
            participants,
            root: item.root,
            channels: item.channels.unwrap_or(default_channels),
            reduction: Reduction::Sum,
        });
        issue_at.push(item.issue_at);
    }

    let mut faults = Vec::new();
    for (index, f) in file.faults.iter().enumerate() {
        let picks = [f.nic.is_some(), f.link.is_some(), f.transport.is_some()];
        if picks.iter().filter(|&&b| b).count() != 1 {
            return Err(ScenarioError::AmbiguousFault { index });
        }
        let m = topology.nics_per_server();
        let resolve = |server: usize, nic: usize| -> Result<NicId, ScenarioError> {
            if server >= topology.servers() || nic >= m {
                return Err(ScenarioError::BadNic { index, server, nic });
            }
            Ok(NicId(server * m + nic))
        };
        let target = if let Some([server, nic]) = f.nic {
            ScenarioTarget::Nic(resolve(server, nic)?)
        } else if let Some([a, b]) = f.link {
            ScenarioTarget::Link(resolve(a[0], a[1])?, resolve(b[0], b[1])?)
        } else {
            let [src, dst, ch] = f.transport.unwrap();
            if src >= topology.num_gpus() || dst >= topology.num_gpus() {
                return Err(ScenarioError::BadParticipant {
                    index,
                    gpu: src.max(dst),
                });
            }
            ScenarioTarget::Transport {
                src: GpuId(src),
                dst: GpuId(dst),
                channel: ch,
            }
        };
        if !f.time.is_finite() || f.time < 0.0 {
            return Err(ScenarioError::BadFault(
                "fault time must be finite and >= 0".into(),
                index,
            ));
        }
        if let Some(r) = f.recovery_time {
            if f.permanent {
                return Err(ScenarioError::BadFault(
                    "a permanent fault cannot carry a recovery_time".into(),
                    index,
                ));
            }
            if r <= f.time {
                return Err(ScenarioError::BadFault(
                    format!("recovery_time {r} must be after the fault time {}", f.time),
                    index,
                ));
            }
        }
        faults.push(ScenarioFault {
            time: f.time,
            target,
            permanent: f.permanent,
            recovery_time: f.recovery_time,
        });
    }

    if knobs.chunk_size == 0 {
        return Err(ScenarioError::BadChunkSize);
    }
    if let Some(mc) = &file.monte_carlo {
        if mc.trials == 0 {
            return Err(ScenarioError::NoTrials);
        }
        if mc.k > topology.num_nics() {
            return Err(ScenarioError::TooManyFailures {
                k: mc.k,
                nics: topology.num_nics(),
            });
        }
    }

    Ok(Scenario {
        name: name.to_string(),
        topology,
        topology_spec: file.topology,
        workload,
        issue_at,
        faults,
        monte_carlo: file.monte_carlo,
        strategy: file.strategy,
        cost,
        knobs,
    })
}

/// Map of per-server healthy NIC line rates, for redistribute-style planning.
pub fn nic_bw_map(
    topology: &ClusterTopology,
    server: crate::topology::ServerId,
) -> BTreeMap<NicId, f64> {
    topology
        .nics_on(server)
        .map(|nics| {
            nics.iter()
                .map(|&n| (n, topology.nic(n).bandwidth))
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let s = scenario_from_str(
            "[topology]\nservers = 2\ngpus_per_server = 2\nnics_per_server = 2\nnic_bandwidth = 50e9\n",
            "mini",
        )
        .unwrap();
        assert_eq!(s.workload.len(), 1);
        assert_eq!(s.workload[0].kind, CollectiveKind::AllReduce);
        assert_eq!(s.workload[0].bytes_per_gpu, 1 << 30);
        assert_eq!(s.workload[0].participants.len(), 4);
        assert_eq!(s.workload[0].channels, 2);
        assert_eq!(s.cost.alpha, 2e-6);
        assert_eq!(s.knobs.chunk_size, 1 << 20);
    }

    #[test]
    fn fault_entries_parse_to_targets() {
        let s = scenario_from_str(
            r#"
[topology]
servers = 2
gpus_per_server = 2
nics_per_server = 4
nic_bandwidth = 50e9

[[faults]]
time = 50.0
nic = [1, 3]
permanent = true
"#,
            "f",
        )
        .unwrap();
        assert_eq!(s.faults.len(), 1);
        assert_eq!(s.faults[0].time, 50.0);
        assert_eq!(s.faults[0].target, ScenarioTarget::Nic(NicId(7)));
    }

    #[test]
    fn unknown_strategy_is_named_in_the_error() {
        let err = scenario_from_str(
            "strategy = \"warp\"\n[topology]\nservers = 2\ngpus_per_server = 2\nnics_per_server = 2\n",
            "bad",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("strategy"),
            "error should name the field: {msg}"
        );
    }

    #[test]
    fn bad_fault_coordinates_are_rejected() {
        let err = scenario_from_str(
            r#"
[topology]
servers = 2
gpus_per_server = 2
nics_per_server = 2

[[faults]]
time = 1.0
nic = [0, 9]
"#,
            "bad",
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::BadNic { nic: 9, .. }));
    }

    #[test]
    fn hostile_inputs_are_rejected_cleanly() {
        let base = "[topology]\nservers = 2\ngpus_per_server = 2\nnics_per_server = 2\n";
        let cases = [
            (
                format!(
                    "{base}[[workload]]\nkind = \"all_reduce\"\nbytes = 1\nparticipants = [0]\n"
                ),
                "2 participants",
            ),
            (
                format!("{base}[[workload]]\nkind = \"all_reduce\"\nbytes = 1\nissue_at = -0.5\n"),
                "issue_at",
            ),
            (format!("{base}[knobs]\nchunk_size = 0\n"), "chunk_size"),
            (
                format!("{base}[[faults]]\ntime = -1.0\nnic = [0, 0]\n"),
                "fault time",
            ),
            (
                format!("{base}[monte_carlo]\nk = 99\ntrials = 5\nseed = 1\n"),
                "exceeds",
            ),
        ];
        for (text, needle) in cases {
            let err = scenario_from_str(&text, "hostile").unwrap_err().to_string();
            assert!(err.contains(needle), "expected {needle:?} in: {err}");
        }
    }

    #[test]
    fn recovery_before_fault_is_rejected() {
        let err = scenario_from_str(
            r#"
[topology]
servers = 2
gpus_per_server = 2
nics_per_server = 2

[[faults]]
time = 5.0
nic = [0, 0]
recovery_time = 2.0
"#,
            "bad",
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::BadFault(..)));
    }
}
