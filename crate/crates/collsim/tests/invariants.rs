//! Cross-module invariants that want full scenario runs.

use collsim::runner::run_chunk;
use collsim::scenario::scenario_from_str;

/// With k of m equal NICs down on one server, the rebalanced collective
/// finishes in m/(m-k) of the healthy time, within 2% for large messages.
#[test]
fn balance_completion_bound_for_deeper_failures() {
    for k in 1..=3usize {
        let faults: String = (0..k)
            .map(|i| format!("[[faults]]\ntime = 0.0\nnic = [1, {i}]\npermanent = true\n"))
            .collect();
        let text = format!(
            r#"
strategy = "balance"

[topology]
servers = 2
gpus_per_server = 8
nics_per_server = 8
nic_bandwidth = 50e9

[[workload]]
kind = "all_reduce"
bytes = 268435456
issue_at = 0.01

[cost]
alpha = 0.0
beta = 50e9

{faults}
"#
        );
        let scenario = scenario_from_str(&text, "bound").unwrap();
        let faulted = run_chunk(&scenario, true).unwrap();
        let baseline = run_chunk(&scenario, false).unwrap();
        assert_eq!(faulted.collectives[0].integrity, "pass");
        let ratio = faulted.collectives[0].makespan / baseline.collectives[0].makespan;
        let ideal = 8.0 / (8.0 - k as f64);
        assert!(
            (ratio / ideal - 1.0).abs() <= 0.02,
            "k={k}: ratio {ratio} vs ideal {ideal}"
        );
    }
}

/// The partition time is piecewise monotone around the crossing point when
/// the loss fraction exceeds the threshold.
#[test]
fn partition_time_dips_then_rises_above_threshold() {
    use collsim::allreduce_opt::{threshold, total_time, y_star, PartitionInputs};
    for (n, g, x) in [(2usize, 8usize, 0.5f64), (4, 4, 0.6), (8, 2, 0.75)] {
        assert!(x > threshold(n, g));
        let inp = PartitionInputs {
            n,
            g,
            x,
            d: 1.0,
            b: 1.0,
        };
        let ys = y_star(&inp);
        let grid = |lo: f64, hi: f64| (0..=100).map(move |i| lo + (hi - lo) * i as f64 / 100.0);
        let mut prev = f64::INFINITY;
        for y in grid(0.0, ys) {
            let t = total_time(y, &inp);
            assert!(t <= prev + 1e-12, "T must fall on [0, Y*]");
            prev = t;
        }
        let mut prev = 0.0;
        for y in grid(ys, 1.0) {
            let t = total_time(y, &inp);
            assert!(t >= prev - 1e-12, "T must rise on [Y*, 1]");
            prev = t;
        }
    }
}

/// Fractional float reductions reassociate along the ring; results match the
/// oracle within 1e-6 relative (integer-valued sums stay exact).
#[test]
fn float_reduction_within_relative_tolerance() {
    use collsim::collectives::{
        execute, oracle, ring_schedule, CollectiveKind, CollectiveRequest, CommContext,
        ExecOptions, NoHooks, Reduction,
    };
    use collsim::engine::Engine;
    use collsim::health::HealthMap;
    use collsim::topology::{build_topology, GpuId, TopologySpec};
    use collsim::transport::{TransportKnobs, TransportSim};
    use std::sync::Arc;

    let topo = Arc::new(build_topology(&TopologySpec::uniform(2, 2, 2, 1e9)).unwrap());
    let k = 4;
    let inputs: Vec<Vec<f64>> = (0..k)
        .map(|r| {
            (0..16)
                .map(|i| 0.1 * (r as f64 + 1.0) + 1e-7 * i as f64)
                .collect()
        })
        .collect();
    let req = CollectiveRequest {
        kind: CollectiveKind::AllReduce,
        bytes_per_gpu: 1 << 16,
        participants: (0..k).map(GpuId).collect(),
        root: 0,
        channels: 2,
        reduction: Reduction::Sum,
    };
    let sched = ring_schedule(&req, None).unwrap();
    let mut engine = Engine::new();
    let mut transport = TransportSim::new(Arc::clone(&topo), TransportKnobs::default());
    let health = HealthMap::new();
    let mut comm = CommContext::new();
    comm.prepare(&sched, 2, &mut transport, &health).unwrap();
    let out = execute(
        &sched,
        1 << 16,
        &inputs,
        &mut engine,
        &mut transport,
        &comm,
        &mut NoHooks,
        &ExecOptions {
            channels: 2,
            slice: 0,
        },
    )
    .unwrap();
    let expect = oracle(CollectiveKind::AllReduce, &inputs, 0);
    for (got, want) in out.buffers.iter().zip(&expect) {
        for (a, b) in got.iter().zip(want) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

/// Link and QP-level transport faults also detect, migrate and keep the
/// collective's semantics; recoveries are noticed by reprobing.
#[test]
fn link_and_transport_faults_recover() {
    let text = r#"
strategy = "balance"

[topology]
servers = 3
gpus_per_server = 2
nics_per_server = 3
nic_bandwidth = 1e9

[[workload]]
kind = "all_reduce"
bytes = 8388608
issue_at = 0.0

# cable between server 0 rail 1 and server 1 rail 1
[[faults]]
time = 0.002
link = [[0, 1], [1, 1]]
recovery_time = 1.0

# one QP dies on a channel-0 edge crossing servers 1 -> 2
[[faults]]
time = 0.004
transport = [3, 4, 0]
permanent = true

[cost]
alpha = 0.0
beta = 1e9
"#;
    let scenario = scenario_from_str(text, "mixed-faults").unwrap();
    let raw = run_chunk(&scenario, true).unwrap();
    assert_eq!(raw.collectives[0].integrity, "pass");
    let verdicts: Vec<String> = raw
        .detections
        .iter()
        .map(|d| d.verdict.clone().unwrap_or_default())
        .collect();
    assert!(
        verdicts.iter().any(|v| v.contains("LinkFault")),
        "link fault must triangulate as such: {verdicts:?}"
    );
    // the QP-level fault leaves both NICs healthy, so probing is clean and
    // the verdict stays inconclusive while the connection still migrates
    assert!(
        verdicts.iter().any(|v| v.contains("Inconclusive")),
        "transport fault verdict: {verdicts:?}"
    );
    let migrated: usize = raw.detections.iter().map(|d| d.migrations.len()).sum();
    assert!(
        migrated > 0,
        "faults during the run must migrate connections"
    );
    assert!(
        raw.detections[0].recovery_detected_at.is_some(),
        "the recovered link must be noticed by a reprobe"
    );
}

/// Flow-model edge cases: a recovery mid-collective speeds the rest up
/// without charging a detection stall, and an intra-server collective
/// ignores NIC health entirely.
#[test]
fn flow_pricing_edges() {
    use collsim::runner::run_flow;

    // fault at t=0, recovery lands mid-collective
    let text = r#"
strategy = "balance"

[topology]
servers = 2
gpus_per_server = 8
nics_per_server = 8
nic_bandwidth = 50e9

[[workload]]
kind = "all_reduce"
bytes = 10737418240

[[faults]]
time = 0.0
nic = [1, 0]
recovery_time = 0.02

[cost]
alpha = 0.0
beta = 50e9

[knobs]
fidelity = "flow"
"#;
    let scenario = scenario_from_str(text, "recovering").unwrap();
    let faulted = run_flow(&scenario, true).unwrap();
    let baseline = run_flow(&scenario, false).unwrap();
    let (m, b) = (
        faulted.collectives[0].makespan,
        baseline.collectives[0].makespan,
    );
    // degraded for the first 20 ms of a ~50 ms run, healthy after
    assert!(m > b, "the degraded window must cost something");
    assert!(
        m < b * 8.0 / 7.0,
        "recovery must claw back part of the 8/7 penalty: {m} vs {b}"
    );

    // an all-reduce confined to one server does not care about NICs
    let text = r#"
strategy = "balance"

[topology]
servers = 2
gpus_per_server = 8
nics_per_server = 8
nic_bandwidth = 50e9

[[workload]]
kind = "all_reduce"
bytes = 1073741824
participants = [0, 1, 2, 3]

[[faults]]
time = 0.0
nic = [0, 0]
permanent = true

[cost]
alpha = 0.0
beta = 50e9

[knobs]
fidelity = "flow"
"#;
    let scenario = scenario_from_str(text, "intra").unwrap();
    let faulted = run_flow(&scenario, true).unwrap();
    let baseline = run_flow(&scenario, false).unwrap();
    assert_eq!(
        faulted.collectives[0].makespan, baseline.collectives[0].makespan,
        "intra-node traffic must not be charged to NICs"
    );
}

/// The planned strategies flow through the runner end to end: a half-lost
/// server flips auto to the two-stage split and beats plain rebalancing; a
/// bandwidth staircase goes recursive. Semantics hold either way.
#[test]
fn planned_strategies_run_end_to_end() {
    let scenario = |strategy: &str, faults: &str| {
        let text = format!(
            r#"
strategy = "{strategy}"

[topology]
servers = 4
gpus_per_server = 2
nics_per_server = 4
nic_bandwidth = 1e9

[[workload]]
kind = "all_reduce"
bytes = 67108864
issue_at = 0.01

{faults}

[cost]
alpha = 0.0
beta = 4e9

[knobs]
chunk_size = 262144
"#
        );
        scenario_from_str(&text, "strategies").unwrap()
    };
    // two NICs down on server 0: X = 0.5, above the n=4 g=2 threshold
    let half_lost = "[[faults]]\ntime = 0.0\nnic = [0, 2]\npermanent = true\n\n[[faults]]\ntime = 0.0\nnic = [0, 3]\npermanent = true\n";

    let auto = run_chunk(&scenario("auto", half_lost), true).unwrap();
    assert_eq!(auto.collectives[0].strategy, "r2cc_allreduce");
    assert_eq!(auto.collectives[0].integrity, "pass");

    let balance = run_chunk(&scenario("balance", half_lost), true).unwrap();
    assert_eq!(balance.collectives[0].integrity, "pass");
    assert!(
        auto.collectives[0].makespan < balance.collectives[0].makespan,
        "the split must beat plain rebalancing at X = 0.5: {} vs {}",
        auto.collectives[0].makespan,
        balance.collectives[0].makespan
    );

    // a staircase of capacities drives the recursive decomposition
    let staircase = "[[faults]]\ntime = 0.0\nnic = [0, 2]\npermanent = true\n\n[[faults]]\ntime = 0.0\nnic = [0, 3]\npermanent = true\n\n[[faults]]\ntime = 0.0\nnic = [1, 3]\npermanent = true\n";
    let rec = run_chunk(&scenario("recursive", staircase), true).unwrap();
    assert_eq!(rec.collectives[0].strategy, "recursive");
    assert_eq!(rec.collectives[0].integrity, "pass");
    assert!(rec.collectives[0].recursive_levels.unwrap_or(0) >= 2);
}
