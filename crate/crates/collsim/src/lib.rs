//! Planner and discrete-event simulator for fault-tolerant multi-NIC
//! collective communication: failure detection and triangulation, lossless
//! connection migration, traffic rebalancing, failure-aware all-reduce
//! partitioning, ring re-ranking, and a scenario runner that verifies every
//! executed schedule against a brute-force oracle.
//!
//! The `book/` directory holds a guide with runnable examples; its snippets
//! are compiled and executed as part of `cargo test --doc`.

pub mod allreduce_opt;
pub mod balance;
pub mod collectives;
pub mod cost_model;
pub mod engine;
pub mod faults;
pub mod health;
pub mod ids;
pub mod plots;
pub mod report;
pub mod rerank;
pub mod runner;
pub mod scenario;
pub mod topology;
pub mod transport;

// The guide's code blocks double as doc-tests so the book and the crate
// cannot drift apart.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/hot-repair.md")]
    mod hot_repair {}
    #[doc = include_str!("../../../book/src/balance.md")]
    mod balance {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/rerank.md")]
    mod rerank {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
