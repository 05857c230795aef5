//! Topology-aware logical re-ranking: greedy bridge repair of ring orders
//! under asymmetric rail failures.
//!
//! When adjacent servers lose different rails their shared bandwidth drops to
//! the intersection of surviving rails. Rather than resynthesizing the whole
//! ring, pairs whose intersection falls below the cluster-wide floor are
//! separated by relocating a bridge node with broad rail connectivity between
//! them. Only the problematic edges change, so most connections survive.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::health::HealthMap;
use crate::topology::{ClusterTopology, RailId, ServerId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalRing {
    pub order: Vec<ServerId>,
    pub rail_sets: BTreeMap<ServerId, BTreeSet<RailId>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RerankError {
    #[error("ring is empty")]
    EmptyRing,
    #[error("server {0:?} appears in the ring without a rail set")]
    MissingRailSet(ServerId),
}

impl LogicalRing {
    pub fn new(
        order: Vec<ServerId>,
        rail_sets: BTreeMap<ServerId, BTreeSet<RailId>>,
    ) -> Result<Self, RerankError> {
        if order.is_empty() {
            return Err(RerankError::EmptyRing);
        }
        for s in &order {
            if !rail_sets.contains_key(s) {
                return Err(RerankError::MissingRailSet(*s));
            }
        }
        Ok(LogicalRing { order, rail_sets })
    }

    /// Snapshot the current healthy rails of every server.
    pub fn from_topology(topo: &ClusterTopology, health: &HealthMap) -> Self {
        let order: Vec<ServerId> = (0..topo.servers()).map(ServerId).collect();
        let rail_sets = order
            .iter()
            .map(|&s| (s, topo.rail_set(health, s)))
            .collect();
        LogicalRing { order, rail_sets }
    }

    fn set(&self, s: ServerId) -> &BTreeSet<RailId> {
        &self.rail_sets[&s]
    }

    fn intersection_size(&self, a: ServerId, b: ServerId) -> usize {
        self.set(a).intersection(self.set(b)).count()
    }

    /// Smallest adjacent rail intersection around the ring.
    pub fn min_adjacent_intersection(&self) -> usize {
        let k = self.order.len();
        (0..k)
            .map(|i| self.intersection_size(self.order[i], self.order[(i + 1) % k]))
            .min()
            .unwrap_or(0)
    }
}

/// The capacity floor: the smallest healthy-rail count over all ring members.
/// No edge can do better than its weaker endpoint, so this is the best
/// min-intersection any reordering could hope for.
pub fn global_floor(ring: &LogicalRing) -> Result<usize, RerankError> {
    if ring.order.is_empty() {
        return Err(RerankError::EmptyRing);
    }
    Ok(ring.order.iter().map(|s| ring.set(*s).len()).min().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub u: ServerId,
    pub v: ServerId,
    /// How far the edge falls below the floor.
    pub gap: usize,
    /// Ring position of `u` (tie-break).
    pub position: usize,
}

/// All adjacent pairs whose rail intersection falls below the floor, worst
/// gap first, ties by ring position.
pub fn find_candidates(ring: &LogicalRing) -> Vec<CandidatePair> {
    let Ok(floor) = global_floor(ring) else {
        return Vec::new();
    };
    let k = ring.order.len();
    let mut out = Vec::new();
    for i in 0..k {
        let (u, v) = (ring.order[i], ring.order[(i + 1) % k]);
        let inter = ring.intersection_size(u, v);
        if inter < floor {
            out.push(CandidatePair {
                u,
                v,
                gap: floor - inter,
                position: i,
            });
        }
    }
    out.sort_by(|a, b| b.gap.cmp(&a.gap).then(a.position.cmp(&b.position)));
    out
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RerankReport {
    /// (bridge, between u, v) relocations actually applied.
    pub relocations: Vec<(ServerId, ServerId, ServerId)>,
    /// Candidate pairs left unrepaired (no valid bridge, or no longer
    /// adjacent after earlier relocations).
    pub unrepaired: Vec<CandidatePair>,
    pub floor: usize,
    pub min_intersection_before: usize,
    pub min_intersection_after: usize,
}

/// Greedy bridge repair. For every sub-floor pair (worst first) the ring is
/// scanned in its current order for the first node whose insertion between
/// the pair keeps both new edges at the floor and whose removal does not
/// create a new sub-floor edge. Pairs without such a bridge stay as they
/// are; this is best-effort, never an error.
pub fn rerank(ring: &LogicalRing) -> (LogicalRing, RerankReport) {
    let mut out = ring.clone();
    let mut report = RerankReport {
        floor: global_floor(ring).unwrap_or(0),
        min_intersection_before: ring.min_adjacent_intersection(),
        ..RerankReport::default()
    };
    let floor = report.floor;
    let candidates = find_candidates(ring);

    for cand in candidates {
        let k = out.order.len();
        // earlier relocations may have moved u or v apart; report, don't fix
        let pos_u = out.order.iter().position(|&s| s == cand.u).unwrap();
        if out.order[(pos_u + 1) % k] != cand.v {
            report.unrepaired.push(cand);
            continue;
        }

        let mut bridge = None;
        for &w in out.order.iter() {
            if w == cand.u || w == cand.v {
                continue;
            }
            let pos_w = out.order.iter().position(|&s| s == w).unwrap();
            let prev = out.order[(pos_w + k - 1) % k];
            let next = out.order[(pos_w + 1) % k];
            let new_cap = out
                .intersection_size(cand.u, w)
                .min(out.intersection_size(w, cand.v));
            let removal_cap = out.intersection_size(prev, next);
            if new_cap >= floor && removal_cap >= floor {
                bridge = Some(w);
                break;
            }
        }

        match bridge {
            Some(w) => {
                let pos_w = out.order.iter().position(|&s| s == w).unwrap();
                out.order.remove(pos_w);
                let pos_u = out.order.iter().position(|&s| s == cand.u).unwrap();
                out.order.insert(pos_u + 1, w);
                report.relocations.push((w, cand.u, cand.v));
            }
            None => report.unrepaired.push(cand),
        }
    }

    report.min_intersection_after = out.min_adjacent_intersection();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(order: &[usize], sets: &[&[usize]]) -> LogicalRing {
        let order: Vec<ServerId> = order.iter().map(|&i| ServerId(i)).collect();
        let rail_sets = order
            .iter()
            .zip(sets)
            .map(|(&s, rails)| (s, rails.iter().map(|&r| RailId(r)).collect()))
            .collect();
        LogicalRing { order, rail_sets }
    }

    #[test]
    fn floor_is_the_minimum_cardinality() {
        let r = ring(&[0, 1, 2, 3], &[&[0, 1], &[1], &[0], &[0, 1]]);
        assert_eq!(global_floor(&r).unwrap(), 1);

        let healthy = ring(
            &[0, 1],
            &[&[0, 1, 2, 3, 4, 5, 6, 7], &[0, 1, 2, 3, 4, 5, 6, 7]],
        );
        assert_eq!(global_floor(&healthy).unwrap(), 8);

        let empty = LogicalRing {
            order: vec![],
            rail_sets: BTreeMap::new(),
        };
        assert_eq!(global_floor(&empty), Err(RerankError::EmptyRing));
    }

    #[test]
    fn healthy_ring_has_no_candidates() {
        let r = ring(&[0, 1, 2], &[&[0, 1], &[0, 1], &[0, 1]]);
        assert!(find_candidates(&r).is_empty());
    }

    #[test]
    fn disjoint_neighbors_become_a_candidate() {
        let r = ring(&[0, 1, 2, 3], &[&[0, 1], &[1], &[0], &[0, 1]]);
        let c = find_candidates(&r);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].u, c[0].v, c[0].gap), (ServerId(1), ServerId(2), 1));
    }

    #[test]
    fn worst_gap_sorts_first() {
        // floor 2; edge (1,2) has intersection 0 (gap 2), edge (3,0) has 1 (gap 1)
        let r = ring(&[0, 1, 2, 3], &[&[0, 1, 4], &[0, 1], &[2, 3], &[2, 3]]);
        // rail sets: |S0|=3, others 2 -> floor 2
        // edges: (0,1): {0,1} = 2 ok; (1,2): {} gap 2; (2,3): {2,3} ok; (3,0): {} wait
        let c = find_candidates(&r);
        assert!(c.len() >= 2);
        assert!(c[0].gap >= c[c.len() - 1].gap);
    }

    #[test]
    fn worked_four_node_repair() {
        let r = ring(&[0, 1, 2, 3], &[&[0, 1], &[1], &[0], &[0, 1]]);
        let (fixed, report) = rerank(&r);
        let order: Vec<usize> = fixed.order.iter().map(|s| s.0).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
        assert_eq!(
            report.relocations,
            vec![(ServerId(0), ServerId(1), ServerId(2))]
        );
        assert!(fixed.min_adjacent_intersection() >= global_floor(&r).unwrap());
        assert!(report.unrepaired.is_empty());
    }

    #[test]
    fn unrepairable_pair_is_left_alone_and_reported() {
        // both neighbors of the bad pair have nothing in common with anyone
        let r = ring(&[0, 1, 2], &[&[0], &[1], &[2]]);
        let (fixed, report) = rerank(&r);
        assert_eq!(fixed.order, r.order);
        assert!(!report.unrepaired.is_empty());
    }

    #[test]
    fn rerank_is_idempotent_once_repaired() {
        let r = ring(&[0, 1, 2, 3], &[&[0, 1], &[1], &[0], &[0, 1]]);
        let (once, _) = rerank(&r);
        assert!(find_candidates(&once).is_empty());
        let (twice, report) = rerank(&once);
        assert_eq!(once.order, twice.order);
        assert!(report.relocations.is_empty());
    }

    #[test]
    fn output_is_always_a_permutation() {
        let r = ring(
            &[0, 1, 2, 3, 4, 5],
            &[&[0, 1, 2], &[0], &[1], &[2], &[0, 1, 2], &[0, 2]],
        );
        let (fixed, _) = rerank(&r);
        let mut a = r.order.clone();
        let mut b = fixed.order.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(fixed.min_adjacent_intersection() >= r.min_adjacent_intersection());
    }
}
