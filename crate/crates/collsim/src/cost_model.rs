//! The alpha-beta link-time model and the closed-form collective traffic and
//! time formulas everything else leans on.
//!
//! Conventions throughout the crate: sizes in bytes, times in seconds,
//! bandwidths in bytes/s. With `alpha = 0` the model is bandwidth-only, which
//! is what the analytical formulas here assume; the alpha-augmented variant
//! only matters for runtime strategy selection on small messages.

use serde::{Deserialize, Serialize};

use crate::collectives::CollectiveKind;

/// Per-link latency/bandwidth pair of the alpha-beta model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Seconds per message.
    pub alpha: f64,
    /// Bytes per second.
    pub beta: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        // 2 microseconds is on the order of one RDMA round-trip.
        CostParams {
            alpha: 2e-6,
            beta: 50e9,
        }
    }
}

impl CostParams {
    pub fn bandwidth_only(beta: f64) -> Self {
        CostParams { alpha: 0.0, beta }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 {
            return Err(format!("cost.alpha must be >= 0, got {}", self.alpha));
        }
        if self.beta <= 0.0 {
            return Err(format!("cost.beta must be > 0, got {}", self.beta));
        }
        Ok(())
    }
}

/// Time to move `size` bytes over one link: `alpha + size/beta`.
pub fn link_time(size: u64, p: &CostParams) -> f64 {
    p.alpha + size as f64 / p.beta
}

/// Ring AllReduce over `n*g` ranks moving `d` bytes per rank at per-server
/// aggregate bandwidth `b`: `2(ng-1)/(ng) * d/b`.
pub fn ring_allreduce_time(n: usize, g: usize, d: f64, b: f64) -> f64 {
    let k = (n * g) as f64;
    assert!(n * g >= 2, "ring needs at least 2 ranks");
    assert!(b > 0.0);
    2.0 * (k - 1.0) / k * d / b
}

/// Semantic lower bound on what one server must push across the fabric for a
/// collective of size `d_total`, over `n` servers. Broadcast is counted at
/// the root.
pub fn min_cross_server_traffic(kind: CollectiveKind, d_total: f64, n: usize) -> f64 {
    assert!(n >= 2, "cross-server traffic needs at least 2 servers");
    let frac = (n as f64 - 1.0) / n as f64;
    match kind {
        CollectiveKind::ReduceScatter | CollectiveKind::AllGather | CollectiveKind::Reduce => {
            frac * d_total
        }
        CollectiveKind::AllReduce => 2.0 * frac * d_total,
        CollectiveKind::Broadcast | CollectiveKind::SendRecv => d_total,
        CollectiveKind::AllToAll => frac * d_total,
    }
}

/// Send-or-receive volume of the degraded server when a fraction `y` of the
/// data goes to the partial path: `2(1-y)d + yd`. At `y = 0` this is the
/// plain ring's `2d`; at `y = 1` only the broadcast's `d` remains.
pub fn bottleneck_load(y: f64, d: f64) -> f64 {
    assert!((0.0..=1.0).contains(&y), "y must be in [0,1]");
    2.0 * (1.0 - y) * d + y * d
}
