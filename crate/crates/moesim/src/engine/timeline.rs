//! Timed events and run metrics emitted by the simulator.

use serde::{Deserialize, Serialize};

use crate::importance::Phase;
use crate::traces::Precision;

/// Whether a transfer was requested on demand or speculatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferClass {
    Demand,
    Prefetch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    AttentionCompute,
    ExpertCompute {
        expert: usize,
        precision: Precision,
    },
    Transfer {
        expert: usize,
        precision: Precision,
        bytes: u64,
        class: TransferClass,
    },
    /// Device idle interval: compute waiting on an incomplete transfer.
    Stall,
}

/// One interval on the device or the host-device link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: f64,
    pub end: f64,
    pub phase: Phase,
    /// Decode step index; 0 for prefill events.
    pub step: usize,
    pub layer: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Chronological event log of one simulation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    pub fn total_stall(&self, phase: Phase) -> f64 {
        let total: f64 = self
            .events
            .iter()
            .filter(|e| e.phase == phase && matches!(e.kind, EventKind::Stall))
            .map(|e| e.end - e.start)
            .sum();
        // An empty sum can be the IEEE additive identity -0.0; report +0.0.
        total + 0.0
    }

    pub fn transferred_bytes(&self) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Transfer { bytes, .. } => Some(bytes),
                _ => None,
            })
            .sum()
    }
}

/// Summary metrics for one (trace, hardware, policy) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Completion time of the last prefill layer (first-token sampling is
    /// modeled as zero-cost).
    pub ttft: f64,
    /// Mean decode-step span; 0 when the trace has no decode steps.
    pub tpot: f64,
    /// Fraction of issued prefetch transfers that later served a demand.
    pub prefetch_hit_rate: f64,
    /// Fraction of demand lookups served from the cache.
    pub cache_hit_rate: f64,
    pub bytes_transferred: u64,
    pub bytes_prefill: u64,
    pub bytes_decode: u64,
    /// Mean over decode (step, layer) cells of the routed gate mass executed
    /// at high precision, with low-precision execution credited at the
    /// configured discount; skipped experts contribute nothing.
    pub retained_gate_mass: f64,
    pub stall_time_prefill: f64,
    pub stall_time_decode: f64,
    pub demand_lookups: u64,
    pub demand_hits: u64,
    pub prefetch_issued: u64,
    pub prefetch_useful: u64,
}
