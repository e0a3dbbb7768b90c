//! Look-ahead prefetching from predicted next-layer gate scores.
//!
//! Prefill aggregates predicted demand across the whole token batch and
//! prefetches by activation frequency; decode prefetches the single token's
//! top predicted experts directly. Requested precision follows the next
//! layer's assignment computed over the same predictions; experts the
//! predicted assignment would skip are never fetched.

use serde::{Deserialize, Serialize};

use crate::scheduler::{PrecisionAssignment, Tier};
use crate::traces::{Precision, TokenStep};

/// How many experts to prefetch per layer transition.
///
/// `None` defers to the engine's per-layer default: the next layer's
/// critical count under a dyquant policy, the routing top-k otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrefetchConfig {
    pub t_prefetch: Option<usize>,
}

/// One prioritized fetch for the next layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchRequest {
    /// Target layer (l+1 relative to where the prediction was made).
    pub layer: usize,
    pub expert: usize,
    pub precision: Precision,
    /// Activation frequency (prefill) or predicted gate score (decode).
    pub priority: f64,
}

/// Top-k experts by predicted next-layer gate score, ties to the lower
/// index. Empty when the step carries no prediction (last layer).
pub fn predict_topk(step: &TokenStep, k: usize) -> Vec<usize> {
    match &step.predicted_next_gate_scores {
        Some(pred) => crate::topk::top_k_indices(pred, k),
        None => Vec::new(),
    }
}

/// Token-frequency prefetch for prefill: counts how many tokens predict
/// each expert in their next-layer top-`k_route`, then requests the
/// `t_prefetch` most frequent. Experts never predicted (count 0) are not
/// requested even if `t_prefetch` would reach them.
pub fn prefill_prefetch(
    steps: &[TokenStep],
    t_prefetch: usize,
    k_route: usize,
    next_assignment: &PrecisionAssignment,
) -> Vec<PrefetchRequest> {
    let mut counts = vec![0.0; next_assignment.tier.len()];
    for step in steps {
        for expert in predict_topk(step, k_route) {
            counts[expert] += 1.0;
        }
    }
    let ranked = crate::topk::top_k_indices(&counts, t_prefetch);
    build_requests(ranked, &counts, next_assignment)
}

/// Direct prefetch for decode: the top `t_prefetch` predicted experts,
/// prioritized by predicted gate score.
pub fn decode_prefetch(
    step: &TokenStep,
    t_prefetch: usize,
    next_assignment: &PrecisionAssignment,
) -> Vec<PrefetchRequest> {
    let Some(pred) = &step.predicted_next_gate_scores else {
        return Vec::new();
    };
    let ranked = crate::topk::top_k_indices(pred, t_prefetch);
    build_requests(ranked, pred, next_assignment)
}

fn build_requests(
    ranked: Vec<usize>,
    priorities: &[f64],
    next_assignment: &PrecisionAssignment,
) -> Vec<PrefetchRequest> {
    ranked
        .into_iter()
        .filter(|&e| priorities[e] > 0.0)
        .filter_map(|expert| {
            let precision = match next_assignment.tier[expert] {
                Tier::High => Precision::High,
                Tier::Low => Precision::Low,
                Tier::Skip => return None,
            };
            Some(PrefetchRequest {
                layer: next_assignment.layer,
                expert,
                precision,
                priority: priorities[expert],
            })
        })
        .collect()
}
