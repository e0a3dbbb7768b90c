//! Depth-aware precision scheduling.
//!
//! A cosine schedule sets the fraction of experts kept at high precision per
//! layer: near 1 at the first layers, decaying smoothly to λ at the last.
//! The remaining experts drop to the policy's low tier — low precision in a
//! "4/2" configuration, skipped entirely in "4/0".

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::importance::ImportanceScores;
use crate::traces::ModelSpec;

/// Per-expert execution tier for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Low,
    Skip,
}

/// What sub-critical experts become.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowTier {
    /// "4/2": keep sub-critical experts at low precision.
    Low,
    /// "4/0": bypass sub-critical experts entirely.
    Skip,
}

impl LowTier {
    pub fn tier(self) -> Tier {
        match self {
            LowTier::Low => Tier::Low,
            LowTier::Skip => Tier::Skip,
        }
    }
}

/// Scheduling policy: overall retention knob plus the sub-critical tier.
///
/// λ controls the layer-averaged retention: the cosine schedule averages to
/// (1+λ)/2 across layers, so a target mean retention r̄ maps to λ = 2r̄ − 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub lambda: f64,
    pub low_tier: LowTier,
}

/// The scheduler's output for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionAssignment {
    pub layer: usize,
    /// Tier per expert index; exactly `high_count` entries are `High`.
    pub tier: Vec<Tier>,
    /// Number of experts kept at high precision (t_l).
    pub high_count: usize,
}

impl PrecisionAssignment {
    /// All experts at high precision — what non-dyquant policies execute.
    pub fn uniform_high(layer: usize, num_experts: usize) -> Self {
        PrecisionAssignment {
            layer,
            tier: vec![Tier::High; num_experts],
            high_count: num_experts,
        }
    }
}

/// Retention ratio r(l) = (1-λ)·(cos(π·l/(L-1))+1)/2 + λ.
///
/// r(0) = 1 and r(L-1) = λ exactly; r is non-increasing in l. A
/// single-layer model degenerates to r(0) = 1.
pub fn retention_ratio(layer: usize, num_layers: usize, lambda: f64) -> f64 {
    debug_assert!(layer < num_layers);
    if num_layers == 1 {
        return 1.0;
    }
    if layer == 0 {
        return 1.0;
    }
    if layer == num_layers - 1 {
        return lambda;
    }
    let phase = PI * layer as f64 / (num_layers - 1) as f64;
    (1.0 - lambda) * (phase.cos() + 1.0) / 2.0 + lambda
}

/// Critical-expert count t_l = ⌈r(l)·M⌉, exactly as the schedule dictates
/// (0 at the last layer when λ = 0).
pub fn critical_count(layer: usize, num_layers: usize, lambda: f64, num_experts: usize) -> usize {
    (retention_ratio(layer, num_layers, lambda) * num_experts as f64).ceil() as usize
}

/// The count the engine executes with: ⌈r(l)·M⌉ clamped to at least one, so
/// the top-scoring expert always runs at high precision and no layer
/// degenerates to an all-skipped output under λ = 0.
pub fn executed_critical_count(
    layer: usize,
    num_layers: usize,
    lambda: f64,
    num_experts: usize,
) -> usize {
    critical_count(layer, num_layers, lambda, num_experts).clamp(1, num_experts)
}

/// Marks the `t_l` highest-importance experts `High` (ties to the lower
/// index) and everything else as the policy's low tier.
///
/// In decode, experts outside the routed set can land in the high tier when
/// t_l exceeds the number of positive scores; that is harmless because the
/// engine only ever touches routed experts.
pub fn assign_precisions(
    scores: &ImportanceScores,
    layer: usize,
    spec: &ModelSpec,
    policy: &PolicyConfig,
) -> PrecisionAssignment {
    debug_assert_eq!(scores.layer, layer);
    debug_assert_eq!(scores.scores.len(), spec.num_experts);
    let count = executed_critical_count(layer, spec.num_layers, policy.lambda, spec.num_experts);
    let mut tier = vec![policy.low_tier.tier(); spec.num_experts];
    for expert in crate::topk::top_k_indices(&scores.scores, count) {
        tier[expert] = Tier::High;
    }
    PrecisionAssignment {
        layer,
        tier,
        high_count: count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Phase;
    use proptest::prelude::*;

    fn scores(layer: usize, values: Vec<f64>) -> ImportanceScores {
        ImportanceScores {
            layer,
            phase: Phase::Decode,
            scores: values,
        }
    }

    fn spec_with(layers: usize, experts: usize) -> ModelSpec {
        let mut spec = crate::defaults::default_model();
        spec.num_layers = layers;
        spec.num_experts = experts;
        spec
    }

    #[test]
    fn first_layer_retains_everything() {
        for lambda in [0.0, 0.3, 1.0] {
            for layers in [2, 9, 33] {
                assert_eq!(retention_ratio(0, layers, lambda), 1.0);
            }
        }
    }

    #[test]
    fn last_layer_retains_lambda() {
        assert_eq!(retention_ratio(7, 8, 0.5), 0.5);
        assert_eq!(retention_ratio(1, 2, 0.0), 0.0);
    }

    #[test]
    fn midpoint_of_odd_depth() {
        // l = (L-1)/2 has cos(π/2) = 0, so r = (1+λ)/2.
        assert!((retention_ratio(4, 9, 0.5) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_layer_degenerates_to_one() {
        assert_eq!(retention_ratio(0, 1, 0.25), 1.0);
    }

    #[test]
    fn critical_count_examples() {
        // M=8, r=0.75 on the middle layer of an odd stack.
        assert_eq!(critical_count(4, 9, 0.5, 8), 6);
        assert_eq!(critical_count(0, 32, 0.9, 8), 8);
        // λ=0 at the last layer: the raw schedule reaches zero...
        assert_eq!(critical_count(31, 32, 0.0, 8), 0);
        // ...and the engine-facing count keeps one expert alive.
        assert_eq!(executed_critical_count(31, 32, 0.0, 8), 1);
    }

    #[test]
    fn per_layer_sequence_matches_formula_oracle() {
        let (layers, lambda, m) = (32usize, 0.5f64, 8usize);
        let mut ratio_sum = 0.0;
        for l in 0..layers {
            let oracle_r = (1.0 - lambda) * ((PI * l as f64 / (layers - 1) as f64).cos() + 1.0)
                / 2.0
                + lambda;
            let r = retention_ratio(l, layers, lambda);
            assert!((r - oracle_r).abs() < 1e-12, "layer {l}: {r} vs {oracle_r}");
            assert_eq!(critical_count(l, layers, lambda, m), (oracle_r * m as f64).ceil() as usize);
            ratio_sum += r;
        }
        // The cosine terms cancel pairwise, so the layer mean is (1+λ)/2.
        assert!((ratio_sum / layers as f64 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn assignment_picks_top_scores() {
        let spec = spec_with(2, 4);
        let policy = PolicyConfig { lambda: 0.5, low_tier: LowTier::Low };
        // Layer 1 of 2: r = λ = 0.5, t = ceil(2) = 2.
        let a = assign_precisions(&scores(1, vec![5.0, 0.0, 3.0, 1.0]), 1, &spec, &policy);
        assert_eq!(a.high_count, 2);
        assert_eq!(a.tier, vec![Tier::High, Tier::Low, Tier::High, Tier::Low]);
    }

    #[test]
    fn lambda_one_is_uniform_high() {
        let spec = spec_with(6, 8);
        let policy = PolicyConfig { lambda: 1.0, low_tier: LowTier::Skip };
        for layer in 0..6 {
            let a = assign_precisions(&scores(layer, vec![0.0; 8]), layer, &spec, &policy);
            assert_eq!(a.high_count, 8);
            assert!(a.tier.iter().all(|&t| t == Tier::High));
        }
    }

    #[test]
    fn assignment_matches_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let spec = spec_with(9, 8);
        let policy = PolicyConfig { lambda: 0.5, low_tier: LowTier::Low };
        for trial in 0..100 {
            let layer = 4; // t = ceil(0.75 * 8) = 6
            let vals: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..10.0)).collect();
            let a = assign_precisions(&scores(layer, vals.clone()), layer, &spec, &policy);
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&x, &y| vals[y].partial_cmp(&vals[x]).unwrap().then(x.cmp(&y)));
            for (rank, &e) in order.iter().enumerate() {
                let expected = if rank < 6 { Tier::High } else { Tier::Low };
                assert_eq!(a.tier[e], expected, "trial {trial} expert {e}");
            }
        }
    }

    proptest! {
        /// r is non-increasing in depth.
        #[test]
        fn retention_monotone(lambda in 0.0f64..=1.0, layers in 2usize..64) {
            for l in 0..layers - 1 {
                prop_assert!(
                    retention_ratio(l, layers, lambda) >= retention_ratio(l + 1, layers, lambda)
                );
            }
        }

        /// Scaling all scores by a positive constant leaves the high set fixed.
        #[test]
        fn assignment_scale_invariant(seed in 0u64..200, scale in 0.1f64..50.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let spec = spec_with(5, 8);
            let policy = PolicyConfig { lambda: 0.3, low_tier: LowTier::Skip };
            let vals: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
            let layer = 3;
            let a = assign_precisions(&scores(layer, vals), layer, &spec, &policy);
            let b = assign_precisions(&scores(layer, scaled), layer, &spec, &policy);
            prop_assert_eq!(a.tier, b.tier);
        }
    }
}
