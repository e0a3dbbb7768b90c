//! Per-expert importance estimation, phase-adaptive.
//!
//! Prefill sees the whole prompt at once, so an expert's importance is the
//! number of critical (heavy-hitter) tokens routed to it. Decode generates
//! one token at a time, so the gate score itself is the importance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::{ModelSpec, TokenStep};

/// Inference phase a score vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Per-expert importance for one layer.
///
/// Prefill scores are integer token counts stored as `f64`; decode scores
/// are the token's gate distribution, unmodified.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub layer: usize,
    pub phase: Phase,
    pub scores: Vec<f64>,
}

/// How many of the highest-importance prompt tokens form the critical set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeavyHitterConfig {
    pub k_tokens: usize,
}

impl HeavyHitterConfig {
    /// Default: the top 20% of the prompt, at least one token.
    pub fn for_prompt_len(len: usize) -> Self {
        HeavyHitterConfig {
            k_tokens: ((0.2 * len as f64).ceil() as usize).clamp(1, len.max(1)),
        }
    }
}

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("invalid k_tokens: {requested} requested but only {available} tokens present")]
    KTokensOutOfRange { requested: usize, available: usize },
    #[error("token {token_id} is missing attention_importance")]
    MissingImportance { token_id: usize },
}

/// Selects the `k_tokens` prompt tokens with the largest attention
/// importance. Ties go to the lower token id.
pub fn select_heavy_hitters(
    steps: &[TokenStep],
    cfg: &HeavyHitterConfig,
) -> Result<BTreeSet<usize>, ImportanceError> {
    if cfg.k_tokens == 0 || cfg.k_tokens > steps.len() {
        return Err(ImportanceError::KTokensOutOfRange {
            requested: cfg.k_tokens,
            available: steps.len(),
        });
    }
    let mut ranked: Vec<(usize, f64)> = steps
        .iter()
        .map(|s| {
            s.attention_importance
                .map(|imp| (s.token_id, imp))
                .ok_or(ImportanceError::MissingImportance { token_id: s.token_id })
        })
        .collect::<Result<_, _>>()?;
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("s_i not NaN").then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(cfg.k_tokens).map(|(id, _)| id).collect())
}

/// Token-load importance: `scores[j]` counts the heavy tokens whose routed
/// set (top `k_route` gate entries) contains expert `j`. The total mass is
/// therefore `|heavy| * k_route`.
pub fn prefill_importance(
    steps: &[TokenStep],
    heavy: &BTreeSet<usize>,
    spec: &ModelSpec,
    layer: usize,
) -> ImportanceScores {
    let mut scores = vec![0.0; spec.num_experts];
    for step in steps {
        if heavy.contains(&step.token_id) {
            for expert in step.routed_experts(spec.routing_topk) {
                scores[expert] += 1.0;
            }
        }
    }
    ImportanceScores {
        layer,
        phase: Phase::Prefill,
        scores,
    }
}

/// Gate-score importance: the decode token's gate distribution as-is.
pub fn decode_importance(step: &TokenStep, layer: usize) -> ImportanceScores {
    ImportanceScores {
        layer,
        phase: Phase::Decode,
        scores: step.gate_scores.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn prefill_step(token_id: usize, s: f64, gates: Vec<f64>) -> TokenStep {
        TokenStep {
            token_id,
            gate_scores: gates,
            predicted_next_gate_scores: None,
            attention_importance: Some(s),
        }
    }

    fn uniform_gates(m: usize) -> Vec<f64> {
        vec![1.0 / m as f64; m]
    }

    #[test]
    fn heavy_hitters_direct_top2() {
        let steps = vec![
            prefill_step(0, 0.9, uniform_gates(4)),
            prefill_step(1, 0.1, uniform_gates(4)),
            prefill_step(2, 0.5, uniform_gates(4)),
        ];
        let set = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 2 }).unwrap();
        assert_eq!(set, BTreeSet::from([0, 2]));
    }

    #[test]
    fn heavy_hitters_tie_breaks_by_token_id() {
        let steps = vec![
            prefill_step(0, 0.5, uniform_gates(4)),
            prefill_step(1, 0.5, uniform_gates(4)),
            prefill_step(2, 0.5, uniform_gates(4)),
        ];
        let set = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 1 }).unwrap();
        assert_eq!(set, BTreeSet::from([0]));
    }

    #[test]
    fn heavy_hitters_k_too_large_errors() {
        let steps = vec![prefill_step(0, 0.5, uniform_gates(4))];
        assert!(select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 2 }).is_err());
    }

    #[test]
    fn heavy_hitters_match_full_sort_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..100 {
            let steps: Vec<TokenStep> = (0..50)
                .map(|i| prefill_step(i, rng.random_range(0.0..1.0), uniform_gates(4)))
                .collect();
            let got = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 10 }).unwrap();

            // Oracle: full stable sort on (-s, id), take 10.
            let mut pairs: Vec<(usize, f64)> = steps
                .iter()
                .map(|s| (s.token_id, s.attention_importance.unwrap()))
                .collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: BTreeSet<usize> = pairs.into_iter().take(10).map(|(id, _)| id).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn prefill_importance_counts_routed_heavy_tokens() {
        // Token A routes to {e1, e3}, token B to {e1, e5}.
        let mut gates_a = vec![0.0; 8];
        gates_a[1] = 0.6;
        gates_a[3] = 0.4;
        let mut gates_b = vec![0.0; 8];
        gates_b[1] = 0.7;
        gates_b[5] = 0.3;
        let steps = vec![prefill_step(0, 1.0, gates_a), prefill_step(1, 1.0, gates_b)];
        let mut spec = defaults::default_model();
        spec.routing_topk = 2;
        let heavy = BTreeSet::from([0, 1]);
        let scores = prefill_importance(&steps, &heavy, &spec, 0);
        assert_eq!(scores.scores[1], 2.0);
        assert_eq!(scores.scores[3], 1.0);
        assert_eq!(scores.scores[5], 1.0);
        assert_eq!(scores.scores.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn prefill_importance_empty_heavy_set_is_zero() {
        let steps = vec![prefill_step(0, 1.0, uniform_gates(8))];
        let spec = defaults::default_model();
        let scores = prefill_importance(&steps, &BTreeSet::new(), &spec, 0);
        assert!(scores.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn prefill_importance_matches_double_loop_oracle() {
        let mut spec = defaults::default_model();
        spec.num_experts = 8;
        spec.routing_topk = 2;
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let steps: Vec<TokenStep> = (0..200)
            .map(|i| {
                let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                prefill_step(i, rng.random_range(0.0..1.0), raw.iter().map(|v| v / sum).collect())
            })
            .collect();
        let heavy = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 40 }).unwrap();
        let got = prefill_importance(&steps, &heavy, &spec, 3);

        // Oracle: explicit double loop over (heavy token, routed expert).
        let mut expected = vec![0.0; 8];
        for step in &steps {
            if heavy.contains(&step.token_id) {
                for e in step.routed_experts(2) {
                    expected[e] += 1.0;
                }
            }
        }
        assert_eq!(got.scores, expected);
        assert_eq!(got.scores.iter().sum::<f64>(), (heavy.len() * 2) as f64);
        assert_eq!(got.layer, 3);
        assert_eq!(got.phase, Phase::Prefill);
    }

    #[test]
    fn decode_importance_is_identity() {
        let step = TokenStep {
            token_id: 9,
            gate_scores: vec![0.7, 0.3, 0.0, 0.0],
            predicted_next_gate_scores: None,
            attention_importance: None,
        };
        let scores = decode_importance(&step, 2);
        assert_eq!(scores.scores, step.gate_scores);
        assert_eq!(scores.phase, Phase::Decode);
    }

    proptest! {
        /// Total mass invariant: sum of prefill scores is |heavy| * k_route.
        #[test]
        fn prefill_mass_invariant(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = rng.random_range(2usize..12);
            let k_route = rng.random_range(1usize..=m.min(4));
            let n = rng.random_range(4usize..60);
            let steps: Vec<TokenStep> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    prefill_step(i, rng.random_range(0.0..1.0), raw.iter().map(|v| v / sum).collect())
                })
                .collect();
            let k_tokens = rng.random_range(1usize..=n);
            let heavy = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens }).unwrap();
            let mut spec = defaults::default_model();
            spec.num_experts = m;
            spec.routing_topk = k_route;
            let scores = prefill_importance(&steps, &heavy, &spec, 0);
            prop_assert_eq!(scores.scores.iter().sum::<f64>(), (k_tokens * k_route) as f64);
        }

        /// Permuting expert indices permutes prefill scores identically.
        #[test]
        fn prefill_equivariance(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1000));
            let m = 6usize;
            let n = 20usize;
            let steps: Vec<TokenStep> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    prefill_step(i, rng.random_range(0.0..1.0), raw.iter().map(|v| v / sum).collect())
                })
                .collect();
            // Rotation keeps relative order unambiguous (no ties in random draws).
            let perm: Vec<usize> = (0..m).map(|j| (j + 2) % m).collect();
            let permuted: Vec<TokenStep> = steps
                .iter()
                .map(|s| {
                    let mut gates = vec![0.0; m];
                    for (j, &p) in perm.iter().enumerate() {
                        gates[p] = s.gate_scores[j];
                    }
                    prefill_step(s.token_id, s.attention_importance.unwrap(), gates)
                })
                .collect();
            let mut spec = defaults::default_model();
            spec.num_experts = m;
            spec.routing_topk = 2;
            let heavy = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: 5 }).unwrap();
            let base = prefill_importance(&steps, &heavy, &spec, 0);
            let moved = prefill_importance(&permuted, &heavy, &spec, 0);
            for (j, &p) in perm.iter().enumerate() {
                prop_assert_eq!(base.scores[j], moved.scores[p]);
            }
        }

        /// Heavy-hitter selection only depends on the order of s_i, so any
        /// positive monotone transform leaves the selection unchanged.
        #[test]
        fn heavy_hitters_monotone_transform_invariant(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(5000));
            let n = rng.random_range(3usize..40);
            let steps: Vec<TokenStep> = (0..n)
                .map(|i| prefill_step(i, rng.random_range(0.0..1.0), vec![1.0]))
                .collect();
            let transformed: Vec<TokenStep> = steps
                .iter()
                .map(|s| {
                    let v = s.attention_importance.unwrap();
                    prefill_step(s.token_id, (3.0 * v).exp(), vec![1.0])
                })
                .collect();
            let k = rng.random_range(1usize..=n);
            let a = select_heavy_hitters(&steps, &HeavyHitterConfig { k_tokens: k }).unwrap();
            let b = select_heavy_hitters(&transformed, &HeavyHitterConfig { k_tokens: k }).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
