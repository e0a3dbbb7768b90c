//! Synthetic trace generator.
//!
//! Gate vectors are Zipf-weighted Dirichlet draws: per layer, a random
//! expert permutation decides which experts are hot, so hotspots are stable
//! within one request but shift between seeds. Token importance is a
//! two-regime draw (a heavy-hitter subset gets high s_i). Predictions mix
//! the true next-layer gates with independent noise at weight ρ.
//!
//! Generation is a pure function of (spec, config): draws happen in a fixed
//! documented order, so identical inputs give byte-identical traces.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};

use super::{InferenceTrace, ModelSpec, SynthesisConfig, TokenStep, TraceError};

const HEAVY_IMPORTANCE_RANGE: (f64, f64) = (0.6, 1.0);
const LOW_IMPORTANCE_RANGE: (f64, f64) = (0.0, 0.15);

/// Synthesizes a trace for `spec` under `cfg`.
///
/// Deterministic for a fixed `cfg.rng_seed`. Draw order: per-layer expert
/// permutations, heavy-hitter token choice, per-token importance, prefill
/// gates (layer-major), decode gates (step-major), prefill predictions,
/// decode predictions.
pub fn generate_trace(spec: &ModelSpec, cfg: &SynthesisConfig) -> Result<InferenceTrace, TraceError> {
    spec.validate()?;
    cfg.validate()?;

    let layers = spec.num_layers;
    let experts = spec.num_experts;
    let tokens = cfg.num_prompt_tokens;
    let steps = cfg.num_decode_steps;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);

    // Zipf-shaped Dirichlet concentration, permuted per layer.
    let zipf: Vec<f64> = (0..experts)
        .map(|rank| ((rank + 1) as f64).powf(-cfg.skew_alpha))
        .collect();
    let mut concentration = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut order: Vec<usize> = (0..experts).collect();
        order.shuffle(&mut rng);
        let mut conc = vec![0.0; experts];
        for (rank, &expert) in order.iter().enumerate() {
            conc[expert] = zipf[rank];
        }
        concentration.push(conc);
    }

    // Heavy-hitter subset of prompt tokens.
    let num_heavy = ((cfg.heavy_hitter_fraction * tokens as f64).ceil() as usize).min(tokens);
    let mut token_order: Vec<usize> = (0..tokens).collect();
    token_order.shuffle(&mut rng);
    let mut is_heavy = vec![false; tokens];
    for &t in token_order.iter().take(num_heavy) {
        is_heavy[t] = true;
    }

    // One importance scalar per prompt token, repeated across layers.
    let importance: Vec<f64> = (0..tokens)
        .map(|i| {
            let (lo, hi) = if is_heavy[i] {
                HEAVY_IMPORTANCE_RANGE
            } else {
                LOW_IMPORTANCE_RANGE
            };
            rng.random_range(lo..hi)
        })
        .collect();

    let mut prefill_gates = Vec::with_capacity(layers);
    for conc in &concentration {
        let mut row = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            row.push(dirichlet(conc, &mut rng));
        }
        prefill_gates.push(row);
    }

    let mut decode_gates = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut per_layer = Vec::with_capacity(layers);
        for conc in &concentration {
            per_layer.push(dirichlet(conc, &mut rng));
        }
        decode_gates.push(per_layer);
    }

    let rho = cfg.predictor_fidelity;
    let uniform_conc = vec![1.0; experts];
    let mut prefill = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut row = Vec::with_capacity(tokens);
        for i in 0..tokens {
            let predicted = if l + 1 < layers {
                Some(predict(&prefill_gates[l + 1][i], rho, &uniform_conc, &mut rng))
            } else {
                None
            };
            row.push(TokenStep {
                token_id: i,
                gate_scores: prefill_gates[l][i].clone(),
                predicted_next_gate_scores: predicted,
                attention_importance: Some(importance[i]),
            });
        }
        prefill.push(row);
    }

    let mut decode = Vec::with_capacity(steps);
    for (s, step_gates) in decode_gates.iter().enumerate() {
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let predicted = if l + 1 < layers {
                Some(predict(&step_gates[l + 1], rho, &uniform_conc, &mut rng))
            } else {
                None
            };
            per_layer.push(TokenStep {
                token_id: tokens + s,
                gate_scores: decode_gates[s][l].clone(),
                predicted_next_gate_scores: predicted,
                attention_importance: None,
            });
        }
        decode.push(per_layer);
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "moesim-synthetic".into());
    metadata.insert("rng_seed".into(), cfg.rng_seed.to_string());
    metadata.insert("skew_alpha".into(), cfg.skew_alpha.to_string());
    metadata.insert(
        "heavy_hitter_fraction".into(),
        cfg.heavy_hitter_fraction.to_string(),
    );
    metadata.insert(
        "predictor_fidelity".into(),
        cfg.predictor_fidelity.to_string(),
    );

    let trace = InferenceTrace {
        model: spec.clone(),
        prefill,
        decode,
        metadata,
    };
    trace.validate()?;
    Ok(trace)
}

fn dirichlet(concentration: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            let gamma = Gamma::new(a, 1.0).expect("positive shape");
            // Guard against underflow to exactly 0 at tiny shapes.
            gamma.sample(rng).max(f64::MIN_POSITIVE)
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    for v in &mut draws {
        *v /= sum;
    }
    draws
}

/// Mixes the true next-layer gates with independent uniform-Dirichlet noise
/// at weight ρ and renormalizes. ρ=1 short-circuits to an exact copy.
fn predict(truth: &[f64], rho: f64, uniform_conc: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    if rho >= 1.0 {
        return truth.to_vec();
    }
    let noise = dirichlet(uniform_conc, rng);
    let mut mixed: Vec<f64> = truth
        .iter()
        .zip(&noise)
        .map(|(&t, &n)| rho * t + (1.0 - rho) * n)
        .collect();
    let sum: f64 = mixed.iter().sum();
    for v in &mut mixed {
        *v /= sum;
    }
    mixed
}
