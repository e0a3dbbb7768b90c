//! Trace data model: the replayable record of one inference request.
//!
//! A trace carries, for every (phase, step, layer, token), the router's gate
//! distribution, the predicted gate distribution for the next layer, and —
//! for prefill tokens — an aggregated attention-importance scalar. Policies
//! consume traces; nothing in this crate runs a real model. The on-disk
//! format is line-delimited JSON (see [`format`]) so an external recorder
//! can produce compatible traces.

mod format;
mod synth;

pub use format::{load_trace, save_trace, FORMAT_VERSION};
pub use synth::generate_trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance when checking that stored score vectors are distributions.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Storable / transferable precision of an expert's weights.
///
/// `Skip` is deliberately not a precision: skipped experts are never stored,
/// transferred, or computed, so they never reach the cache or the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    High,
    Low,
}

/// Bytes per expert at each storable precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionBytes {
    pub high: u64,
    pub low: u64,
}

impl PrecisionBytes {
    pub fn get(&self, precision: Precision) -> u64 {
        match precision {
            Precision::High => self.high,
            Precision::Low => self.low,
        }
    }
}

/// Static shape of the model a trace was recorded from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of transformer layers (L).
    pub num_layers: usize,
    /// Experts per layer (M), uniform across layers.
    pub num_experts: usize,
    /// Router top-k: experts executed per token per layer.
    pub routing_topk: usize,
    /// Weight bytes per expert at each precision.
    pub expert_bytes: PrecisionBytes,
    /// Non-expert (attention etc.) bytes per layer; resident, never offloaded.
    pub attention_bytes_per_layer: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.num_layers == 0 {
            return Err(TraceError::invalid("num_layers", "must be at least 1"));
        }
        if self.num_experts == 0 {
            return Err(TraceError::invalid("num_experts", "must be at least 1"));
        }
        if self.routing_topk == 0 || self.routing_topk > self.num_experts {
            return Err(TraceError::invalid(
                "routing_topk",
                "must satisfy 1 <= routing_topk <= num_experts",
            ));
        }
        if self.expert_bytes.low == 0 || self.expert_bytes.high <= self.expert_bytes.low {
            return Err(TraceError::invalid(
                "expert_bytes",
                "must satisfy high > low > 0",
            ));
        }
        Ok(())
    }
}

/// One (token, layer) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    /// Token index: prompt position in prefill, `prompt_len + step` in decode.
    pub token_id: usize,
    /// Router gate distribution over the layer's experts (sums to 1).
    pub gate_scores: Vec<f64>,
    /// Predicted gate distribution for the next layer; absent at the last layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_next_gate_scores: Option<Vec<f64>>,
    /// Aggregated attention importance s_i; present only in prefill steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_importance: Option<f64>,
}

impl TokenStep {
    /// Experts this token routes to: the top `k_route` gate entries,
    /// ties broken toward the lower expert index.
    pub fn routed_experts(&self, k_route: usize) -> Vec<usize> {
        crate::topk::top_k_indices(&self.gate_scores, k_route)
    }
}

/// A full recorded or synthesized request: prefill grid plus decode steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub model: ModelSpec,
    /// Layer-major prefill grid: `prefill[layer][token]`.
    pub prefill: Vec<Vec<TokenStep>>,
    /// Decode steps: `decode[step][layer]`, one token per step.
    pub decode: Vec<Vec<TokenStep>>,
    /// Free-form provenance (generator parameters or source-model name).
    pub metadata: BTreeMap<String, String>,
}

impl InferenceTrace {
    pub fn num_prompt_tokens(&self) -> usize {
        self.prefill.first().map_or(0, Vec::len)
    }

    pub fn num_decode_steps(&self) -> usize {
        self.decode.len()
    }

    /// Checks every structural and numerical invariant. `load_trace` runs
    /// this before returning, so a loaded trace is always valid.
    pub fn validate(&self) -> Result<(), TraceError> {
        self.model.validate()?;
        let layers = self.model.num_layers;
        if self.prefill.len() != layers {
            return Err(TraceError::Schema {
                context: "prefill".into(),
                message: format!("expected {} layers, found {}", layers, self.prefill.len()),
            });
        }
        let tokens = self.num_prompt_tokens();
        if tokens == 0 {
            return Err(TraceError::Schema {
                context: "prefill".into(),
                message: "at least one prompt token is required".into(),
            });
        }
        for (layer, row) in self.prefill.iter().enumerate() {
            if row.len() != tokens {
                return Err(TraceError::Schema {
                    context: format!("prefill layer {layer}"),
                    message: format!("ragged grid: expected {} tokens, found {}", tokens, row.len()),
                });
            }
            for step in row {
                self.validate_step(step, layer, true)?;
            }
        }
        for (s, step_layers) in self.decode.iter().enumerate() {
            if step_layers.len() != layers {
                return Err(TraceError::Schema {
                    context: format!("decode step {s}"),
                    message: format!(
                        "expected {} layers, found {}",
                        layers,
                        step_layers.len()
                    ),
                });
            }
            for (layer, step) in step_layers.iter().enumerate() {
                self.validate_step(step, layer, false)?;
            }
        }
        Ok(())
    }

    fn validate_step(&self, step: &TokenStep, layer: usize, prefill: bool) -> Result<(), TraceError> {
        let context = format!(
            "{} token {} layer {layer}",
            if prefill { "prefill" } else { "decode" },
            step.token_id
        );
        check_distribution(&step.gate_scores, self.model.num_experts, &context, "gate_scores")?;
        let last_layer = layer + 1 == self.model.num_layers;
        match &step.predicted_next_gate_scores {
            Some(_) if last_layer => {
                return Err(TraceError::Schema {
                    context,
                    message: "predicted_next_gate_scores present at the last layer".into(),
                });
            }
            Some(pred) => check_distribution(
                pred,
                self.model.num_experts,
                &context,
                "predicted_next_gate_scores",
            )?,
            None => {}
        }
        match step.attention_importance {
            Some(s) if prefill => {
                if s.is_nan() || s < 0.0 {
                    return Err(TraceError::Schema {
                        context,
                        message: format!("attention_importance must be non-negative, got {s}"),
                    });
                }
            }
            Some(_) => {
                return Err(TraceError::Schema {
                    context,
                    message: "attention_importance present in a decode step".into(),
                });
            }
            None if prefill => {
                return Err(TraceError::Schema {
                    context,
                    message: "attention_importance missing from a prefill step".into(),
                });
            }
            None => {}
        }
        Ok(())
    }
}

fn check_distribution(
    scores: &[f64],
    num_experts: usize,
    context: &str,
    field: &str,
) -> Result<(), TraceError> {
    if scores.len() != num_experts {
        return Err(TraceError::Schema {
            context: context.into(),
            message: format!("{field} has {} entries, expected {num_experts}", scores.len()),
        });
    }
    let mut sum = 0.0;
    for &v in scores {
        if v.is_nan() || v < 0.0 {
            return Err(TraceError::Schema {
                context: context.into(),
                message: format!("{field} contains a negative or NaN entry ({v})"),
            });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(TraceError::Schema {
            context: context.into(),
            message: format!("{field} sums to {sum}, expected 1 within {DISTRIBUTION_TOLERANCE}"),
        });
    }
    Ok(())
}

/// Parameters for the synthetic trace generator.
///
/// The generator reproduces three workload properties with tunable strength:
/// gate mass concentrated on a few per-layer hot experts that shift between
/// inputs (`skew_alpha`), a small set of high-importance prompt tokens
/// (`heavy_hitter_fraction`), and next-layer gate predictions whose accuracy
/// is controlled by `predictor_fidelity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub num_prompt_tokens: usize,
    pub num_decode_steps: usize,
    /// Zipf exponent for per-layer gate concentration; larger is more skewed.
    pub skew_alpha: f64,
    /// Fraction of prompt tokens drawn from the high-importance regime, (0, 1].
    pub heavy_hitter_fraction: f64,
    /// ρ in [0, 1]: predictions mix the true next-layer gates with independent
    /// noise at weight ρ, so ρ=1 is a perfect predictor and ρ=0 is uninformed.
    pub predictor_fidelity: f64,
    pub rng_seed: u64,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.num_prompt_tokens == 0 {
            return Err(TraceError::invalid("num_prompt_tokens", "must be at least 1"));
        }
        if self.skew_alpha.is_nan() || self.skew_alpha <= 0.0 {
            return Err(TraceError::invalid("skew_alpha", "must be positive"));
        }
        let hh = self.heavy_hitter_fraction;
        if hh.is_nan() || hh <= 0.0 || hh > 1.0 {
            return Err(TraceError::invalid(
                "heavy_hitter_fraction",
                "must lie in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.predictor_fidelity) {
            return Err(TraceError::invalid(
                "predictor_fidelity",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Errors from trace validation, generation, and file I/O.
#[derive(Debug, Error)]
pub enum TraceError {
    /// A configuration field is out of range; names the field.
    #[error("invalid {field}: {message}")]
    InvalidConfig { field: String, message: String },
    /// A line could not be parsed as a trace record.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// A record violates a trace invariant.
    #[error("schema error ({context}): {message}")]
    Schema { context: String, message: String },
    #[error("trace i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    pub(crate) fn invalid(field: &str, message: &str) -> Self {
        TraceError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
