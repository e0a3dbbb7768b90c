//! Shared default model, workload, and hardware parameterizations.
//!
//! The defaults describe a coarse-grained MoE (16 layers × 8 experts,
//! top-2 routing) offloaded over a PCIe-class link where a high-precision
//! expert transfer dwarfs per-layer compute — the regime where policy
//! differences matter. The default cache budget is 40% of the model's
//! high-precision expert bytes.

use crate::engine::{HardwareSpec, Policy, PrecisionSeconds, SimConfig};
use crate::traces::{
    generate_trace, InferenceTrace, ModelSpec, PrecisionBytes, SynthesisConfig,
};

pub const MIB: u64 = 1024 * 1024;

pub fn default_model() -> ModelSpec {
    ModelSpec {
        num_layers: 16,
        num_experts: 8,
        routing_topk: 2,
        expert_bytes: PrecisionBytes {
            high: 100 * MIB,
            // 2-bit payload plus per-group quantization metadata that does
            // not shrink with the bit-width.
            low: 48 * MIB,
        },
        attention_bytes_per_layer: 128 * MIB,
    }
}

pub fn default_synthesis() -> SynthesisConfig {
    SynthesisConfig {
        num_prompt_tokens: 128,
        num_decode_steps: 32,
        skew_alpha: 1.2,
        heavy_hitter_fraction: 0.2,
        predictor_fidelity: 0.8,
        rng_seed: 7,
    }
}

pub fn default_hardware() -> HardwareSpec {
    HardwareSpec {
        link_bandwidth: 12.5e9,
        link_latency: 1e-4,
        attention_time_prefill: 4e-3,
        attention_time_decode: 1.5e-3,
        expert_compute_prefill: PrecisionSeconds { high: 2e-3, low: 1.5e-3 },
        expert_compute_decode: PrecisionSeconds { high: 2e-4, low: 1.5e-4 },
        dequant_overhead: PrecisionSeconds::ZERO,
        // 7 GiB budget minus a 2 GiB resident reservation leaves a 5 GiB
        // expert cache: 40% of the 16×8×100 MiB high-precision footprint.
        vram_budget: 7 * 1024 * MIB,
        resident_reservation: 2 * 1024 * MIB,
    }
}

/// The default synthetic trace used by reports and tests.
pub fn default_trace() -> InferenceTrace {
    generate_trace(&default_model(), &default_synthesis()).expect("defaults are valid")
}

/// A small trace for fast unit tests.
pub fn default_trace_small() -> InferenceTrace {
    let mut spec = default_model();
    spec.num_layers = 6;
    spec.num_experts = 4;
    let cfg = SynthesisConfig {
        num_prompt_tokens: 8,
        num_decode_steps: 4,
        skew_alpha: 1.0,
        heavy_hitter_fraction: 0.25,
        predictor_fidelity: 0.7,
        rng_seed: 13,
    };
    generate_trace(&spec, &cfg).expect("small defaults are valid")
}

/// The six-row incremental policy ladder, from plain load-on-demand to the
/// full cache + dyquant + prefetch stack.
pub fn ablation_ladder(lambda: f64) -> Vec<SimConfig> {
    vec![
        SimConfig::new(Policy::LoadOnDemand, lambda),
        SimConfig::new(Policy::CacheOnly, lambda),
        SimConfig::new(Policy::CachePrefetch, lambda),
        SimConfig::new(Policy::CacheDyquant42, lambda),
        SimConfig::new(Policy::CacheDyquantPrefetch42, lambda),
        SimConfig::new(Policy::CacheDyquantPrefetch40, lambda),
    ]
}

/// λ used by the default ablation ladder: the most aggressive schedule,
/// where every mechanism on the ladder is visible at desk scale.
pub const DEFAULT_LADDER_LAMBDA: f64 = 0.0;
