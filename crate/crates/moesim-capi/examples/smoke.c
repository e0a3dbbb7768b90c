/* Minimal C consumer: generate a trace, simulate one policy, print TTFT
 * and TPOT. Built and run by the capi_smoke_c test when a C compiler is
 * available:
 *
 *   cc smoke.c -I include -L target/debug -lmoesim_capi -lm -o smoke
 */
#include <stdio.h>

#include "moesim.h"

int main(void) {
    MoesimModelParams model = {
        .num_layers = 6,
        .num_experts = 8,
        .routing_topk = 2,
        .high_bytes = 100ull << 20,
        .low_bytes = 48ull << 20,
        .attention_bytes_per_layer = 128ull << 20,
    };
    MoesimSynthesisParams synth = {
        .num_prompt_tokens = 24,
        .num_decode_steps = 6,
        .skew_alpha = 1.2,
        .heavy_hitter_fraction = 0.2,
        .predictor_fidelity = 0.8,
        .rng_seed = 7,
    };
    MoesimHardware hw = {
        .link_bandwidth = 12.5e9,
        .link_latency = 1e-4,
        .attention_time_prefill = 4e-3,
        .attention_time_decode = 1.5e-3,
        .compute_prefill_high = 2e-3,
        .compute_prefill_low = 1.5e-3,
        .compute_decode_high = 2e-4,
        .compute_decode_low = 1.5e-4,
        .dequant_high = 0.0,
        .dequant_low = 0.0,
        .vram_budget = 3ull << 30,
        .resident_reservation = 1ull << 30,
    };
    MoesimSimParams params = {
        .policy = MOESIM_POLICY_CACHE_DYQUANT_PREFETCH40,
        .lambda = 0.5,
        .k_tokens = -1,
        .t_prefetch = -1,
        .renormalize_on_skip = true,
        .low_discount = 0.5,
    };

    MoesimTrace *trace = NULL;
    if (moesim_trace_generate(&model, &synth, &trace) != MOESIM_STATUS_OK) {
        fprintf(stderr, "generate failed: %s\n", moesim_last_error_message());
        return 1;
    }
    MoesimMetrics metrics;
    if (moesim_simulate(trace, &hw, &params, &metrics) != MOESIM_STATUS_OK) {
        fprintf(stderr, "simulate failed: %s\n", moesim_last_error_message());
        moesim_trace_free(trace);
        return 1;
    }
    printf("ttft=%.6f tpot=%.6f hit=%.3f mass=%.4f\n", metrics.ttft, metrics.tpot,
           metrics.cache_hit_rate, metrics.retained_gate_mass);
    moesim_trace_free(trace);
    return metrics.ttft > 0.0 && metrics.tpot > 0.0 ? 0 : 1;
}
