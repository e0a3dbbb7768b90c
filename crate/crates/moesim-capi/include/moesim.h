#ifndef MOESIM_H
#define MOESIM_H

/* Generated by cbindgen from moesim-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on any breaking change to this ABI.
 */
#define MOESIM_ABI_VERSION 1

/**
 * Policy ladder, mirroring the core enum.
 */
typedef enum MoesimPolicy {
  MOESIM_POLICY_LOAD_ON_DEMAND = 0,
  MOESIM_POLICY_CACHE_ONLY = 1,
  MOESIM_POLICY_CACHE_PREFETCH = 2,
  MOESIM_POLICY_CACHE_DYQUANT42 = 3,
  MOESIM_POLICY_CACHE_DYQUANT40 = 4,
  MOESIM_POLICY_CACHE_DYQUANT_PREFETCH42 = 5,
  MOESIM_POLICY_CACHE_DYQUANT_PREFETCH40 = 6,
} MoesimPolicy;

/**
 * Status codes returned by every fallible function.
 */
typedef enum MoesimStatus {
  MOESIM_STATUS_OK = 0,
  /**
   * A parameter or input violated a documented invariant.
   */
  MOESIM_STATUS_VALIDATION = 1,
  /**
   * File or path problem.
   */
  MOESIM_STATUS_IO = 2,
  /**
   * A required pointer argument was null.
   */
  MOESIM_STATUS_NULL_ARGUMENT = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  MOESIM_STATUS_INVALID_UTF8 = 4,
} MoesimStatus;

/**
 * Opaque trace handle.
 */
typedef struct MoesimTrace MoesimTrace;

/**
 * Model shape and per-expert byte sizes.
 */
typedef struct MoesimModelParams {
  uint32_t num_layers;
  uint32_t num_experts;
  uint32_t routing_topk;
  uint64_t high_bytes;
  uint64_t low_bytes;
  uint64_t attention_bytes_per_layer;
} MoesimModelParams;

/**
 * Synthetic-trace generator parameters.
 */
typedef struct MoesimSynthesisParams {
  uint32_t num_prompt_tokens;
  uint32_t num_decode_steps;
  double skew_alpha;
  double heavy_hitter_fraction;
  double predictor_fidelity;
  uint64_t rng_seed;
} MoesimSynthesisParams;

/**
 * Basic shape of a trace, for callers that received an opaque handle.
 */
typedef struct MoesimTraceInfo {
  uint32_t num_layers;
  uint32_t num_experts;
  uint32_t routing_topk;
  uint32_t num_prompt_tokens;
  uint32_t num_decode_steps;
} MoesimTraceInfo;

/**
 * Hardware cost model (seconds and bytes).
 */
typedef struct MoesimHardware {
  double link_bandwidth;
  double link_latency;
  double attention_time_prefill;
  double attention_time_decode;
  double compute_prefill_high;
  double compute_prefill_low;
  double compute_decode_high;
  double compute_decode_low;
  double dequant_high;
  double dequant_low;
  uint64_t vram_budget;
  uint64_t resident_reservation;
} MoesimHardware;

/**
 * Simulation configuration. Negative `k_tokens` / `t_prefetch` select the
 * engine defaults.
 */
typedef struct MoesimSimParams {
  enum MoesimPolicy policy;
  double lambda;
  int32_t k_tokens;
  int32_t t_prefetch;
  bool renormalize_on_skip;
  double low_discount;
} MoesimSimParams;

/**
 * Output metrics of one simulation.
 */
typedef struct MoesimMetrics {
  double ttft;
  double tpot;
  double prefetch_hit_rate;
  double cache_hit_rate;
  double retained_gate_mass;
  double stall_time_prefill;
  double stall_time_decode;
  uint64_t bytes_transferred;
  uint64_t bytes_prefill;
  uint64_t bytes_decode;
  uint64_t demand_lookups;
  uint64_t demand_hits;
  uint64_t prefetch_issued;
  uint64_t prefetch_useful;
} MoesimMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI version of this library.
 */
uint32_t moesim_abi_version(void);

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *moesim_last_error_message(void);

/**
 * Synthesizes a trace. On success writes a handle to `out`; release it
 * with `moesim_trace_free`.
 *
 * # Safety
 * `model`, `synthesis`, and `out` must be valid, properly aligned
 * pointers; `out` must be writable.
 */
enum MoesimStatus moesim_trace_generate(const struct MoesimModelParams *model,
                                        const struct MoesimSynthesisParams *synthesis,
                                        struct MoesimTrace **out);

/**
 * Loads and validates a trace file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
enum MoesimStatus moesim_trace_load(const char *path, struct MoesimTrace **out);

/**
 * Writes a trace to a file.
 *
 * # Safety
 * `trace` must be a live handle from this library; `path` a valid
 * NUL-terminated string.
 */
enum MoesimStatus moesim_trace_save(const struct MoesimTrace *trace, const char *path);

/**
 * Reports the shape of a trace.
 *
 * # Safety
 * `trace` must be a live handle; `out` must be writable.
 */
enum MoesimStatus moesim_trace_info(const struct MoesimTrace *trace, struct MoesimTraceInfo *out);

/**
 * Releases a trace handle. Passing null is a no-op.
 *
 * # Safety
 * `trace` must be null or a handle returned by this library that has not
 * been freed already.
 */
void moesim_trace_free(struct MoesimTrace *trace);

/**
 * Replays `trace` under the given hardware model and policy, writing the
 * summary metrics to `out`. Deterministic for identical inputs.
 *
 * # Safety
 * All pointers must be valid; `out` must be writable.
 */
enum MoesimStatus moesim_simulate(const struct MoesimTrace *trace,
                                  const struct MoesimHardware *hardware,
                                  const struct MoesimSimParams *params,
                                  struct MoesimMetrics *out);

/**
 * Retained decode gate mass for a schedule, independent of hardware.
 *
 * # Safety
 * All pointers must be valid; `out` must be writable.
 */
enum MoesimStatus moesim_quality_proxy(const struct MoesimTrace *trace,
                                       const struct MoesimSimParams *params,
                                       double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MOESIM_H */
