//! C ABI for the moesim simulator.
//!
//! Traces are opaque handles created by `moesim_trace_generate` or
//! `moesim_trace_load` and released with `moesim_trace_free`. Every
//! fallible call returns a `MoesimStatus`; on failure,
//! `moesim_last_error_message` returns a thread-local description of the
//! most recent error. The header `include/moesim.h` is generated from
//! these definitions at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use moesim::engine::{simulate, HardwareSpec, Policy, PrecisionSeconds, SimConfig, SimError};
use moesim::traces::{
    generate_trace, load_trace, save_trace, InferenceTrace, ModelSpec, PrecisionBytes,
    SynthesisConfig, TraceError,
};

/// Bumped on any breaking change to this ABI.
pub const MOESIM_ABI_VERSION: u32 = 1;

/// Opaque trace handle.
pub struct MoesimTrace(InferenceTrace);

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimStatus {
    Ok = 0,
    /// A parameter or input violated a documented invariant.
    Validation = 1,
    /// File or path problem.
    Io = 2,
    /// A required pointer argument was null.
    NullArgument = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
}

/// Policy ladder, mirroring the core enum.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimPolicy {
    LoadOnDemand = 0,
    CacheOnly = 1,
    CachePrefetch = 2,
    CacheDyquant42 = 3,
    CacheDyquant40 = 4,
    CacheDyquantPrefetch42 = 5,
    CacheDyquantPrefetch40 = 6,
}

impl From<MoesimPolicy> for Policy {
    fn from(p: MoesimPolicy) -> Policy {
        match p {
            MoesimPolicy::LoadOnDemand => Policy::LoadOnDemand,
            MoesimPolicy::CacheOnly => Policy::CacheOnly,
            MoesimPolicy::CachePrefetch => Policy::CachePrefetch,
            MoesimPolicy::CacheDyquant42 => Policy::CacheDyquant42,
            MoesimPolicy::CacheDyquant40 => Policy::CacheDyquant40,
            MoesimPolicy::CacheDyquantPrefetch42 => Policy::CacheDyquantPrefetch42,
            MoesimPolicy::CacheDyquantPrefetch40 => Policy::CacheDyquantPrefetch40,
        }
    }
}

/// Model shape and per-expert byte sizes.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MoesimModelParams {
    pub num_layers: u32,
    pub num_experts: u32,
    pub routing_topk: u32,
    pub high_bytes: u64,
    pub low_bytes: u64,
    pub attention_bytes_per_layer: u64,
}

/// Synthetic-trace generator parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MoesimSynthesisParams {
    pub num_prompt_tokens: u32,
    pub num_decode_steps: u32,
    pub skew_alpha: f64,
    pub heavy_hitter_fraction: f64,
    pub predictor_fidelity: f64,
    pub rng_seed: u64,
}

/// Hardware cost model (seconds and bytes).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MoesimHardware {
    pub link_bandwidth: f64,
    pub link_latency: f64,
    pub attention_time_prefill: f64,
    pub attention_time_decode: f64,
    pub compute_prefill_high: f64,
    pub compute_prefill_low: f64,
    pub compute_decode_high: f64,
    pub compute_decode_low: f64,
    pub dequant_high: f64,
    pub dequant_low: f64,
    pub vram_budget: u64,
    pub resident_reservation: u64,
}

/// Simulation configuration. Negative `k_tokens` / `t_prefetch` select the
/// engine defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MoesimSimParams {
    pub policy: MoesimPolicy,
    pub lambda: f64,
    pub k_tokens: i32,
    pub t_prefetch: i32,
    pub renormalize_on_skip: bool,
    pub low_discount: f64,
}

/// Output metrics of one simulation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MoesimMetrics {
    pub ttft: f64,
    pub tpot: f64,
    pub prefetch_hit_rate: f64,
    pub cache_hit_rate: f64,
    pub retained_gate_mass: f64,
    pub stall_time_prefill: f64,
    pub stall_time_decode: f64,
    pub bytes_transferred: u64,
    pub bytes_prefill: u64,
    pub bytes_decode: u64,
    pub demand_lookups: u64,
    pub demand_hits: u64,
    pub prefetch_issued: u64,
    pub prefetch_useful: u64,
}

/// Basic shape of a trace, for callers that received an opaque handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MoesimTraceInfo {
    pub num_layers: u32,
    pub num_experts: u32,
    pub routing_topk: u32,
    pub num_prompt_tokens: u32,
    pub num_decode_steps: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: MoesimStatus, message: &str) -> MoesimStatus {
    set_error(message);
    status
}

fn trace_error_status(e: &TraceError) -> MoesimStatus {
    match e {
        TraceError::Io(_) => MoesimStatus::Io,
        _ => MoesimStatus::Validation,
    }
}

fn sim_error_status(e: &SimError) -> MoesimStatus {
    match e {
        SimError::Trace(t) => trace_error_status(t),
        SimError::InvalidConfig { .. } => MoesimStatus::Validation,
    }
}

impl MoesimModelParams {
    fn to_spec(self) -> ModelSpec {
        ModelSpec {
            num_layers: self.num_layers as usize,
            num_experts: self.num_experts as usize,
            routing_topk: self.routing_topk as usize,
            expert_bytes: PrecisionBytes {
                high: self.high_bytes,
                low: self.low_bytes,
            },
            attention_bytes_per_layer: self.attention_bytes_per_layer,
        }
    }
}

impl MoesimSynthesisParams {
    fn to_config(self) -> SynthesisConfig {
        SynthesisConfig {
            num_prompt_tokens: self.num_prompt_tokens as usize,
            num_decode_steps: self.num_decode_steps as usize,
            skew_alpha: self.skew_alpha,
            heavy_hitter_fraction: self.heavy_hitter_fraction,
            predictor_fidelity: self.predictor_fidelity,
            rng_seed: self.rng_seed,
        }
    }
}

impl MoesimHardware {
    fn to_spec(self) -> HardwareSpec {
        HardwareSpec {
            link_bandwidth: self.link_bandwidth,
            link_latency: self.link_latency,
            attention_time_prefill: self.attention_time_prefill,
            attention_time_decode: self.attention_time_decode,
            expert_compute_prefill: PrecisionSeconds {
                high: self.compute_prefill_high,
                low: self.compute_prefill_low,
            },
            expert_compute_decode: PrecisionSeconds {
                high: self.compute_decode_high,
                low: self.compute_decode_low,
            },
            dequant_overhead: PrecisionSeconds {
                high: self.dequant_high,
                low: self.dequant_low,
            },
            vram_budget: self.vram_budget,
            resident_reservation: self.resident_reservation,
        }
    }
}

impl MoesimSimParams {
    fn to_config(self) -> SimConfig {
        let mut cfg = SimConfig::new(self.policy.into(), self.lambda);
        cfg.k_tokens = (self.k_tokens >= 0).then_some(self.k_tokens as usize);
        cfg.t_prefetch = (self.t_prefetch >= 0).then_some(self.t_prefetch as usize);
        cfg.renormalize_on_skip = self.renormalize_on_skip;
        cfg.low_discount = self.low_discount;
        cfg
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string pointer.
unsafe fn path_from(path: *const c_char) -> Result<PathBuf, MoesimStatus> {
    if path.is_null() {
        set_error("path is null");
        return Err(MoesimStatus::NullArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MoesimStatus::InvalidUtf8)
        }
    }
}

/// ABI version of this library.
#[no_mangle]
pub extern "C" fn moesim_abi_version() -> u32 {
    MOESIM_ABI_VERSION
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn moesim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Synthesizes a trace. On success writes a handle to `out`; release it
/// with `moesim_trace_free`.
///
/// # Safety
/// `model`, `synthesis`, and `out` must be valid, properly aligned
/// pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_trace_generate(
    model: *const MoesimModelParams,
    synthesis: *const MoesimSynthesisParams,
    out: *mut *mut MoesimTrace,
) -> MoesimStatus {
    if model.is_null() || synthesis.is_null() || out.is_null() {
        return fail(MoesimStatus::NullArgument, "null argument to moesim_trace_generate");
    }
    match generate_trace(&(*model).to_spec(), &(*synthesis).to_config()) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(MoesimTrace(trace)));
            MoesimStatus::Ok
        }
        Err(e) => fail(trace_error_status(&e), &e.to_string()),
    }
}

/// Loads and validates a trace file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_trace_load(
    path: *const c_char,
    out: *mut *mut MoesimTrace,
) -> MoesimStatus {
    if out.is_null() {
        return fail(MoesimStatus::NullArgument, "out is null");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_trace(&path) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(MoesimTrace(trace)));
            MoesimStatus::Ok
        }
        Err(e) => fail(trace_error_status(&e), &e.to_string()),
    }
}

/// Writes a trace to a file.
///
/// # Safety
/// `trace` must be a live handle from this library; `path` a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moesim_trace_save(
    trace: *const MoesimTrace,
    path: *const c_char,
) -> MoesimStatus {
    if trace.is_null() {
        return fail(MoesimStatus::NullArgument, "trace is null");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match save_trace(&(*trace).0, &path) {
        Ok(()) => MoesimStatus::Ok,
        Err(e) => fail(trace_error_status(&e), &e.to_string()),
    }
}

/// Reports the shape of a trace.
///
/// # Safety
/// `trace` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_trace_info(
    trace: *const MoesimTrace,
    out: *mut MoesimTraceInfo,
) -> MoesimStatus {
    if trace.is_null() || out.is_null() {
        return fail(MoesimStatus::NullArgument, "null argument to moesim_trace_info");
    }
    let t = &(*trace).0;
    *out = MoesimTraceInfo {
        num_layers: t.model.num_layers as u32,
        num_experts: t.model.num_experts as u32,
        routing_topk: t.model.routing_topk as u32,
        num_prompt_tokens: t.num_prompt_tokens() as u32,
        num_decode_steps: t.num_decode_steps() as u32,
    };
    MoesimStatus::Ok
}

/// Releases a trace handle. Passing null is a no-op.
///
/// # Safety
/// `trace` must be null or a handle returned by this library that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn moesim_trace_free(trace: *mut MoesimTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Replays `trace` under the given hardware model and policy, writing the
/// summary metrics to `out`. Deterministic for identical inputs.
///
/// # Safety
/// All pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_simulate(
    trace: *const MoesimTrace,
    hardware: *const MoesimHardware,
    params: *const MoesimSimParams,
    out: *mut MoesimMetrics,
) -> MoesimStatus {
    if trace.is_null() || hardware.is_null() || params.is_null() || out.is_null() {
        return fail(MoesimStatus::NullArgument, "null argument to moesim_simulate");
    }
    let hw = (*hardware).to_spec();
    let cfg = (*params).to_config();
    match simulate(&(*trace).0, &hw, &cfg) {
        Ok((_, m)) => {
            *out = MoesimMetrics {
                ttft: m.ttft,
                tpot: m.tpot,
                prefetch_hit_rate: m.prefetch_hit_rate,
                cache_hit_rate: m.cache_hit_rate,
                retained_gate_mass: m.retained_gate_mass,
                stall_time_prefill: m.stall_time_prefill,
                stall_time_decode: m.stall_time_decode,
                bytes_transferred: m.bytes_transferred,
                bytes_prefill: m.bytes_prefill,
                bytes_decode: m.bytes_decode,
                demand_lookups: m.demand_lookups,
                demand_hits: m.demand_hits,
                prefetch_issued: m.prefetch_issued,
                prefetch_useful: m.prefetch_useful,
            };
            MoesimStatus::Ok
        }
        Err(e) => fail(sim_error_status(&e), &e.to_string()),
    }
}

/// Retained decode gate mass for a schedule, independent of hardware.
///
/// # Safety
/// All pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_quality_proxy(
    trace: *const MoesimTrace,
    params: *const MoesimSimParams,
    out: *mut f64,
) -> MoesimStatus {
    if trace.is_null() || params.is_null() || out.is_null() {
        return fail(MoesimStatus::NullArgument, "null argument to moesim_quality_proxy");
    }
    match moesim::engine::quality_proxy(&(*trace).0, &(*params).to_config()) {
        Ok(mass) => {
            *out = mass;
            MoesimStatus::Ok
        }
        Err(e) => fail(sim_error_status(&e), &e.to_string()),
    }
}
