//! moesim — trace-driven simulation of mixture-of-experts inference under
//! tight device memory.
//!
//! The crate replays recorded (or synthesized) per-token gating traces
//! through a discrete-event model of an expert-offloading runtime: experts
//! live in host memory, move over a single bandwidth-limited link, and are
//! cached on-device in a byte-budgeted mixed-precision LRU. Policies are
//! layered — plain load-on-demand, expert caching, look-ahead prefetching,
//! and dynamic mixed-precision scheduling (critical experts kept at high
//! precision, sub-critical ones compressed or skipped) — and the engine
//! emits TTFT/TPOT timelines so the ladder can be compared.
//!
//! # Architecture
//!
//! ```text
//!  trace (gate scores, predictions, token importance)
//!    │
//!    ├── importance ── per-expert scores (token load / gate score)
//!    │        │
//!    │        └── scheduler ── per-layer precision assignment
//!    │
//!    ├── prefetcher ── next-layer prefetch requests
//!    │
//!    └── engine ───── event loop: compute ∥ transfers, cache, stalls
//!             │
//!             └── timeline + metrics (TTFT, TPOT, hit rates, bytes)
//! ```
//!
//! The `moesim` binary wraps this into `gen-trace`, `run`, `sweep`, and
//! `dump-timeline` subcommands driven by TOML config files.

pub mod cache;
pub mod defaults;
pub mod engine;
pub mod importance;
pub mod prefetcher;
pub mod report;
pub mod runconfig;
pub mod scheduler;
pub mod traces;

mod topk;

pub use cache::{CacheError, ExpertCache, ExpertKey, LookupOutcome};
pub use engine::{simulate, HardwareSpec, Metrics, Policy, SimConfig, SimError, Timeline};
pub use importance::{decode_importance, prefill_importance, select_heavy_hitters};
pub use scheduler::{assign_precisions, critical_count, retention_ratio, PolicyConfig, Tier};
pub use traces::{
    generate_trace, load_trace, save_trace, InferenceTrace, ModelSpec, Precision, SynthesisConfig,
    TokenStep, TraceError,
};
