//! Deterministic discrete-event replay of a trace under one policy.
//!
//! The modeled system has one device (attention and expert compute serialize
//! on it) and one host→device link (transfers serialize on it, demand
//! before prefetch). Per layer the engine runs attention, resolves expert
//! demand through the phase's importance estimator and the precision
//! scheduler, consults the cache, queues transfers for misses, and runs
//! each routed expert's compute as soon as its weights are resident —
//! emitting a `Stall` event wherever the device had to wait on the link.
//! Prefetch requests for layer l+1 are issued the moment layer l's routing
//! is known, overlapping transfers with layer l's expert compute.
//!
//! Concurrency in the modeled system is represented purely by event
//! timestamps; the loop itself is single-threaded and deterministic, so
//! identical inputs produce byte-identical timelines.

mod link;
mod timeline;

pub use timeline::{Event, EventKind, Metrics, Timeline, TransferClass};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{ExpertCache, ExpertKey, LookupOutcome};
use crate::importance::{
    decode_importance, prefill_importance, select_heavy_hitters, HeavyHitterConfig,
    ImportanceError, ImportanceScores, Phase,
};
use crate::prefetcher::{decode_prefetch, predict_topk, prefill_prefetch, PrefetchConfig};
use crate::report::AblationReport;
use crate::scheduler::{
    assign_precisions, executed_critical_count, LowTier, PolicyConfig, PrecisionAssignment, Tier,
};
use crate::traces::{InferenceTrace, ModelSpec, Precision, TokenStep, TraceError};

use link::{Link, Pending, ScheduledTransfer};

/// Per-precision seconds for one expert invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSeconds {
    pub high: f64,
    pub low: f64,
}

impl PrecisionSeconds {
    pub const ZERO: PrecisionSeconds = PrecisionSeconds { high: 0.0, low: 0.0 };

    pub fn get(&self, precision: Precision) -> f64 {
        match precision {
            Precision::High => self.high,
            Precision::Low => self.low,
        }
    }
}

fn default_dequant() -> PrecisionSeconds {
    PrecisionSeconds::ZERO
}

/// Cost model of the simulated device, link, and memory budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// Host→device bandwidth in bytes per second.
    pub link_bandwidth: f64,
    /// Fixed overhead per transfer, seconds.
    pub link_latency: f64,
    /// Attention (and other non-expert) compute per layer for the whole
    /// prompt batch.
    pub attention_time_prefill: f64,
    /// Attention compute per layer per decode token.
    pub attention_time_decode: f64,
    /// Expert compute per invocation in prefill (per token batch).
    pub expert_compute_prefill: PrecisionSeconds,
    /// Expert compute per invocation in decode.
    pub expert_compute_decode: PrecisionSeconds,
    /// Optional additive dequantization cost per expert invocation.
    #[serde(default = "default_dequant")]
    pub dequant_overhead: PrecisionSeconds,
    /// Device memory budget in bytes.
    pub vram_budget: u64,
    /// Bytes reserved for resident non-expert weights; the expert cache
    /// gets `vram_budget - resident_reservation`.
    pub resident_reservation: u64,
}

impl HardwareSpec {
    pub fn cache_capacity(&self) -> u64 {
        self.vram_budget - self.resident_reservation
    }

    pub fn transfer_seconds(&self, bytes: u64) -> f64 {
        self.link_latency + bytes as f64 / self.link_bandwidth
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("link_bandwidth", self.link_bandwidth),
            ("attention_time_prefill", self.attention_time_prefill),
            ("attention_time_decode", self.attention_time_decode),
            ("expert_compute_prefill.high", self.expert_compute_prefill.high),
            ("expert_compute_prefill.low", self.expert_compute_prefill.low),
            ("expert_compute_decode.high", self.expert_compute_decode.high),
            ("expert_compute_decode.low", self.expert_compute_decode.low),
        ];
        for (field, value) in positive {
            if value.is_nan() || value <= 0.0 {
                return Err(SimError::invalid(field, "must be positive"));
            }
        }
        if self.link_latency.is_nan() || self.link_latency < 0.0 {
            return Err(SimError::invalid("link_latency", "must be non-negative"));
        }
        if self.dequant_overhead.high < 0.0 || self.dequant_overhead.low < 0.0 {
            return Err(SimError::invalid("dequant_overhead", "must be non-negative"));
        }
        if self.vram_budget <= self.resident_reservation {
            return Err(SimError::invalid(
                "vram_budget",
                "must exceed resident_reservation",
            ));
        }
        Ok(())
    }
}

/// The policy ladder. Dyquant applies the depth-aware precision schedule;
/// "4/2" keeps sub-critical experts at low precision, "4/0" skips them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "load_on_demand")]
    LoadOnDemand,
    #[serde(rename = "cache", alias = "cache_only")]
    CacheOnly,
    #[serde(rename = "cache_prefetch")]
    CachePrefetch,
    #[serde(rename = "cache_dyquant_4_2")]
    CacheDyquant42,
    #[serde(rename = "cache_dyquant_4_0")]
    CacheDyquant40,
    #[serde(rename = "cache_dyquant_prefetch_4_2")]
    CacheDyquantPrefetch42,
    #[serde(rename = "cache_dyquant_prefetch_4_0")]
    CacheDyquantPrefetch40,
}

impl Policy {
    pub fn caches(self) -> bool {
        self != Policy::LoadOnDemand
    }

    pub fn prefetches(self) -> bool {
        matches!(
            self,
            Policy::CachePrefetch | Policy::CacheDyquantPrefetch42 | Policy::CacheDyquantPrefetch40
        )
    }

    pub fn low_tier(self) -> Option<LowTier> {
        match self {
            Policy::CacheDyquant42 | Policy::CacheDyquantPrefetch42 => Some(LowTier::Low),
            Policy::CacheDyquant40 | Policy::CacheDyquantPrefetch40 => Some(LowTier::Skip),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Policy::LoadOnDemand => "load_on_demand",
            Policy::CacheOnly => "cache",
            Policy::CachePrefetch => "cache_prefetch",
            Policy::CacheDyquant42 => "cache_dyquant_4_2",
            Policy::CacheDyquant40 => "cache_dyquant_4_0",
            Policy::CacheDyquantPrefetch42 => "cache_dyquant_prefetch_4_2",
            Policy::CacheDyquantPrefetch40 => "cache_dyquant_prefetch_4_0",
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_low_discount() -> f64 {
    0.5
}

/// Full configuration of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: Policy,
    /// Retention knob λ of the cosine schedule (dyquant policies only).
    #[serde(default)]
    pub lambda: f64,
    /// Heavy-hitter token count; default ⌈0.2 · prompt length⌉.
    #[serde(default)]
    pub k_tokens: Option<usize>,
    /// Experts prefetched per layer transition; default is the next layer's
    /// critical count under dyquant, the routing top-k otherwise.
    #[serde(default)]
    pub t_prefetch: Option<usize>,
    /// Renormalize surviving gate weights when a routed expert is skipped.
    /// Recorded for downstream output-combination semantics; the retained
    /// gate mass metric is always computed on raw gate weights.
    #[serde(default = "default_true")]
    pub renormalize_on_skip: bool,
    /// δ: credit for gate mass executed at low precision, in [0, 1].
    #[serde(default = "default_low_discount")]
    pub low_discount: f64,
    /// Reserved for future stochastic hardware models; the engine itself is
    /// deterministic and never draws randomness.
    #[serde(default)]
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn new(policy: Policy, lambda: f64) -> Self {
        SimConfig {
            policy,
            lambda,
            k_tokens: None,
            t_prefetch: None,
            renormalize_on_skip: true,
            low_discount: 0.5,
            rng_seed: 0,
        }
    }

    pub fn validate(&self, spec: &ModelSpec, prompt_tokens: usize) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SimError::invalid("lambda", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.low_discount) {
            return Err(SimError::invalid("low_discount", "must lie in [0, 1]"));
        }
        if let Some(t) = self.t_prefetch {
            if t == 0 || t > spec.num_experts {
                return Err(SimError::invalid(
                    "t_prefetch",
                    "must satisfy 1 <= t_prefetch <= num_experts",
                ));
            }
        }
        if let Some(k) = self.k_tokens {
            if k == 0 || k > prompt_tokens {
                return Err(SimError::invalid(
                    "k_tokens",
                    "must satisfy 1 <= k_tokens <= prompt tokens",
                ));
            }
        }
        Ok(())
    }

    fn heavy_config(&self, prompt_tokens: usize) -> HeavyHitterConfig {
        match self.k_tokens {
            Some(k_tokens) => HeavyHitterConfig { k_tokens },
            None => HeavyHitterConfig::for_prompt_len(prompt_tokens),
        }
    }

    fn policy_config(&self) -> Option<PolicyConfig> {
        self.policy.low_tier().map(|low_tier| PolicyConfig {
            lambda: self.lambda,
            low_tier,
        })
    }

    /// Resolved prefetch width for a given target layer.
    ///
    /// Prefill's default is the target layer's critical count (the batch
    /// will demand most of the layer, so fetch the predicted-critical set).
    /// Decode's default is the routing top-k: the demand set of a single
    /// token is its routed experts, and the per-rank predicted tiers give
    /// each of them the right precision. Anything wider only feeds the link
    /// speculative bytes a single token can never use.
    fn t_prefetch_for(&self, phase: Phase, target_layer: usize, spec: &ModelSpec) -> usize {
        if let Some(t) = self.t_prefetch {
            return t.min(spec.num_experts);
        }
        match (self.policy.low_tier(), phase) {
            (Some(_), Phase::Prefill) => {
                executed_critical_count(target_layer, spec.num_layers, self.lambda, spec.num_experts)
            }
            _ => spec.routing_topk,
        }
    }

    pub fn prefetch_config(&self) -> PrefetchConfig {
        PrefetchConfig {
            t_prefetch: self.t_prefetch,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid {field}: {message}")]
    InvalidConfig { field: String, message: String },
}

impl SimError {
    fn invalid(field: &str, message: &str) -> Self {
        SimError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<ImportanceError> for SimError {
    fn from(e: ImportanceError) -> Self {
        SimError::InvalidConfig {
            field: "k_tokens".into(),
            message: e.to_string(),
        }
    }
}

/// Replays `trace` on `hw` under `cfg`, returning the full event log and
/// summary metrics. Pure: identical inputs give identical outputs.
pub fn simulate(
    trace: &InferenceTrace,
    hw: &HardwareSpec,
    cfg: &SimConfig,
) -> Result<(Timeline, Metrics), SimError> {
    trace.validate()?;
    hw.validate()?;
    cfg.validate(&trace.model, trace.num_prompt_tokens())?;

    let mut sim = Sim::new(trace, hw, cfg);
    sim.run()?;
    Ok(sim.finish())
}

/// Retained decode gate mass for a schedule, independent of any hardware or
/// cache state: the mean over decode (step, layer) cells of the routed gate
/// weight kept at high precision, discounting low-precision execution by δ
/// and crediting skips with nothing. Uniform-precision policies score 1.
pub fn quality_proxy(trace: &InferenceTrace, cfg: &SimConfig) -> Result<f64, SimError> {
    trace.validate()?;
    cfg.validate(&trace.model, trace.num_prompt_tokens())?;
    let spec = &trace.model;
    let Some(policy_cfg) = cfg.policy_config() else {
        return Ok(1.0);
    };
    let mut cells = Vec::new();
    for step_layers in &trace.decode {
        for (layer, step) in step_layers.iter().enumerate() {
            let scores = decode_importance(step, layer);
            let assignment = assign_precisions(&scores, layer, spec, &policy_cfg);
            cells.push(retained_cell(step, &assignment, spec.routing_topk, cfg.low_discount));
        }
    }
    if cells.is_empty() {
        return Ok(1.0);
    }
    Ok(cells.iter().sum::<f64>() / cells.len() as f64)
}

/// Runs every config in `ladder` on the same trace and hardware and tables
/// the metrics, with speedups relative to the first row.
pub fn run_ablation(
    trace: &InferenceTrace,
    hw: &HardwareSpec,
    ladder: &[SimConfig],
) -> Result<AblationReport, SimError> {
    if ladder.is_empty() {
        return Err(SimError::invalid("ladder", "must contain at least one config"));
    }
    let mut rows = Vec::with_capacity(ladder.len());
    for cfg in ladder {
        let (_, metrics) = simulate(trace, hw, cfg)?;
        rows.push((cfg.clone(), metrics));
    }
    Ok(AblationReport::from_rows(rows))
}

/// Fraction of this cell's routed gate mass retained by the assignment,
/// computed on raw gate weights.
fn retained_cell(
    step: &TokenStep,
    assignment: &PrecisionAssignment,
    k_route: usize,
    low_discount: f64,
) -> f64 {
    let routed = step.routed_experts(k_route);
    let mut total = 0.0;
    let mut kept = 0.0;
    for &e in &routed {
        let g = step.gate_scores[e];
        total += g;
        kept += match assignment.tier[e] {
            Tier::High => g,
            Tier::Low => low_discount * g,
            Tier::Skip => 0.0,
        };
    }
    if total > 0.0 {
        kept / total
    } else {
        1.0
    }
}

/// One expert's pending compute within the current layer.
struct ComputeItem {
    expert: usize,
    key: ExpertKey,
    served: Precision,
    /// Transfer to wait on; `None` means resident at routing time.
    transfer: Option<u64>,
}

struct Sim<'a> {
    trace: &'a InferenceTrace,
    hw: &'a HardwareSpec,
    cfg: &'a SimConfig,
    cache: Option<ExpertCache>,
    link: Link,
    events: Vec<Event>,
    device_time: f64,
    /// Keys pinned for the in-progress layer, unpinned after their compute.
    pinned: BTreeSet<ExpertKey>,
    /// Entry provenance for prefetch-usefulness accounting.
    origin: BTreeMap<ExpertKey, (u64, TransferClass)>,
    useful_prefetches: BTreeSet<u64>,
    ttft: f64,
    step_spans: Vec<f64>,
    retained_cells: Vec<f64>,
    demand_lookups: u64,
    demand_hits: u64,
    prefetch_issued: u64,
    bytes_prefill: u64,
    bytes_decode: u64,
}

impl<'a> Sim<'a> {
    fn new(trace: &'a InferenceTrace, hw: &'a HardwareSpec, cfg: &'a SimConfig) -> Self {
        let cache = cfg
            .policy
            .caches()
            .then(|| ExpertCache::new(hw.cache_capacity(), trace.model.expert_bytes));
        Sim {
            trace,
            hw,
            cfg,
            cache,
            link: Link::new(hw.link_latency, hw.link_bandwidth),
            events: Vec::new(),
            device_time: 0.0,
            pinned: BTreeSet::new(),
            origin: BTreeMap::new(),
            useful_prefetches: BTreeSet::new(),
            ttft: 0.0,
            step_spans: Vec::new(),
            retained_cells: Vec::new(),
            demand_lookups: 0,
            demand_hits: 0,
            prefetch_issued: 0,
            bytes_prefill: 0,
            bytes_decode: 0,
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        let layers = self.trace.model.num_layers;

        for layer in 0..layers {
            self.process_layer(Phase::Prefill, 0, layer)?;
        }
        self.ttft = self.device_time;

        for step in 0..self.trace.num_decode_steps() {
            let start = self.device_time;
            for layer in 0..layers {
                self.process_layer(Phase::Decode, step, layer)?;
            }
            self.step_spans.push(self.device_time - start);
        }
        Ok(())
    }

    fn finish(mut self) -> (Timeline, Metrics) {
        self.events.sort_by(|a, b| a.start.total_cmp(&b.start));
        let timeline = Timeline { events: self.events };
        let tpot = if self.step_spans.is_empty() {
            0.0
        } else {
            self.step_spans.iter().sum::<f64>() / self.step_spans.len() as f64
        };
        let retained = if self.retained_cells.is_empty() {
            1.0
        } else {
            self.retained_cells.iter().sum::<f64>() / self.retained_cells.len() as f64
        };
        let metrics = Metrics {
            ttft: self.ttft,
            tpot,
            prefetch_hit_rate: if self.prefetch_issued == 0 {
                0.0
            } else {
                self.useful_prefetches.len() as f64 / self.prefetch_issued as f64
            },
            cache_hit_rate: if self.demand_lookups == 0 {
                0.0
            } else {
                self.demand_hits as f64 / self.demand_lookups as f64
            },
            bytes_transferred: self.bytes_prefill + self.bytes_decode,
            bytes_prefill: self.bytes_prefill,
            bytes_decode: self.bytes_decode,
            retained_gate_mass: retained,
            stall_time_prefill: timeline.total_stall(Phase::Prefill),
            stall_time_decode: timeline.total_stall(Phase::Decode),
            demand_lookups: self.demand_lookups,
            demand_hits: self.demand_hits,
            prefetch_issued: self.prefetch_issued,
            prefetch_useful: self.useful_prefetches.len() as u64,
        };
        (timeline, metrics)
    }

    fn process_layer(&mut self, phase: Phase, step_idx: usize, layer: usize) -> Result<(), SimError> {
        let trace = self.trace;
        let spec = &trace.model;

        // (a) Attention compute; routing is known when it finishes.
        let attn = match phase {
            Phase::Prefill => self.hw.attention_time_prefill,
            Phase::Decode => self.hw.attention_time_decode,
        };
        let t0 = self.device_time;
        self.push_event(phase, step_idx, layer, t0, t0 + attn, EventKind::AttentionCompute);
        let t_route = t0 + attn;
        self.device_time = t_route;

        // Catch the cache up to this instant so lookups see the true state.
        self.sync_to(t_route);

        // (b) Resolve demand: routed experts in request order, with tiers.
        let (demand_order, assignment) = match phase {
            Phase::Prefill => {
                let steps: &[TokenStep] = &trace.prefill[layer];
                let assignment = match self.cfg.policy_config() {
                    Some(policy_cfg) => {
                        let heavy_cfg = self.cfg.heavy_config(steps.len());
                        let heavy = select_heavy_hitters(steps, &heavy_cfg)?;
                        let scores = prefill_importance(steps, &heavy, spec, layer);
                        assign_precisions(&scores, layer, spec, &policy_cfg)
                    }
                    None => PrecisionAssignment::uniform_high(layer, spec.num_experts),
                };
                // Request order: descending routed-token load, ties low index.
                let mut load = vec![0.0f64; spec.num_experts];
                for step in steps {
                    for e in step.routed_experts(spec.routing_topk) {
                        load[e] += 1.0;
                    }
                }
                let order: Vec<usize> = crate::topk::top_k_indices(&load, spec.num_experts)
                    .into_iter()
                    .filter(|&e| load[e] > 0.0)
                    .collect();
                (order, assignment)
            }
            Phase::Decode => {
                let step = &trace.decode[step_idx][layer];
                let assignment = match self.cfg.policy_config() {
                    Some(policy_cfg) => {
                        let scores = decode_importance(step, layer);
                        assign_precisions(&scores, layer, spec, &policy_cfg)
                    }
                    None => PrecisionAssignment::uniform_high(layer, spec.num_experts),
                };
                self.retained_cells.push(retained_cell(
                    step,
                    &assignment,
                    spec.routing_topk,
                    self.cfg.low_discount,
                ));
                (step.routed_experts(spec.routing_topk), assignment)
            }
        };

        // (c)+(d) Cache lookups and transfer queueing, in request order.
        let mut items: Vec<ComputeItem> = Vec::new();
        for &expert in &demand_order {
            let requested = match assignment.tier[expert] {
                Tier::High => Precision::High,
                Tier::Low => Precision::Low,
                Tier::Skip => continue,
            };
            let key = ExpertKey { layer, expert };
            self.demand_lookups += 1;
            let item = if self.cache.is_some() {
                let outcome = self.cache.as_mut().unwrap().lookup(key, requested);
                match outcome {
                    LookupOutcome::Hit(served) => {
                        self.demand_hits += 1;
                        self.cache.as_mut().unwrap().pin(key).expect("hit entry exists");
                        self.pinned.insert(key);
                        if let Some(&(id, TransferClass::Prefetch)) = self.origin.get(&key) {
                            self.useful_prefetches.insert(id);
                        }
                        ComputeItem { expert, key, served, transfer: None }
                    }
                    LookupOutcome::MissLoad(_) | LookupOutcome::PromoteLoad => {
                        self.demand_transfer(key, requested, t_route, phase, step_idx)
                    }
                }
            } else {
                // Load on demand: every use transfers, nothing is retained.
                let id = self.link.enqueue(
                    key,
                    requested,
                    spec.expert_bytes.get(requested),
                    t_route,
                    TransferClass::Demand,
                    phase,
                    step_idx,
                    true,
                );
                ComputeItem { expert, key, served: requested, transfer: Some(id) }
            };
            items.push(item);
        }

        // Queued speculative requests for this layer that no demand claimed
        // missed their window; drop them rather than double-pay the link.
        self.link.prune_stale_prefetches(phase, step_idx, layer);

        // Prefetch for the next layer now that routing is known; transfers
        // overlap this layer's expert compute.
        if self.cfg.policy.prefetches() && layer + 1 < spec.num_layers {
            self.issue_prefetches(phase, step_idx, layer, t_route);
        }

        // Commit all demand transfers so their completion times are known.
        let drained = self.link.drain_demands();
        for assigned in &drained {
            self.record_transfer(assigned);
        }

        // (e) Expert compute in weight-arrival order.
        let mut ready_items: Vec<(f64, ComputeItem)> = items
            .into_iter()
            .map(|item| {
                let ready = match item.transfer {
                    Some(id) => self.link.end_of(id).expect("demand transfer committed"),
                    None => t_route,
                };
                (ready, item)
            })
            .collect();
        ready_items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.expert.cmp(&b.1.expert)));

        let compute_cost = match phase {
            Phase::Prefill => self.hw.expert_compute_prefill,
            Phase::Decode => self.hw.expert_compute_decode,
        };
        for (ready, item) in ready_items {
            let free = self.device_time;
            let start = free.max(ready);
            self.sync_to(start);
            if start > free {
                self.push_event(phase, step_idx, layer, free, start, EventKind::Stall);
            }
            let cost = compute_cost.get(item.served) + self.hw.dequant_overhead.get(item.served);
            self.push_event(
                phase,
                step_idx,
                layer,
                start,
                start + cost,
                EventKind::ExpertCompute { expert: item.expert, precision: item.served },
            );
            self.device_time = start + cost;
            self.sync_to(self.device_time);
            if self.pinned.remove(&item.key) {
                if let Some(cache) = &mut self.cache {
                    cache.unpin(item.key).expect("pinned entry exists");
                }
            }
        }
        Ok(())
    }

    /// Queues (or attaches to) a transfer serving a demand miss.
    fn demand_transfer(
        &mut self,
        key: ExpertKey,
        requested: Precision,
        now: f64,
        phase: Phase,
        step_idx: usize,
    ) -> ComputeItem {
        match self.link.find_pending(key, requested) {
            Some(Pending::InFlight { id }) => {
                // Already on the link (typically a prefetch): ride it out.
                self.link.attach(id);
                if self.link.pending_class(id) == Some(TransferClass::Prefetch) {
                    self.useful_prefetches.insert(id);
                }
                let served = self.link.pending_precision(id).unwrap_or(requested);
                ComputeItem { expert: key.expert, key, served, transfer: Some(id) }
            }
            Some(Pending::QueuedPrefetch { id }) => {
                // Demands preempt queued prefetches; this one becomes the demand.
                self.link.promote_to_demand(id);
                self.useful_prefetches.insert(id);
                let served = self.link.pending_precision(id).unwrap_or(requested);
                ComputeItem { expert: key.expert, key, served, transfer: Some(id) }
            }
            Some(Pending::QueuedDemand { id }) => {
                let served = self.link.pending_precision(id).unwrap_or(requested);
                ComputeItem { expert: key.expert, key, served, transfer: Some(id) }
            }
            None => {
                let bytes = self.trace.model.expert_bytes.get(requested);
                let id = self.link.enqueue(
                    key,
                    requested,
                    bytes,
                    now,
                    TransferClass::Demand,
                    phase,
                    step_idx,
                    true,
                );
                ComputeItem { expert: key.expert, key, served: requested, transfer: Some(id) }
            }
        }
    }

    fn issue_prefetches(&mut self, phase: Phase, step_idx: usize, layer: usize, t_route: f64) {
        let trace = self.trace;
        let spec = &trace.model;
        let next_layer = layer + 1;
        let t = self.cfg.t_prefetch_for(phase, next_layer, spec);

        // The next layer's assignment as the predictions see it; the cache's
        // promotion and reuse rules arbitrate if reality disagrees.
        let requests = match phase {
            Phase::Prefill => {
                let steps: &[TokenStep] = &trace.prefill[layer];
                let next_assignment = match self.cfg.policy_config() {
                    Some(policy_cfg) => {
                        let heavy_cfg = self.cfg.heavy_config(steps.len());
                        let Ok(heavy) = select_heavy_hitters(steps, &heavy_cfg) else {
                            return;
                        };
                        let mut scores = vec![0.0; spec.num_experts];
                        for step in steps {
                            if heavy.contains(&step.token_id) {
                                for e in predict_topk(step, spec.routing_topk) {
                                    scores[e] += 1.0;
                                }
                            }
                        }
                        let scores = ImportanceScores {
                            layer: next_layer,
                            phase: Phase::Prefill,
                            scores,
                        };
                        assign_precisions(&scores, next_layer, spec, &policy_cfg)
                    }
                    None => PrecisionAssignment::uniform_high(next_layer, spec.num_experts),
                };
                prefill_prefetch(steps, t, spec.routing_topk, &next_assignment)
            }
            Phase::Decode => {
                let step = &trace.decode[step_idx][layer];
                let next_assignment =
                    match (self.cfg.policy_config(), &step.predicted_next_gate_scores) {
                        (Some(policy_cfg), Some(pred)) => {
                            let scores = ImportanceScores {
                                layer: next_layer,
                                phase: Phase::Decode,
                                scores: pred.clone(),
                            };
                            assign_precisions(&scores, next_layer, spec, &policy_cfg)
                        }
                        _ => PrecisionAssignment::uniform_high(next_layer, spec.num_experts),
                    };
                decode_prefetch(step, t, &next_assignment)
            }
        };

        for request in requests {
            let key = ExpertKey { layer: request.layer, expert: request.expert };
            // Skip what is already resident or moving at a satisfying precision.
            let resident = self
                .cache
                .as_ref()
                .and_then(|c| c.peek(key))
                .is_some_and(|cached| satisfies(cached, request.precision));
            if resident || self.link.find_pending(key, request.precision).is_some() {
                continue;
            }
            self.link.enqueue(
                key,
                request.precision,
                spec.expert_bytes.get(request.precision),
                t_route,
                TransferClass::Prefetch,
                phase,
                step_idx,
                false,
            );
            self.prefetch_issued += 1;
        }
    }

    /// Brings the model of time forward to `t`: commits every transfer that
    /// causally starts before `t`, then applies completions through `t` in
    /// completion order — inserting into the cache, updating provenance,
    /// and pinning entries a demand is about to compute with.
    fn sync_to(&mut self, t: f64) {
        let assigned = self.link.advance(t);
        for transfer in &assigned {
            self.record_transfer(transfer);
        }
        for done in self.link.completions_through(t) {
            let Some(cache) = &mut self.cache else { continue };
            match cache.insert(done.key, done.precision) {
                Ok(evicted) => {
                    for key in evicted {
                        self.origin.remove(&key);
                    }
                    self.origin.insert(done.key, (done.id, done.class));
                    if done.attached {
                        cache.pin(done.key).expect("just inserted");
                        self.pinned.insert(done.key);
                    }
                }
                Err(_) => {
                    // Pinned residents leave no room: execute from the
                    // transferred bytes without caching them.
                }
            }
        }
    }

    fn record_transfer(&mut self, t: &ScheduledTransfer) {
        match t.phase {
            Phase::Prefill => self.bytes_prefill += t.bytes,
            Phase::Decode => self.bytes_decode += t.bytes,
        }
        self.push_event(
            t.phase,
            t.step,
            t.key.layer,
            t.start,
            t.end,
            EventKind::Transfer {
                expert: t.key.expert,
                precision: t.precision,
                bytes: t.bytes,
                class: t.class,
            },
        );
    }

    fn push_event(
        &mut self,
        phase: Phase,
        step: usize,
        layer: usize,
        start: f64,
        end: f64,
        kind: EventKind,
    ) {
        self.events.push(Event {
            start,
            end,
            phase,
            step,
            layer,
            kind,
        });
    }
}

fn satisfies(available: Precision, requested: Precision) -> bool {
    available == Precision::High || requested == Precision::Low
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::PrecisionBytes;
    use std::collections::BTreeMap;

    const EPS: f64 = 1e-12;

    /// Hand-built trace: one token per decode step, routing and predictions
    /// dictated per layer by `route[layer]` (expert index, M = 2).
    fn tiny_trace(layers: usize, prefill_route: &[usize], decode_route: &[usize]) -> InferenceTrace {
        let model = ModelSpec {
            num_layers: layers,
            num_experts: 2,
            routing_topk: 1,
            expert_bytes: PrecisionBytes { high: 1000, low: 480 },
            attention_bytes_per_layer: 0,
        };
        let gates = |e: usize| {
            let mut g = vec![0.0; 2];
            g[e] = 1.0;
            g
        };
        let prefill = (0..layers)
            .map(|l| {
                vec![TokenStep {
                    token_id: 0,
                    gate_scores: gates(prefill_route[l]),
                    predicted_next_gate_scores: (l + 1 < layers)
                        .then(|| gates(prefill_route[l + 1])),
                    attention_importance: Some(1.0),
                }]
            })
            .collect();
        let decode = vec![(0..layers)
            .map(|l| TokenStep {
                token_id: 1,
                gate_scores: gates(decode_route[l]),
                predicted_next_gate_scores: (l + 1 < layers).then(|| gates(decode_route[l + 1])),
                attention_importance: None,
            })
            .collect()];
        InferenceTrace {
            model,
            prefill,
            decode,
            metadata: BTreeMap::new(),
        }
    }

    fn tiny_hw() -> HardwareSpec {
        HardwareSpec {
            link_bandwidth: 1e6, // 1000 bytes -> 1 ms
            link_latency: 1e-4,
            attention_time_prefill: 3e-3,
            attention_time_decode: 5e-4,
            expert_compute_prefill: PrecisionSeconds { high: 2e-3, low: 1.5e-3 },
            expert_compute_decode: PrecisionSeconds { high: 2e-3, low: 1.6e-3 },
            dequant_overhead: PrecisionSeconds::ZERO,
            vram_budget: 1_000_000,
            resident_reservation: 1,
        }
    }

    #[test]
    fn load_on_demand_single_layer_is_a_serial_sum() {
        let trace = tiny_trace(1, &[0], &[0]);
        let hw = tiny_hw();
        let cfg = SimConfig::new(Policy::LoadOnDemand, 0.0);
        let (_, metrics) = simulate(&trace, &hw, &cfg).unwrap();
        let transfer = hw.link_latency + 1000.0 / hw.link_bandwidth;
        let expected_ttft =
            hw.attention_time_prefill + transfer + hw.expert_compute_prefill.high;
        let expected_step = hw.attention_time_decode + transfer + hw.expert_compute_decode.high;
        assert!((metrics.ttft - expected_ttft).abs() < EPS);
        assert!((metrics.tpot - expected_step).abs() < EPS);
        assert_eq!(metrics.cache_hit_rate, 0.0);
    }

    #[test]
    fn cached_expert_removes_the_transfer() {
        let trace = tiny_trace(1, &[0], &[0]);
        let hw = tiny_hw();
        let cfg = SimConfig::new(Policy::CacheOnly, 0.0);
        let (_, metrics) = simulate(&trace, &hw, &cfg).unwrap();
        // Prefill warms the only expert; the decode step is compute-only.
        let expected_step = hw.attention_time_decode + hw.expert_compute_decode.high;
        assert!((metrics.tpot - expected_step).abs() < EPS);
        assert_eq!(metrics.demand_hits, 1);
        assert!(metrics.stall_time_decode.abs() < EPS);
    }

    #[test]
    fn prefetch_overlaps_next_layer_transfer() {
        // Prefill routes to expert 0 everywhere; decode routes to expert 1,
        // so decode layer 0 misses cold while layer 1 is covered by the
        // prefetch issued during layer 0 (predictions are exact).
        let trace = tiny_trace(2, &[0, 0], &[1, 1]);
        let hw = tiny_hw();
        let transfer = hw.link_latency + 1000.0 / hw.link_bandwidth; // 1.1 ms
        let covered = hw.expert_compute_decode.high + hw.attention_time_decode; // 2.5 ms
        assert!(covered > transfer, "test construction needs full overlap");

        let (_, with_prefetch) = simulate(
            &trace,
            &hw,
            &SimConfig::new(Policy::CachePrefetch, 0.0),
        )
        .unwrap();
        let (_, without) = simulate(&trace, &hw, &SimConfig::new(Policy::CacheOnly, 0.0)).unwrap();

        // Cache-only stalls at both decode layers, prefetch only at layer 0.
        assert!((without.stall_time_decode - 2.0 * transfer).abs() < EPS);
        assert!((with_prefetch.stall_time_decode - transfer).abs() < EPS);
        let expected_step = 2.0 * hw.attention_time_decode
            + 2.0 * hw.expert_compute_decode.high
            + transfer;
        assert!((with_prefetch.tpot - expected_step).abs() < EPS);
        // One prefetch per phase transition; both get demanded.
        assert_eq!(with_prefetch.prefetch_issued, 2);
        assert_eq!(with_prefetch.prefetch_useful, 2);
        assert_eq!(with_prefetch.prefetch_hit_rate, 1.0);
    }

    #[test]
    fn small_capacity_thrashes_and_larger_capacity_hits() {
        // Decode alternates between experts 0 and 1 at a single layer.
        let mut trace = tiny_trace(1, &[0], &[0]);
        let step = |e: usize, id: usize| {
            let mut g = vec![0.0; 2];
            g[e] = 1.0;
            vec![TokenStep {
                token_id: id,
                gate_scores: g,
                predicted_next_gate_scores: None,
                attention_importance: None,
            }]
        };
        trace.decode = vec![step(0, 1), step(1, 2), step(0, 3), step(1, 4)];

        let mut hw = tiny_hw();
        hw.vram_budget = 1000 + hw.resident_reservation; // exactly one expert
        let (_, one_slot) = simulate(&trace, &hw, &SimConfig::new(Policy::CacheOnly, 0.0)).unwrap();
        assert_eq!(one_slot.demand_hits, 1); // only decode step 1 reuses prefill
        let transfer = hw.link_latency + 1000.0 / hw.link_bandwidth;
        let miss_step = hw.attention_time_decode + transfer + hw.expert_compute_decode.high;
        let hit_step = hw.attention_time_decode + hw.expert_compute_decode.high;
        assert!((one_slot.tpot - (3.0 * miss_step + hit_step) / 4.0).abs() < EPS);

        hw.vram_budget = 2000 + hw.resident_reservation; // both experts fit
        let (_, two_slots) = simulate(&trace, &hw, &SimConfig::new(Policy::CacheOnly, 0.0)).unwrap();
        assert_eq!(two_slots.demand_hits, 3); // steps 2..4 all hit
        assert!((two_slots.tpot - (miss_step + 3.0 * hit_step) / 4.0).abs() < EPS);
    }

    #[test]
    fn lambda_one_dyquant_equals_uniform_cache() {
        let trace = crate::defaults::default_trace_small();
        let hw = tiny_hw();
        let (tl_cache, m_cache) =
            simulate(&trace, &hw, &SimConfig::new(Policy::CacheOnly, 1.0)).unwrap();
        let (tl_dyq, m_dyq) =
            simulate(&trace, &hw, &SimConfig::new(Policy::CacheDyquant42, 1.0)).unwrap();
        assert_eq!(tl_cache, tl_dyq);
        assert_eq!(m_cache, m_dyq);
        assert_eq!(m_dyq.retained_gate_mass, 1.0);
    }

    #[test]
    fn timelines_are_deterministic() {
        let trace = crate::defaults::default_trace_small();
        let hw = tiny_hw();
        for policy in [
            Policy::LoadOnDemand,
            Policy::CacheOnly,
            Policy::CachePrefetch,
            Policy::CacheDyquant42,
            Policy::CacheDyquantPrefetch40,
        ] {
            let cfg = SimConfig::new(policy, 0.3);
            let a = simulate(&trace, &hw, &cfg).unwrap();
            let b = simulate(&trace, &hw, &cfg).unwrap();
            assert_eq!(a, b, "{policy:?} not deterministic");
        }
    }

    #[test]
    fn engine_retained_mass_matches_quality_proxy() {
        let trace = crate::defaults::default_trace_small();
        let hw = tiny_hw();
        for (policy, lambda) in [
            (Policy::CacheDyquant42, 0.0),
            (Policy::CacheDyquant40, 0.25),
            (Policy::CacheDyquantPrefetch40, 0.5),
            (Policy::CacheOnly, 0.0),
        ] {
            let cfg = SimConfig::new(policy, lambda);
            let (_, metrics) = simulate(&trace, &hw, &cfg).unwrap();
            let proxy = quality_proxy(&trace, &cfg).unwrap();
            assert_eq!(metrics.retained_gate_mass, proxy);
        }
    }

    #[test]
    fn rejects_oversized_t_prefetch() {
        let trace = tiny_trace(1, &[0], &[0]);
        let mut cfg = SimConfig::new(Policy::CachePrefetch, 0.0);
        cfg.t_prefetch = Some(3); // M = 2
        let err = simulate(&trace, &tiny_hw(), &cfg).unwrap_err();
        assert!(err.to_string().contains("t_prefetch"));
    }

    #[test]
    fn quality_proxy_examples() {
        // λ=1 keeps everything: mass is exactly 1.
        let trace = crate::defaults::default_trace_small();
        let cfg = SimConfig::new(Policy::CacheDyquant40, 1.0);
        assert_eq!(quality_proxy(&trace, &cfg).unwrap(), 1.0);

        // Single routed pair [0.7, 0.3] with t_l = 1 under 4/0 keeps 0.7.
        let step = TokenStep {
            token_id: 0,
            gate_scores: vec![0.7, 0.3],
            predicted_next_gate_scores: None,
            attention_importance: None,
        };
        let assignment = PrecisionAssignment {
            layer: 0,
            tier: vec![Tier::High, Tier::Skip],
            high_count: 1,
        };
        let mass = retained_cell(&step, &assignment, 2, 0.5);
        assert!((mass - 0.7).abs() < EPS);
        // 4/2 with δ=0.5 credits the low expert half its weight.
        let assignment_42 = PrecisionAssignment {
            layer: 0,
            tier: vec![Tier::High, Tier::Low],
            high_count: 1,
        };
        let mass_42 = retained_cell(&step, &assignment_42, 2, 0.5);
        assert!((mass_42 - 0.85).abs() < EPS);
    }

    #[test]
    fn quality_proxy_monotone_in_lambda() {
        let trace = crate::defaults::default_trace_small();
        for policy in [Policy::CacheDyquant42, Policy::CacheDyquant40] {
            let mut last = -1.0;
            for lambda in [0.0, 0.5, 1.0] {
                let mass = quality_proxy(&trace, &SimConfig::new(policy, lambda)).unwrap();
                assert!(mass >= last, "{policy:?}: {mass} after {last}");
                last = mass;
            }
            assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn ablation_single_row_speedup_is_one() {
        let trace = crate::defaults::default_trace_small();
        let hw = tiny_hw();
        let report =
            run_ablation(&trace, &hw, &[SimConfig::new(Policy::CacheOnly, 0.0)]).unwrap();
        assert_eq!(report.rows[0].speedup_ttft, 1.0);
        assert_eq!(report.rows[0].speedup_tpot, 1.0);
        assert!(run_ablation(&trace, &hw, &[]).is_err());
    }
}
