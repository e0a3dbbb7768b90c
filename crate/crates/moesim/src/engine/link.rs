//! The single host→device transfer link.
//!
//! Transfers serialize on one bandwidth-limited channel with a fixed
//! per-transfer latency. Two queues feed it: demand misses and speculative
//! prefetches. When both have a transfer ready to start at the same instant
//! the demand goes first; a transfer already started is never preempted.
//! Assignment is lazy but causally equivalent to an eager schedule: callers
//! advance the link up to a horizon before consulting cache state there.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap, VecDeque};

use crate::cache::ExpertKey;
use crate::importance::Phase;
use crate::traces::Precision;

use super::timeline::TransferClass;

/// A transfer waiting for the link.
#[derive(Debug, Clone)]
pub(super) struct QueuedTransfer {
    pub id: u64,
    pub key: ExpertKey,
    pub precision: Precision,
    pub bytes: u64,
    pub enqueue: f64,
    pub class: TransferClass,
    pub phase: Phase,
    pub step: usize,
    /// A demand is waiting on this transfer's completion.
    pub attached: bool,
}

/// A transfer with link time assigned; completion not yet applied.
#[derive(Debug, Clone)]
pub(super) struct ScheduledTransfer {
    pub id: u64,
    pub key: ExpertKey,
    pub precision: Precision,
    pub bytes: u64,
    pub start: f64,
    pub end: f64,
    pub class: TransferClass,
    pub phase: Phase,
    pub step: usize,
    pub attached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Pending {
    /// Already on the link; completes at the given time.
    InFlight { id: u64 },
    /// Still queued as a prefetch.
    QueuedPrefetch { id: u64 },
    /// Still queued as a demand.
    QueuedDemand { id: u64 },
}

#[derive(Debug)]
pub(super) struct Link {
    latency: f64,
    bandwidth: f64,
    free_at: f64,
    next_id: u64,
    demand_q: VecDeque<QueuedTransfer>,
    prefetch_q: VecDeque<QueuedTransfer>,
    scheduled: BTreeMap<u64, ScheduledTransfer>,
    completions: BinaryHeap<Reverse<(OrdF64, u64)>>,
}

/// Total-order wrapper so completion times can key a heap.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Link {
    pub fn new(latency: f64, bandwidth: f64) -> Self {
        Link {
            latency,
            bandwidth,
            free_at: 0.0,
            next_id: 0,
            demand_q: VecDeque::new(),
            prefetch_q: VecDeque::new(),
            scheduled: BTreeMap::new(),
            completions: BinaryHeap::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn enqueue(
        &mut self,
        key: ExpertKey,
        precision: Precision,
        bytes: u64,
        enqueue: f64,
        class: TransferClass,
        phase: Phase,
        step: usize,
        attached: bool,
    ) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let item = QueuedTransfer {
            id,
            key,
            precision,
            bytes,
            enqueue,
            class,
            phase,
            step,
            attached,
        };
        match class {
            TransferClass::Demand => self.demand_q.push_back(item),
            TransferClass::Prefetch => self.prefetch_q.push_back(item),
        }
        id
    }

    /// Earliest (start, is_demand) the link could begin next, if any work is queued.
    fn next_candidate(&self) -> Option<(f64, bool)> {
        let demand = self
            .demand_q
            .front()
            .map(|d| self.free_at.max(d.enqueue));
        let prefetch = self
            .prefetch_q
            .front()
            .map(|p| self.free_at.max(p.enqueue));
        match (demand, prefetch) {
            (None, None) => None,
            (Some(d), None) => Some((d, true)),
            (None, Some(p)) => Some((p, false)),
            (Some(d), Some(p)) => {
                if d <= p {
                    Some((d, true))
                } else {
                    Some((p, false))
                }
            }
        }
    }

    fn assign_next(&mut self) -> Option<&ScheduledTransfer> {
        let (start, is_demand) = self.next_candidate()?;
        let item = if is_demand {
            self.demand_q.pop_front().unwrap()
        } else {
            self.prefetch_q.pop_front().unwrap()
        };
        let duration = self.latency + item.bytes as f64 / self.bandwidth;
        let end = start + duration;
        self.free_at = end;
        let id = item.id;
        self.completions.push(Reverse((OrdF64(end), id)));
        self.scheduled.insert(
            id,
            ScheduledTransfer {
                id,
                key: item.key,
                precision: item.precision,
                bytes: item.bytes,
                start,
                end,
                class: item.class,
                phase: item.phase,
                step: item.step,
                attached: item.attached,
            },
        );
        self.scheduled.get(&id)
    }

    /// Commits every transfer that would start strictly before `horizon`.
    /// Returns the newly assigned transfers in link order.
    pub fn advance(&mut self, horizon: f64) -> Vec<ScheduledTransfer> {
        let mut assigned = Vec::new();
        while let Some((start, _)) = self.next_candidate() {
            if start >= horizon {
                break;
            }
            assigned.push(self.assign_next().unwrap().clone());
        }
        assigned
    }

    /// Commits transfers until the demand queue is empty. Queued prefetches
    /// that would causally start first are committed along the way.
    pub fn drain_demands(&mut self) -> Vec<ScheduledTransfer> {
        let mut assigned = Vec::new();
        while !self.demand_q.is_empty() {
            assigned.push(self.assign_next().unwrap().clone());
        }
        assigned
    }

    /// Completion time of an assigned transfer.
    pub fn end_of(&self, id: u64) -> Option<f64> {
        self.scheduled.get(&id).map(|s| s.end)
    }

    /// Pops completions with `end <= t` in (end, id) order.
    pub fn completions_through(&mut self, t: f64) -> Vec<ScheduledTransfer> {
        let mut done = Vec::new();
        while let Some(Reverse((OrdF64(end), id))) = self.completions.peek().copied() {
            if end > t {
                break;
            }
            self.completions.pop();
            done.push(self.scheduled.remove(&id).expect("scheduled"));
        }
        done
    }

    /// Finds a pending (queued or in-flight) transfer whose precision
    /// satisfies `requested`, preferring one already on the link.
    pub fn find_pending(&self, key: ExpertKey, requested: Precision) -> Option<Pending> {
        let ok = |p: Precision| p == Precision::High || requested == Precision::Low;
        if let Some(s) = self
            .scheduled
            .values()
            .find(|s| s.key == key && ok(s.precision))
        {
            return Some(Pending::InFlight { id: s.id });
        }
        if let Some(q) = self.demand_q.iter().find(|q| q.key == key && ok(q.precision)) {
            return Some(Pending::QueuedDemand { id: q.id });
        }
        if let Some(q) = self.prefetch_q.iter().find(|q| q.key == key && ok(q.precision)) {
            return Some(Pending::QueuedPrefetch { id: q.id });
        }
        None
    }

    /// Precision of a queued or in-flight transfer.
    pub fn pending_precision(&self, id: u64) -> Option<Precision> {
        if let Some(s) = self.scheduled.get(&id) {
            return Some(s.precision);
        }
        self.demand_q
            .iter()
            .chain(self.prefetch_q.iter())
            .find(|q| q.id == id)
            .map(|q| q.precision)
    }

    /// Class of a queued or in-flight transfer.
    pub fn pending_class(&self, id: u64) -> Option<TransferClass> {
        if let Some(s) = self.scheduled.get(&id) {
            return Some(s.class);
        }
        self.demand_q
            .iter()
            .chain(self.prefetch_q.iter())
            .find(|q| q.id == id)
            .map(|q| q.class)
    }

    /// Marks an assigned or queued transfer as demand-attached.
    pub fn attach(&mut self, id: u64) {
        if let Some(s) = self.scheduled.get_mut(&id) {
            s.attached = true;
            return;
        }
        for q in self.demand_q.iter_mut().chain(self.prefetch_q.iter_mut()) {
            if q.id == id {
                q.attached = true;
                return;
            }
        }
    }

    /// Moves a queued prefetch into the demand class (a demand now waits on
    /// it). In-flight transfers are left alone.
    pub fn promote_to_demand(&mut self, id: u64) {
        if let Some(pos) = self.prefetch_q.iter().position(|q| q.id == id) {
            let mut item = self.prefetch_q.remove(pos).unwrap();
            item.class = TransferClass::Demand;
            item.attached = true;
            self.demand_q.push_back(item);
        }
    }

    /// Drops queued prefetches targeting a layer whose demands are now
    /// resolved; their window has passed. In-flight transfers complete.
    pub fn prune_stale_prefetches(&mut self, phase: Phase, step: usize, layer: usize) {
        self.prefetch_q
            .retain(|q| !(q.phase == phase && q.step == step && q.key.layer == layer));
    }
}
