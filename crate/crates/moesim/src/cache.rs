//! Byte-budgeted mixed-precision expert cache.
//!
//! An LRU cache over (layer, expert) keys extended with three rules:
//!
//! - **No duplication** — an expert is stored in exactly one format; a new
//!   precision replaces the old entry.
//! - **Precision promotion** — a high-precision request against a cached
//!   low-precision copy is a miss. The low copy stays usable until the high
//!   bytes arrive; the replacement happens atomically at insert.
//! - **Conservative reuse** — a low-precision request against a cached
//!   high-precision copy is served from the high copy with no I/O.
//!
//! Entries are pinned with counts while in flight or executing; pinned
//! entries are never evicted. The cache is a single logical resource owned
//! by the engine's event loop; operations are individually atomic and never
//! block.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::traces::{Precision, PrecisionBytes};

/// Cache key: one expert instance at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertKey {
    pub layer: usize,
    pub expert: usize,
}

impl std::fmt::Display for ExpertKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(layer {}, expert {})", self.layer, self.expert)
    }
}

/// Result of a lookup, decided solely by requested vs. cached precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupOutcome {
    /// Resident at a satisfying precision; recency refreshed.
    Hit(Precision),
    /// Absent: load at the requested precision.
    MissLoad(Precision),
    /// Cached low, requested high: load high, replace the low copy on arrival.
    PromoteLoad,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("entry of {needed} bytes cannot fit: only {reclaimable} bytes are unpinned of {capacity}")]
    Capacity {
        needed: u64,
        reclaimable: u64,
        capacity: u64,
    },
    #[error("expert {0} is not cached")]
    NotFound(ExpertKey),
    #[error("expert {0} is not pinned")]
    NotPinned(ExpertKey),
}

/// Introspection view of one cache entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: ExpertKey,
    pub precision: Precision,
    pub bytes: u64,
    pub last_use: u64,
    pub pin_count: u32,
}

#[derive(Debug, Clone)]
struct EntryState {
    precision: Precision,
    bytes: u64,
    last_use: u64,
    pin_count: u32,
}

/// The cache proper. `capacity_bytes` covers expert weights only; resident
/// non-expert weights are accounted upstream as a fixed reservation.
#[derive(Debug)]
pub struct ExpertCache {
    capacity: u64,
    entry_bytes: PrecisionBytes,
    entries: BTreeMap<ExpertKey, EntryState>,
    used: u64,
    clock: u64,
}

impl ExpertCache {
    pub fn new(capacity_bytes: u64, entry_bytes: PrecisionBytes) -> Self {
        ExpertCache {
            capacity: capacity_bytes,
            entry_bytes,
            entries: BTreeMap::new(),
            used: 0,
            clock: 0,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resolves a request against the decision table. Hits refresh recency
    /// (including conservative-reuse hits: the high copy was used).
    pub fn lookup(&mut self, key: ExpertKey, requested: Precision) -> LookupOutcome {
        let clock = &mut self.clock;
        match self.entries.get_mut(&key) {
            None => LookupOutcome::MissLoad(requested),
            Some(entry) => match (requested, entry.precision) {
                (Precision::High, Precision::Low) => LookupOutcome::PromoteLoad,
                (_, cached) => {
                    *clock += 1;
                    entry.last_use = *clock;
                    LookupOutcome::Hit(cached)
                }
            },
        }
    }

    /// Non-mutating residency probe (no recency update).
    pub fn peek(&self, key: ExpertKey) -> Option<Precision> {
        self.entries.get(&key).map(|e| e.precision)
    }

    /// Inserts `key` at `precision`, evicting unpinned least-recently-used
    /// entries until it fits. Returns evicted keys in eviction order; a
    /// replaced same-key entry appears first. Re-inserting the resident
    /// precision only refreshes recency.
    ///
    /// Fails without mutating when pinned entries alone make the insert
    /// impossible; callers treat that as "execute without caching".
    pub fn insert(&mut self, key: ExpertKey, precision: Precision) -> Result<Vec<ExpertKey>, CacheError> {
        let bytes = self.entry_bytes.get(precision);
        if let Some(existing) = self.entries.get_mut(&key) {
            if existing.precision == precision {
                self.clock += 1;
                existing.last_use = self.clock;
                return Ok(Vec::new());
            }
        }

        let pinned_other: u64 = self
            .entries
            .iter()
            .filter(|(k, e)| **k != key && e.pin_count > 0)
            .map(|(_, e)| e.bytes)
            .sum();
        if bytes.saturating_add(pinned_other) > self.capacity {
            return Err(CacheError::Capacity {
                needed: bytes,
                reclaimable: self.capacity.saturating_sub(pinned_other),
                capacity: self.capacity,
            });
        }

        let mut evicted = Vec::new();
        // No duplication: replace the old-format entry, carrying its pins to
        // the new copy (the expert, not the bytes, is what is pinned).
        let carried_pins = match self.entries.remove(&key) {
            Some(old) => {
                self.used -= old.bytes;
                evicted.push(key);
                old.pin_count
            }
            None => 0,
        };
        while self.used + bytes > self.capacity {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.pin_count == 0)
                .min_by_key(|(_, e)| e.last_use)
                .map(|(k, _)| *k)
                .expect("feasibility checked against pinned bytes");
            let gone = self.entries.remove(&victim).unwrap();
            self.used -= gone.bytes;
            evicted.push(victim);
        }
        self.clock += 1;
        self.entries.insert(
            key,
            EntryState {
                precision,
                bytes,
                last_use: self.clock,
                pin_count: carried_pins,
            },
        );
        self.used += bytes;
        Ok(evicted)
    }

    /// Increments the pin count; pinned entries survive eviction.
    pub fn pin(&mut self, key: ExpertKey) -> Result<(), CacheError> {
        match self.entries.get_mut(&key) {
            Some(e) => {
                e.pin_count += 1;
                Ok(())
            }
            None => Err(CacheError::NotFound(key)),
        }
    }

    pub fn unpin(&mut self, key: ExpertKey) -> Result<(), CacheError> {
        match self.entries.get_mut(&key) {
            Some(e) if e.pin_count > 0 => {
                e.pin_count -= 1;
                Ok(())
            }
            Some(_) => Err(CacheError::NotPinned(key)),
            None => Err(CacheError::NotFound(key)),
        }
    }

    /// Entries most-recently-used first.
    pub fn snapshot(&self) -> Vec<CacheEntry> {
        let mut entries: Vec<CacheEntry> = self
            .entries
            .iter()
            .map(|(k, e)| CacheEntry {
                key: *k,
                precision: e.precision,
                bytes: e.bytes,
                last_use: e.last_use,
                pin_count: e.pin_count,
            })
            .collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.last_use));
        entries
    }
}
