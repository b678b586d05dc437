use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::trace::LINE_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DramConfig {
    /// Fixed service time per read (tRP + tRCD + tCAS).
    pub service_latency: u64,
    /// Data rate per core in GB/s.
    pub gbps_per_core: f64,
    pub cpu_ghz: f64,
}

impl Default for DramConfig {
    fn default() -> Self {
        DramConfig {
            service_latency: 3 * 24,
            gbps_per_core: 12.8,
            cpu_ghz: 3.8,
        }
    }
}

impl DramConfig {
    pub fn bytes_per_cycle(&self, cores: usize) -> f64 {
        self.gbps_per_core * cores as f64 / self.cpu_ghz
    }

    /// Cycles between consecutive line transfers: ⌈64 / bytes-per-cycle⌉.
    pub fn cycles_per_line(&self, cores: usize) -> u64 {
        (LINE_BYTES as f64 / self.bytes_per_cycle(cores)).ceil() as u64
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.service_latency == 0 {
            errs.push("dram.service_latency must be positive".into());
        }
        if !(self.gbps_per_core.is_finite() && self.gbps_per_core > 0.0) {
            errs.push("dram.gbps_per_core must be positive".into());
        }
        if !(self.cpu_ghz.is_finite() && self.cpu_ghz > 0.0) {
            errs.push("dram.cpu_ghz must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReadKind {
    Demand,
    Prefetch,
    Speculative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramResponse {
    pub completion: u64,
    /// Joined a read already in flight; no new transaction.
    pub merged: bool,
    /// Cycles spent waiting for a bandwidth slot.
    pub queue_delay: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramCounters {
    pub demand_reads: u64,
    pub prefetch_reads: u64,
    pub speculative_reads: u64,
    pub merged: u64,
    pub writebacks: u64,
    pub queue_delay: u64,
}

impl DramCounters {
    pub fn reads(&self) -> u64 {
        self.demand_reads + self.prefetch_reads + self.speculative_reads
    }

    pub fn transactions(&self) -> u64 {
        self.reads() + self.writebacks
    }
}

/// Fixed-latency DRAM behind a bandwidth limiter, merging reads to the same
/// line while one is in flight.
///
/// Each transaction occupies the data bus for `cycles_per_line` cycles. A
/// request takes the earliest free bus slot at or after its arrival, so
/// requests may be presented out of arrival order.
#[derive(Debug, Clone)]
pub struct DramModel {
    latency: u64,
    interval: u64,
    slots: BTreeSet<u64>,
    inflight: HashMap<u64, u64>,
    horizon: u64,
    pub counters: DramCounters,
}

impl DramModel {
    pub fn new(cfg: &DramConfig, cores: usize) -> Self {
        Self::with_interval(cfg.service_latency, cfg.cycles_per_line(cores))
    }

    pub fn with_interval(latency: u64, cycles_per_line: u64) -> Self {
        DramModel {
            latency,
            interval: cycles_per_line.max(1),
            slots: BTreeSet::new(),
            inflight: HashMap::new(),
            horizon: 0,
            counters: DramCounters::default(),
        }
    }

    pub fn cycles_per_line(&self) -> u64 {
        self.interval
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    fn take_slot(&mut self, arrival: u64) -> u64 {
        let i = self.interval;
        let mut s = arrival;
        while let Some(&x) = self.slots.range(s.saturating_sub(i - 1)..s + i).next() {
            s = x + i;
        }
        self.slots.insert(s);
        s
    }

    /// Issues a read for `line` arriving at `now`.
    pub fn issue(&mut self, line: u64, now: u64, kind: ReadKind) -> DramResponse {
        if let Some(&done) = self.inflight.get(&line) {
            if done > now {
                self.counters.merged += 1;
                return DramResponse {
                    completion: done,
                    merged: true,
                    queue_delay: 0,
                };
            }
        }
        let start = self.take_slot(now);
        let completion = start + self.latency;
        self.inflight.insert(line, completion);
        match kind {
            ReadKind::Demand => self.counters.demand_reads += 1,
            ReadKind::Prefetch => self.counters.prefetch_reads += 1,
            ReadKind::Speculative => self.counters.speculative_reads += 1,
        }
        self.counters.queue_delay += start - now;
        DramResponse {
            completion,
            merged: false,
            queue_delay: start - now,
        }
    }

    pub fn is_inflight(&self, line: u64, now: u64) -> bool {
        self.inflight.get(&line).is_some_and(|&d| d > now)
    }

    /// A dirty line written back at `now`; it consumes a bus slot.
    pub fn writeback(&mut self, _line: u64, now: u64) {
        self.take_slot(now);
        self.counters.writebacks += 1;
    }

    /// Promises that no future request arrives before `t`; drops state
    /// that can no longer matter.
    pub fn advance(&mut self, t: u64) {
        if t <= self.horizon + 4096 {
            return;
        }
        self.horizon = t;
        let cut = t.saturating_sub(self.interval);
        self.slots = self.slots.split_off(&cut);
        self.inflight.retain(|_, done| *done > t);
    }
}
