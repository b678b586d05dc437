//! Trace replay through the hierarchy under a load-window core model.
//!
//! Each core dispatches instructions four per cycle, keeps at most `window`
//! memory operations in flight and retires them in program order. Memory
//! operations are processed in dispatch order; every request carries the
//! cycle it reaches each level, and cache contents are updated as soon as
//! a request is processed, with the fill's arrival recorded as the line's
//! ready time. A later access to a line whose fill is still on its way
//! waits for it, which is how MSHR merging shows up.
//!
//! Predictor training is applied `window` operations after the operation
//! that produced it. The delay stands in for the time between prediction
//! and completion, and keeping it structural (rather than cycle-driven)
//! makes predictor state independent of timing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SimError};
use crate::memhier::{
    line_of, Cache, CacheGeometry, DramConfig, DramCounters, DramModel, Evicted, Level, Lookup, Mshr,
    MshrEntry, PageMap, ReadKind,
};
use crate::offchip::{ConsumeAt, Flp, RequestMetadata, Slp, SlpDecision, VariantName};
use crate::perceptron::{FlpDecision, PerceptronConfig};
use crate::prefetch::{L1dPrefetcher, PrefetchConfig, StreamPrefetcher};
use crate::stats::{merge_stats, SimStats};
use crate::trace::{AccessKind, TraceRecord, LINE_BYTES};

/// Non-memory instructions dispatched per cycle.
pub const DISPATCH_WIDTH: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub l1d: CacheGeometry,
    pub l2: CacheGeometry,
    /// LLC geometry per core; a multi-core run scales capacity and MSHRs.
    pub llc: CacheGeometry,
    pub dram: DramConfig,
    pub prefetch: PrefetchConfig,
    pub perceptron: PerceptronConfig,
    pub variant: VariantName,
    /// Memory operations in flight per core.
    pub window: usize,
    pub page_size: u64,
    /// Seed for scattering physical frames; sequential frames when absent.
    pub page_shuffle: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            l1d: CacheGeometry::L1D,
            l2: CacheGeometry::L2,
            llc: CacheGeometry::LLC,
            dram: DramConfig::default(),
            prefetch: PrefetchConfig::default(),
            perceptron: PerceptronConfig::default(),
            variant: VariantName::Baseline,
            window: 16,
            page_size: 4096,
            page_shuffle: None,
        }
    }
}

impl SimConfig {
    pub fn with_variant(mut self, variant: VariantName) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        errs.extend(self.l1d.validate("l1d"));
        errs.extend(self.l2.validate("l2"));
        errs.extend(self.llc.validate("llc"));
        errs.extend(self.dram.validate());
        errs.extend(self.prefetch.validate());
        errs.extend(self.perceptron.validate());
        if self.window == 0 || self.window > 4096 {
            errs.push(format!("window must be within 1..=4096, got {}", self.window));
        }
        if !self.page_size.is_power_of_two() || self.page_size < 4096 {
            errs.push(format!(
                "page_size must be a power of two of at least 4096, got {}",
                self.page_size
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Timing of one memory operation, reported to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpTiming {
    pub core: usize,
    pub index: usize,
    pub kind: AccessKind,
    pub issue: u64,
    pub completion: u64,
    pub retire: u64,
    pub served: Level,
    pub speculated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticoreStats {
    pub cores: Vec<SimStats>,
    /// Counters summed over cores; `cycles` is the slowest core's.
    pub total: SimStats,
    /// Traffic seen by the shared DRAM.
    pub dram: DramCounters,
}

/// Simulates one trace on one core.
pub fn simulate(trace: &[TraceRecord], cfg: &SimConfig) -> Result<SimStats, SimError> {
    simulate_observed(trace, cfg, |_| {})
}

/// As [`simulate`], calling `observe` once per memory operation.
pub fn simulate_observed(
    trace: &[TraceRecord],
    cfg: &SimConfig,
    observe: impl FnMut(&OpTiming),
) -> Result<SimStats, SimError> {
    let mut sys = System::new(&[trace], cfg, true)?;
    sys.run(observe);
    sys.finish().map(|mut m| m.cores.remove(0))
}

/// Simulates `traces.len() ≥ 2` cores sharing the LLC and DRAM.
pub fn simulate_multicore<T: AsRef<[TraceRecord]>>(traces: &[T], cfg: &SimConfig) -> Result<MulticoreStats, SimError> {
    if traces.len() < 2 {
        return Err(SimError::Input("at least two traces for a multi-core run".into()));
    }
    let refs: Vec<&[TraceRecord]> = traces.iter().map(|t| t.as_ref()).collect();
    let mut sys = System::new(&refs, cfg, true)?;
    sys.run(|_| {});
    sys.finish()
}

/// Runs without instantiating any off-chip predictor.
#[cfg(test)]
fn simulate_without_offchip(trace: &[TraceRecord], cfg: &SimConfig) -> Result<SimStats, SimError> {
    let mut sys = System::new(&[trace], cfg, false)?;
    sys.run(|_| {});
    sys.finish().map(|mut m| m.cores.remove(0))
}

#[derive(Debug, Clone, Copy)]
enum Training {
    Flp {
        metadata: RequestMetadata,
        vaddr: u64,
        served: Level,
    },
    Slp {
        metadata: RequestMetadata,
        paddr: u64,
        served: Level,
    },
}

struct OffChip {
    flp: Flp,
    slp: Slp,
    consume_at: ConsumeAt,
}

struct Shared {
    llc: Cache,
    llc_mshr: Mshr,
    dram: DramModel,
    pages: PageMap,
}

struct Core<'t> {
    id: usize,
    trace: &'t [TraceRecord],
    next: usize,
    l1d: Cache,
    l2: Cache,
    l1d_mshr: Mshr,
    l2_mshr: Mshr,
    l1d_pf: L1dPrefetcher,
    l2_pf: StreamPrefetcher,
    /// Stream prefetch targets waiting to issue, with their issue cycle.
    l2_pending: Vec<(u64, u64)>,
    offchip: Option<OffChip>,
    last4: [u64; 4],
    /// Retire cycles of the last `window` memory operations.
    inflight: VecDeque<u64>,
    window: usize,
    dispatch_slot: u64,
    last_retire: u64,
    training: VecDeque<(usize, Training)>,
    last4_bits: u32,
    stats: SimStats,
}

struct System<'t> {
    cores: Vec<Core<'t>>,
    shared: Shared,
}

impl<'t> System<'t> {
    fn new(traces: &[&'t [TraceRecord]], cfg: &SimConfig, with_offchip: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = traces.len();
        if n == 0 {
            return Err(SimError::Input("at least one trace".into()));
        }
        for t in traces {
            if t.is_empty() {
                return Err(SimError::Input("non-empty traces".into()));
            }
            if let Some(i) = t.iter().position(|r| r.pc == 0) {
                return Err(crate::error::TraceError::InvalidRecord {
                    index: i,
                    reason: "pc is zero".into(),
                }
                .into());
            }
        }
        let variant = cfg.variant.variant();
        let cores = traces
            .iter()
            .enumerate()
            .map(|(id, trace)| Core {
                id,
                trace,
                next: 0,
                l1d: Cache::new(cfg.l1d),
                l2: Cache::new(cfg.l2),
                l1d_mshr: Mshr::new(cfg.l1d.mshr),
                l2_mshr: Mshr::new(cfg.l2.mshr),
                l1d_pf: L1dPrefetcher::new(cfg.prefetch.l1d, cfg.prefetch.degree, cfg.page_size),
                l2_pf: StreamPrefetcher::new(cfg.prefetch.l2, cfg.prefetch.l2_degree, cfg.prefetch.l2_distance, cfg.page_size),
                l2_pending: Vec::new(),
                offchip: with_offchip.then(|| OffChip {
                    flp: Flp::new(&cfg.perceptron, variant.consume_at),
                    slp: Slp::new(&cfg.perceptron, &variant),
                    consume_at: variant.consume_at,
                }),
                last4: [0; 4],
                inflight: VecDeque::with_capacity(cfg.window),
                window: cfg.window,
                dispatch_slot: 0,
                last_retire: 0,
                training: VecDeque::new(),
                last4_bits: cfg.perceptron.table_bits.last4_load_pcs,
                stats: SimStats::default(),
            })
            .collect();
        let llc_geom = if n > 1 { cfg.llc.shared_by(n) } else { cfg.llc };
        Ok(System {
            cores,
            shared: Shared {
                llc: Cache::new(llc_geom),
                llc_mshr: Mshr::new(llc_geom.mshr),
                dram: DramModel::new(&cfg.dram, n),
                pages: PageMap::new(cfg.page_size, cfg.page_shuffle),
            },
        })
    }

    fn run(&mut self, mut observe: impl FnMut(&OpTiming)) {
        let mut steps = 0u64;
        loop {
            let pick = self
                .cores
                .iter()
                .filter(|c| c.next < c.trace.len())
                .map(|c| (c.next_dispatch().0, c.id))
                .min();
            let Some((t, id)) = pick else { break };
            steps += 1;
            if steps.is_multiple_of(1024) {
                self.shared.dram.advance(t);
            }
            let timing = self.cores[id].step(&mut self.shared);
            observe(&timing);
        }
    }

    fn finish(mut self) -> Result<MulticoreStats, SimError> {
        let single = self.cores.len() == 1;
        for c in &mut self.cores {
            c.finish();
        }
        if single {
            self.cores[0].stats.mshr_stall_cycles += self.shared.llc_mshr.stall_cycles;
        }
        let cores: Vec<SimStats> = self.cores.iter().map(|c| c.stats).collect();
        for (i, s) in cores.iter().enumerate() {
            s.check().map_err(|e| SimError::Invariant(format!("core {i}: {e}")))?;
        }
        let total = merge_stats(&cores);
        let dram = self.shared.dram.counters;
        if total.dram != dram {
            return Err(SimError::Invariant(format!(
                "per-core dram counters {:?} differ from the shared model {:?}",
                total.dram, dram
            )));
        }
        Ok(MulticoreStats { cores, total, dram })
    }
}

fn dram_read(stats: &mut SimStats, shared: &mut Shared, line: u64, at: u64, kind: ReadKind) -> u64 {
    let r = shared.dram.issue(line, at, kind);
    if r.merged {
        stats.dram.merged += 1;
    } else {
        match kind {
            ReadKind::Demand => stats.dram.demand_reads += 1,
            ReadKind::Prefetch => stats.dram.prefetch_reads += 1,
            ReadKind::Speculative => stats.dram.speculative_reads += 1,
        }
        stats.dram.queue_delay += r.queue_delay;
    }
    r.completion
}

impl<'t> Core<'t> {
    /// Dispatch cycle of the next memory operation and the slot it takes.
    fn next_dispatch(&self) -> (u64, u64) {
        let rec = &self.trace[self.next];
        let slot = self.dispatch_slot + rec.gap as u64;
        let mut t = slot / DISPATCH_WIDTH;
        if self.inflight.len() == self.window {
            t = t.max(self.inflight[0]);
        }
        (t, slot)
    }

    fn apply_training(&mut self, upto: usize) {
        let Some(oc) = self.offchip.as_mut() else {
            self.training.clear();
            return;
        };
        while let Some(&(i, ev)) = self.training.front() {
            if i + self.window > upto {
                break;
            }
            self.training.pop_front();
            match ev {
                Training::Flp {
                    metadata,
                    vaddr,
                    served,
                } => oc.flp.on_complete(&metadata, vaddr, served),
                Training::Slp {
                    metadata,
                    paddr,
                    served,
                } => oc.slp.on_prefetch_fill(&metadata, paddr, served),
            }
        }
    }

    fn step(&mut self, shared: &mut Shared) -> OpTiming {
        let index = self.next;
        let rec = self.trace[index];
        let (t, slot) = self.next_dispatch();
        self.next += 1;
        self.dispatch_slot = (slot + 1).max(t * DISPATCH_WIDTH + 1);
        self.apply_training(index);

        let asid = self.id as u16;
        let paddr = shared.pages.translate_for(asid, rec.vaddr);
        let line = line_of(paddr);
        let is_load = rec.kind == AccessKind::Load;
        self.stats.memory_ops += 1;
        self.stats.instructions += rec.gap as u64 + 1;
        if is_load {
            self.stats.loads += 1;
            self.last4 = [rec.pc, self.last4[0], self.last4[1], self.last4[2]];
        } else {
            self.stats.stores += 1;
        }

        // Off-chip prediction for loads.
        let mut metadata = RequestMetadata::new(rec.pc, &self.last4, false, self.last4_bits);
        let mut decision = None;
        let mut flagged = false;
        let mut spec_done = None;
        let mut spec_at_core = false;
        if let Some(oc) = self.offchip.as_mut().filter(|o| is_load && o.consume_at != ConsumeAt::Never) {
            let out = oc.flp.on_load(rec.pc, rec.vaddr, &self.last4, t);
            metadata = out.metadata;
            decision = Some(out.decision);
            flagged = out.flagged;
            let p = &mut self.stats.prediction;
            p.consulted += 1;
            match out.decision {
                FlpDecision::HighOffChip => p.high += 1,
                FlpDecision::DelayedOffChip => p.delayed += 1,
                FlpDecision::OnChip => p.onchip += 1,
            }
            if let Some(at) = out.speculate_at {
                spec_done = Some(dram_read(&mut self.stats, shared, line, at, ReadKind::Speculative));
                spec_at_core = true;
            }
        }
        let flp_tag = decision.is_some_and(|d| d.is_offchip());

        // L1D.
        let l1_lat = self.l1d.geometry().latency;
        let hit = matches!(self.l1d.lookup(paddr, t), Lookup::Hit(_));
        self.stats.l1d.record(hit);
        let (served, ready) = if hit {
            let l = self.l1d.line_mut(paddr).expect("hit line is resident");
            if !is_load {
                l.dirty = true;
            }
            if l.prefetched {
                l.prefetched = false;
                let src = l.prefetch_source.expect("prefetched lines record their source");
                self.stats.l1d_prefetch.record_useful(src);
            }
            (Level::L1d, (t + l1_lat).max(l.ready))
        } else {
            let miss_t = t + l1_lat;
            if let Some(at) = self.offchip.as_ref().and_then(|o| o.flp.on_l1d_miss(flagged, miss_t)) {
                spec_done = Some(dram_read(&mut self.stats, shared, line, at, ReadKind::Speculative));
            }
            let start = self.l1d_mshr.reserve(miss_t);
            let (served, ready) = self.below_l1(shared, paddr, start, ReadKind::Demand, spec_done, true);
            self.l1d_mshr.insert(MshrEntry {
                line,
                ready,
                is_prefetch: false,
                metadata: Some(metadata),
            });
            let ev = self.l1d.fill_with(paddr, !is_load, ready, None);
            self.evict_l1d(shared, ev, ready);
            (served, ready)
        };
        self.stats.served[served.index()] += 1;

        if spec_done.is_some() {
            let s = &mut self.stats.speculation;
            s.issued += 1;
            if spec_at_core {
                s.issued_at_core += 1;
            } else {
                s.issued_at_l1d_miss += 1;
            }
            s.location[served.index()] += 1;
        }
        if let Some(d) = decision {
            if served == Level::Dram {
                if d.is_offchip() {
                    self.stats.prediction.true_offchip += 1;
                } else {
                    self.stats.prediction.missed_offchip += 1;
                }
            }
            self.training.push_back((
                index,
                Training::Flp {
                    metadata,
                    vaddr: rec.vaddr,
                    served,
                },
            ));
        }

        let completion = match (served, spec_done) {
            (Level::Dram, Some(s)) => ready.min(s),
            _ => ready,
        };
        let completion = if is_load { completion } else { t };
        if is_load {
            self.stats.load_latency += completion - t;
        }

        self.l1d_prefetches(shared, &rec, asid, t + l1_lat, hit, metadata, flp_tag, index);
        self.issue_l2_prefetches(shared);

        let retire = completion.max(self.last_retire);
        self.last_retire = retire;
        if self.inflight.len() == self.window {
            self.inflight.pop_front();
        }
        self.inflight.push_back(retire);

        OpTiming {
            core: self.id,
            index,
            kind: rec.kind,
            issue: t,
            completion,
            retire,
            served,
            speculated: spec_done.is_some(),
        }
    }

    /// L2 onward for a request that left the L1D at `t`. Returns the level
    /// holding the line and the cycle the line arrives back at the L1D.
    fn below_l1(
        &mut self,
        shared: &mut Shared,
        paddr: u64,
        t: u64,
        kind: ReadKind,
        spec_done: Option<u64>,
        demand: bool,
    ) -> (Level, u64) {
        let l2_lat = self.l2.geometry().latency;
        let hit = matches!(self.l2.lookup(paddr, t), Lookup::Hit(_));
        if demand {
            self.stats.l2.record(hit);
        }
        for target in self.l2_pf.on_access(paddr, hit) {
            self.l2_pending.push((target, t + l2_lat));
        }
        if hit {
            let l = self.l2.line_mut(paddr).expect("hit line is resident");
            if demand && l.prefetched {
                l.prefetched = false;
                let src = l.prefetch_source.expect("prefetched lines record their source");
                self.stats.l2_prefetch.record_useful(src);
            }
            return (Level::L2, (t + l2_lat).max(l.ready));
        }
        let start = self.l2_mshr.reserve(t + l2_lat);
        let (served, ready) = self.below_l2(shared, paddr, start, kind, spec_done, demand);
        self.l2_mshr.insert(MshrEntry {
            line: line_of(paddr),
            ready,
            is_prefetch: !demand,
            metadata: None,
        });
        let ev = self.l2.fill_with(paddr, false, ready, None);
        self.evict_l2(shared, ev, ready);
        (served, ready)
    }

    /// LLC and DRAM for a request that left the L2 at `t`.
    fn below_l2(
        &mut self,
        shared: &mut Shared,
        paddr: u64,
        t: u64,
        kind: ReadKind,
        spec_done: Option<u64>,
        demand: bool,
    ) -> (Level, u64) {
        let llc_lat = shared.llc.geometry().latency;
        let hit = matches!(shared.llc.lookup(paddr, t), Lookup::Hit(_));
        if demand {
            self.stats.llc.record(hit);
        }
        if hit {
            let ready = shared.llc.line(paddr).expect("hit line is resident").ready;
            return (Level::Llc, (t + llc_lat).max(ready));
        }
        let line = line_of(paddr);
        let arrival = shared.llc_mshr.reserve(t + llc_lat);
        let ready = match spec_done {
            // The speculative read already fetched this line; the regular
            // request picks its data up at the controller.
            Some(s) => {
                self.stats.dram.merged += 1;
                shared.dram.counters.merged += 1;
                s.max(arrival)
            }
            None => dram_read(&mut self.stats, shared, line, arrival, kind),
        };
        shared.llc_mshr.insert(MshrEntry {
            line,
            ready,
            is_prefetch: !demand,
            metadata: None,
        });
        let ev = shared.llc.fill_with(paddr, false, ready, None);
        self.evict_llc(shared, ev, ready);
        (Level::Dram, ready)
    }

    fn evict_l1d(&mut self, shared: &mut Shared, ev: Option<Evicted>, now: u64) {
        let Some(ev) = ev else { return };
        if let Some(src) = ev.unused_prefetch {
            self.stats.l1d_prefetch.record_useless(src);
        }
        if ev.dirty {
            let next = self.l2.fill_with(ev.line * LINE_BYTES, true, now, None);
            self.evict_l2(shared, next, now);
        }
    }

    fn evict_l2(&mut self, shared: &mut Shared, ev: Option<Evicted>, now: u64) {
        let Some(ev) = ev else { return };
        if let Some(src) = ev.unused_prefetch {
            self.stats.l2_prefetch.record_useless(src);
        }
        if ev.dirty {
            let next = shared.llc.fill_with(ev.line * LINE_BYTES, true, now, None);
            self.evict_llc(shared, next, now);
        }
    }

    fn evict_llc(&mut self, shared: &mut Shared, ev: Option<Evicted>, now: u64) {
        if let Some(ev) = ev.filter(|e| e.dirty) {
            shared.dram.writeback(ev.line, now);
            self.stats.dram.writebacks += 1;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn l1d_prefetches(
        &mut self,
        shared: &mut Shared,
        rec: &TraceRecord,
        asid: u16,
        t: u64,
        hit: bool,
        metadata: RequestMetadata,
        flp_tag: bool,
        index: usize,
    ) {
        let requests = self.l1d_pf.on_access(rec.pc, rec.vaddr, hit);
        for mut req in requests {
            let target = shared.pages.translate_for(asid, req.target_vaddr);
            if self.l1d.contains(target) {
                continue;
            }
            let pf = &mut self.stats.l1d_prefetch;
            pf.emitted += 1;
            req.metadata = metadata;
            let (verdict, pmeta) = match self.offchip.as_mut() {
                Some(oc) => oc.slp.filter(&req, target, flp_tag),
                None => (SlpDecision::Issue, metadata),
            };
            if verdict == SlpDecision::Drop {
                self.stats.l1d_prefetch.dropped += 1;
                continue;
            }
            self.stats.l1d_prefetch.issued += 1;
            let start = self.l1d_mshr.reserve(t);
            let (served, ready) = self.below_l1(shared, target, start, ReadKind::Prefetch, None, false);
            self.l1d_mshr.insert(MshrEntry {
                line: line_of(target),
                ready,
                is_prefetch: true,
                metadata: Some(pmeta),
            });
            let ev = self.l1d.fill_with(target, false, ready, Some(served));
            self.evict_l1d(shared, ev, ready);
            self.stats.l1d_prefetch.record_fill(served);
            if self.offchip.as_ref().is_some_and(|o| o.slp.enabled()) {
                self.training.push_back((
                    index,
                    Training::Slp {
                        metadata: pmeta,
                        paddr: target,
                        served,
                    },
                ));
            }
        }
    }

    fn issue_l2_prefetches(&mut self, shared: &mut Shared) {
        let pending = std::mem::take(&mut self.l2_pending);
        for (target, t) in pending {
            if self.l2.contains(target) {
                continue;
            }
            let pf = &mut self.stats.l2_prefetch;
            pf.emitted += 1;
            pf.issued += 1;
            let start = self.l2_mshr.reserve(t);
            let (served, ready) = self.below_l2(shared, target, start, ReadKind::Prefetch, None, false);
            self.l2_mshr.insert(MshrEntry {
                line: line_of(target),
                ready,
                is_prefetch: true,
                metadata: None,
            });
            let ev = self.l2.fill_with(target, false, ready, Some(served));
            self.evict_l2(shared, ev, ready);
            self.stats.l2_prefetch.record_fill(served);
        }
    }

    fn finish(&mut self) {
        for src in self.l1d.unused_prefetches().collect::<Vec<_>>() {
            self.stats.l1d_prefetch.record_useless(src);
        }
        for src in self.l2.unused_prefetches().collect::<Vec<_>>() {
            self.stats.l2_prefetch.record_useless(src);
        }
        self.stats.cycles = self.last_retire.max(self.dispatch_slot.div_ceil(DISPATCH_WIDTH));
        self.stats.mshr_stall_cycles = self.l1d_mshr.stall_cycles + self.l2_mshr.stall_cycles;
    }
}
