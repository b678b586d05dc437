use serde::{Deserialize, Serialize};

use super::{line_of, Level};
use crate::trace::LINE_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub capacity: u64,
    pub ways: usize,
    pub latency: u64,
    pub mshr: usize,
}

impl CacheGeometry {
    /// 32 KB, 8-way, 4 cycles, 10 MSHRs.
    pub const L1D: CacheGeometry = CacheGeometry {
        capacity: 32 * 1024,
        ways: 8,
        latency: 4,
        mshr: 10,
    };
    /// 1 MB, 16-way, 10 cycles, 16 MSHRs.
    pub const L2: CacheGeometry = CacheGeometry {
        capacity: 1024 * 1024,
        ways: 16,
        latency: 10,
        mshr: 16,
    };
    /// 1.375 MB per core, 11-way, 36 cycles, 64 MSHRs.
    pub const LLC: CacheGeometry = CacheGeometry {
        capacity: 1408 * 1024,
        ways: 11,
        latency: 36,
        mshr: 64,
    };

    pub fn new(capacity: u64, ways: usize, latency: u64, mshr: usize) -> Self {
        CacheGeometry {
            capacity,
            ways,
            latency,
            mshr,
        }
    }

    pub fn sets(&self) -> usize {
        (self.capacity / (self.ways as u64 * LINE_BYTES)) as usize
    }

    /// Scales capacity and MSHRs for a cache shared by `cores` cores.
    pub fn shared_by(&self, cores: usize) -> Self {
        CacheGeometry {
            capacity: self.capacity * cores as u64,
            mshr: self.mshr * cores,
            ..*self
        }
    }

    pub fn validate(&self, name: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.capacity == 0 || self.ways == 0 || self.latency == 0 || self.mshr == 0 {
            errs.push(format!("{name}: capacity, ways, latency and mshr must be positive"));
        } else if !self.capacity.is_multiple_of(self.ways as u64 * LINE_BYTES) {
            errs.push(format!(
                "{name}: capacity {} is not a multiple of ways x {LINE_BYTES}",
                self.capacity
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit(u64),
    Miss,
}

/// Per-line state. `ready` is the cycle at which the fill data arrives;
/// a lookup before then merges with the outstanding fill.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LineState {
    pub tag: u64,
    pub valid: bool,
    pub dirty: bool,
    pub stamp: u64,
    pub ready: u64,
    /// Set on prefetch fill, cleared by the first demand use.
    pub prefetched: bool,
    /// Where the prefetch that brought this line in was served from.
    pub prefetch_source: Option<Level>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub line: u64,
    pub dirty: bool,
    /// The line was prefetched and never demanded.
    pub unused_prefetch: Option<Level>,
}

/// Set-associative LRU cache over line addresses (byte address / 64).
#[derive(Debug, Clone)]
pub struct Cache {
    geom: CacheGeometry,
    sets: usize,
    lines: Vec<LineState>,
    clock: u64,
}

impl Cache {
    pub fn new(geom: CacheGeometry) -> Self {
        let sets = geom.sets();
        Cache {
            geom,
            sets,
            lines: vec![LineState::default(); sets * geom.ways],
            clock: 0,
        }
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geom
    }

    fn set_range(&self, line: u64) -> std::ops::Range<usize> {
        let set = (line % self.sets as u64) as usize;
        set * self.geom.ways..(set + 1) * self.geom.ways
    }

    fn find(&self, line: u64) -> Option<usize> {
        self.set_range(line)
            .find(|&i| self.lines[i].valid && self.lines[i].tag == line)
    }

    /// Hit refreshes LRU and returns the hit latency; a miss leaves the set
    /// untouched.
    pub fn lookup(&mut self, paddr: u64, _now: u64) -> Lookup {
        match self.find(line_of(paddr)) {
            Some(i) => {
                self.clock += 1;
                self.lines[i].stamp = self.clock;
                Lookup::Hit(self.geom.latency)
            }
            None => Lookup::Miss,
        }
    }

    pub fn contains(&self, paddr: u64) -> bool {
        self.find(line_of(paddr)).is_some()
    }

    pub fn line(&self, paddr: u64) -> Option<&LineState> {
        self.find(line_of(paddr)).map(|i| &self.lines[i])
    }

    pub fn line_mut(&mut self, paddr: u64) -> Option<&mut LineState> {
        self.find(line_of(paddr)).map(move |i| &mut self.lines[i])
    }

    /// Inserts the line as MRU. Returns the LRU victim when the set was full.
    /// Filling a resident line refreshes it and ORs in `dirty`.
    pub fn fill(&mut self, paddr: u64, dirty: bool) -> Option<Evicted> {
        self.fill_with(paddr, dirty, 0, None)
    }

    pub fn fill_with(
        &mut self,
        paddr: u64,
        dirty: bool,
        ready: u64,
        prefetch_source: Option<Level>,
    ) -> Option<Evicted> {
        let line = line_of(paddr);
        self.clock += 1;
        if let Some(i) = self.find(line) {
            let l = &mut self.lines[i];
            l.stamp = self.clock;
            l.dirty |= dirty;
            l.ready = l.ready.min(ready);
            return None;
        }
        let range = self.set_range(line);
        let slot = match range.clone().find(|&i| !self.lines[i].valid) {
            Some(i) => i,
            None => range.min_by_key(|&i| self.lines[i].stamp).unwrap(),
        };
        let old = self.lines[slot];
        self.lines[slot] = LineState {
            tag: line,
            valid: true,
            dirty,
            stamp: self.clock,
            ready,
            prefetched: prefetch_source.is_some(),
            prefetch_source,
        };
        old.valid.then_some(Evicted {
            line: old.tag,
            dirty: old.dirty,
            unused_prefetch: if old.prefetched {
                old.prefetch_source
            } else {
                None
            },
        })
    }

    /// Lines still holding an unused prefetch, by serving level.
    pub fn unused_prefetches(&self) -> impl Iterator<Item = Level> + '_ {
        self.lines
            .iter()
            .filter(|l| l.valid && l.prefetched)
            .filter_map(|l| l.prefetch_source)
    }

    /// Valid lines of `set` in recency order, most recent first.
    pub fn set_contents(&self, set: usize) -> Vec<u64> {
        let range = set * self.geom.ways..(set + 1) * self.geom.ways;
        let mut v: Vec<&LineState> = self.lines[range].iter().filter(|l| l.valid).collect();
        v.sort_by_key(|e| std::cmp::Reverse(e.stamp));
        v.into_iter().map(|l| l.tag).collect()
    }

    pub fn num_sets(&self) -> usize {
        self.sets
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(sets: usize, ways: usize) -> Cache {
        Cache::new(CacheGeometry::new(
            (sets * ways) as u64 * LINE_BYTES,
            ways,
            1,
            4,
        ))
    }

    #[test]
    fn table_geometries_are_valid() {
        for (g, n) in [
            (CacheGeometry::L1D, "l1d"),
            (CacheGeometry::L2, "l2"),
            (CacheGeometry::LLC, "llc"),
        ] {
            assert!(g.validate(n).is_empty());
        }
        assert_eq!(CacheGeometry::L1D.sets(), 64);
        assert_eq!(CacheGeometry::L2.sets(), 1024);
        assert_eq!(CacheGeometry::LLC.sets(), 2048);
        assert_eq!(CacheGeometry::LLC.shared_by(4).sets(), 8192);
    }

    #[test]
    fn bad_geometry_reported() {
        assert!(!CacheGeometry::new(1000, 3, 1, 1).validate("x").is_empty());
        assert!(!CacheGeometry::new(4096, 0, 1, 1).validate("x").is_empty());
    }

    #[test]
    fn empty_cache_misses() {
        let mut c = Cache::new(CacheGeometry::L1D);
        assert_eq!(c.lookup(0x1234, 0), Lookup::Miss);
    }

    #[test]
    fn fill_then_hit_in_four_cycles() {
        let mut c = Cache::new(CacheGeometry::L1D);
        assert_eq!(c.fill(0x1000, false), None);
        assert_eq!(c.lookup(0x1000, 0), Lookup::Hit(4));
        assert_eq!(c.lookup(0x103f, 0), Lookup::Hit(4));
    }

    #[test]
    fn lru_victim_in_two_way_set() {
        let mut c = tiny(1, 2);
        let (a, b, cc) = (0, 64, 128);
        c.fill(a, false);
        c.fill(b, false);
        c.lookup(a, 0);
        let ev = c.fill(cc, false).unwrap();
        assert_eq!(ev.line, 1);
        assert_eq!(c.lookup(b, 0), Lookup::Miss);
        assert!(matches!(c.lookup(a, 0), Lookup::Hit(_)));
    }

    #[test]
    fn full_eight_way_set_evicts_exactly_lru() {
        let mut c = Cache::new(CacheGeometry::L1D);
        let stride = 64 * 64; // same set
        for i in 0..8 {
            assert!(c.fill(i * stride, i % 2 == 0).is_none());
        }
        let ev = c.fill(8 * stride, false).unwrap();
        assert_eq!(ev.line, 0);
        assert!(ev.dirty);
    }

    #[test]
    fn unused_prefetch_reported_on_eviction() {
        let mut c = tiny(1, 1);
        c.fill_with(0, false, 0, Some(Level::Dram));
        let ev = c.fill(64, false).unwrap();
        assert_eq!(ev.unused_prefetch, Some(Level::Dram));
    }
}
