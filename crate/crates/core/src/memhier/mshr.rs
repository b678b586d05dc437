use crate::offchip::RequestMetadata;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MshrEntry {
    pub line: u64,
    /// Cycle at which the fill returns and the entry frees.
    pub ready: u64,
    pub is_prefetch: bool,
    pub metadata: Option<RequestMetadata>,
}

/// Miss-status holding registers of one cache, modelled as occupancy.
#[derive(Debug, Clone)]
pub struct Mshr {
    capacity: usize,
    entries: Vec<MshrEntry>,
    /// Cycles requests spent waiting for a free entry.
    pub stall_cycles: u64,
}

impl Mshr {
    pub fn new(capacity: usize) -> Self {
        Mshr {
            capacity,
            entries: Vec::with_capacity(capacity),
            stall_cycles: 0,
        }
    }

    /// Earliest cycle ≥ `now` at which a new miss can allocate an entry.
    /// Frees the entry it waits on.
    pub fn reserve(&mut self, now: u64) -> u64 {
        self.entries.retain(|e| e.ready > now);
        if self.entries.len() < self.capacity {
            return now;
        }
        let (idx, first) = self
            .entries
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| e.ready)
            .map(|(i, e)| (i, e.ready))
            .unwrap();
        self.entries.swap_remove(idx);
        self.stall_cycles += first - now;
        first
    }

    pub fn insert(&mut self, entry: MshrEntry) {
        debug_assert!(self.entries.len() < self.capacity);
        debug_assert!(self.entries.iter().all(|e| e.line != entry.line || e.ready <= entry.ready));
        self.entries.push(entry);
    }

    pub fn find(&self, line: u64, now: u64) -> Option<&MshrEntry> {
        self.entries.iter().find(|e| e.line == line && e.ready > now)
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(line: u64, ready: u64) -> MshrEntry {
        MshrEntry {
            line,
            ready,
            is_prefetch: false,
            metadata: None,
        }
    }

    #[test]
    fn full_mshr_waits_for_first_completion() {
        let mut m = Mshr::new(2);
        assert_eq!(m.reserve(0), 0);
        m.insert(entry(1, 100));
        assert_eq!(m.reserve(0), 0);
        m.insert(entry(2, 50));
        assert_eq!(m.reserve(10), 50);
        m.insert(entry(3, 150));
        assert!(m.occupancy() <= m.capacity());
        assert_eq!(m.stall_cycles, 40);
    }

    #[test]
    fn completed_entries_free_up() {
        let mut m = Mshr::new(1);
        m.reserve(0);
        m.insert(entry(1, 20));
        assert_eq!(m.reserve(25), 25);
        assert!(m.find(1, 25).is_none());
    }
}
