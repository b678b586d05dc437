//! L1D and L2 prefetchers.
//!
//! The L1D side is a PC-indexed stride prefetcher (or next-line); the L2
//! side is a per-page ascending/descending stream detector. Neither issues
//! across a page boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::offchip::RequestMetadata;
use crate::perceptron::fold_hash;
use crate::trace::LINE_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrefetchLevel {
    L1d,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchRequest {
    pub trigger_pc: u64,
    pub trigger_vaddr: u64,
    pub target_vaddr: u64,
    pub level: PrefetchLevel,
    /// Snapshot of the triggering load's metadata.
    pub metadata: RequestMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1dPrefetcherKind {
    None,
    NextLine,
    IpStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2PrefetcherKind {
    None,
    Stream,
}

impl fmt::Display for L1dPrefetcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            L1dPrefetcherKind::None => "none",
            L1dPrefetcherKind::NextLine => "next_line",
            L1dPrefetcherKind::IpStride => "ip_stride",
        })
    }
}

impl FromStr for L1dPrefetcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(L1dPrefetcherKind::None),
            "next_line" => Ok(L1dPrefetcherKind::NextLine),
            "ip_stride" => Ok(L1dPrefetcherKind::IpStride),
            _ => Err(format!("unknown l1d prefetcher `{s}` (none|next_line|ip_stride)")),
        }
    }
}

impl fmt::Display for L2PrefetcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            L2PrefetcherKind::None => "none",
            L2PrefetcherKind::Stream => "stream",
        })
    }
}

impl FromStr for L2PrefetcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(L2PrefetcherKind::None),
            "stream" => Ok(L2PrefetcherKind::Stream),
            _ => Err(format!("unknown l2 prefetcher `{s}` (none|stream)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchConfig {
    pub l1d: L1dPrefetcherKind,
    pub l2: L2PrefetcherKind,
    /// L1D prefetch degree.
    pub degree: u32,
    /// Lines the L2 stream detector issues per confirmed access.
    pub l2_degree: u32,
    /// How far ahead of the triggering line the L2 stream may run.
    pub l2_distance: u32,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        PrefetchConfig {
            l1d: L1dPrefetcherKind::IpStride,
            l2: L2PrefetcherKind::Stream,
            degree: 4,
            l2_degree: 2,
            l2_distance: 12,
        }
    }
}

impl PrefetchConfig {
    pub fn none() -> Self {
        PrefetchConfig {
            l1d: L1dPrefetcherKind::None,
            l2: L2PrefetcherKind::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.degree == 0 || self.degree > 16 {
            errs.push(format!("prefetch.degree must be within 1..=16, got {}", self.degree));
        }
        if self.l2_degree == 0 || self.l2_degree > 16 {
            errs.push(format!("prefetch.l2_degree must be within 1..=16, got {}", self.l2_degree));
        }
        if self.l2_distance < self.l2_degree || self.l2_distance > 63 {
            errs.push(format!(
                "prefetch.l2_distance must be within l2_degree..=63, got {}",
                self.l2_distance
            ));
        }
        errs
    }
}

pub const IP_STRIDE_ENTRIES: usize = 256;
const IP_STRIDE_BITS: u32 = 8;
const CONFIDENCE_MAX: u8 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct IpEntry {
    pc: u64,
    last_vaddr: u64,
    stride: i64,
    confidence: u8,
}

#[derive(Debug, Clone)]
pub struct IpStrideState {
    entries: Vec<IpEntry>,
}

impl Default for IpStrideState {
    fn default() -> Self {
        IpStrideState {
            entries: vec![IpEntry::default(); IP_STRIDE_ENTRIES],
        }
    }
}

impl IpStrideState {
    /// Updates the PC's entry. Returns the stride once it has been seen
    /// twice in a row.
    fn train(&mut self, pc: u64, vaddr: u64) -> Option<i64> {
        let e = &mut self.entries[fold_hash(pc, IP_STRIDE_BITS) as usize];
        if e.pc != pc {
            *e = IpEntry {
                pc,
                last_vaddr: vaddr,
                stride: 0,
                confidence: 0,
            };
            return None;
        }
        let stride = vaddr.wrapping_sub(e.last_vaddr) as i64;
        if stride == 0 {
            return None;
        }
        if stride == e.stride {
            e.confidence = (e.confidence + 1).min(CONFIDENCE_MAX);
        } else {
            e.stride = stride;
            e.confidence = 0;
        }
        e.last_vaddr = vaddr;
        (e.confidence > 0).then_some(stride)
    }

    pub fn confidence(&self, pc: u64) -> Option<u8> {
        let e = &self.entries[fold_hash(pc, IP_STRIDE_BITS) as usize];
        (e.pc == pc).then_some(e.confidence)
    }
}

fn same_page(a: u64, b: u64, page_size: u64) -> bool {
    a / page_size == b / page_size
}

#[derive(Debug, Clone)]
pub struct L1dPrefetcher {
    kind: L1dPrefetcherKind,
    degree: u32,
    page_size: u64,
    state: IpStrideState,
}

impl L1dPrefetcher {
    pub fn new(kind: L1dPrefetcherKind, degree: u32, page_size: u64) -> Self {
        L1dPrefetcher {
            kind,
            degree,
            page_size,
            state: IpStrideState::default(),
        }
    }

    pub fn kind(&self) -> L1dPrefetcherKind {
        self.kind
    }

    /// Called on every L1D demand access.
    pub fn on_access(&mut self, pc: u64, vaddr: u64, _hit: bool) -> Vec<PrefetchRequest> {
        let req = |target| PrefetchRequest {
            trigger_pc: pc,
            trigger_vaddr: vaddr,
            target_vaddr: target,
            level: PrefetchLevel::L1d,
            metadata: RequestMetadata::default(),
        };
        match self.kind {
            L1dPrefetcherKind::None => Vec::new(),
            L1dPrefetcherKind::NextLine => {
                let t = vaddr.wrapping_add(LINE_BYTES);
                if same_page(t, vaddr, self.page_size) {
                    vec![req(t)]
                } else {
                    Vec::new()
                }
            }
            L1dPrefetcherKind::IpStride => {
                let Some(stride) = self.state.train(pc, vaddr) else {
                    return Vec::new();
                };
                let trigger_line = vaddr / LINE_BYTES;
                let mut out: Vec<PrefetchRequest> = Vec::with_capacity(self.degree as usize);
                for k in 1..=self.degree as i64 {
                    let t = vaddr.wrapping_add_signed(stride.wrapping_mul(k));
                    if !same_page(t, vaddr, self.page_size) {
                        break;
                    }
                    let line = t / LINE_BYTES;
                    if line == trigger_line || out.iter().any(|r| r.target_vaddr / LINE_BYTES == line) {
                        continue;
                    }
                    out.push(req(t));
                }
                out
            }
        }
    }
}

const STREAM_TRACKERS: usize = 16;

#[derive(Debug, Clone, Copy, Default)]
struct StreamEntry {
    page: u64,
    last_line: i64,
    dir: i64,
    run: u32,
    /// Next line to prefetch once the stream is confirmed.
    next: i64,
    stamp: u64,
    valid: bool,
}

/// Per-page stream detector for the L2. Two consecutive ±1-line steps in
/// the same direction confirm a stream. Each confirmed access then issues up
/// to `degree` lines, continuing from where the previous batch stopped, so
/// the stream ramps ahead until it leads the access by `distance` lines.
#[derive(Debug, Clone)]
pub struct StreamPrefetcher {
    enabled: bool,
    degree: u32,
    distance: u32,
    page_size: u64,
    trackers: Vec<StreamEntry>,
    clock: u64,
}

impl StreamPrefetcher {
    pub fn new(kind: L2PrefetcherKind, degree: u32, distance: u32, page_size: u64) -> Self {
        StreamPrefetcher {
            enabled: kind == L2PrefetcherKind::Stream,
            degree,
            distance,
            page_size,
            trackers: vec![StreamEntry::default(); STREAM_TRACKERS],
            clock: 0,
        }
    }

    /// Returns target physical addresses (line aligned).
    pub fn on_access(&mut self, paddr: u64, _hit: bool) -> Vec<u64> {
        if !self.enabled {
            return Vec::new();
        }
        self.clock += 1;
        let lines_per_page = (self.page_size / LINE_BYTES) as i64;
        let page = paddr / self.page_size;
        let line = ((paddr % self.page_size) / LINE_BYTES) as i64;
        let mut fresh = false;
        let slot = match self.trackers.iter().position(|e| e.valid && e.page == page) {
            Some(i) => i,
            None => {
                let victim = self
                    .trackers
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| (e.valid, e.stamp))
                    .map(|(i, _)| i)
                    .unwrap();
                // A confirmed stream that ran off the edge of the neighbouring
                // page keeps its direction here instead of re-confirming.
                let carried = self.trackers.iter().find_map(|e| {
                    let ahead = e.valid && e.run >= 2 && e.page as i64 + e.dir == page as i64;
                    let at_edge = (e.last_line + e.dir - line - e.dir * lines_per_page).abs() <= 1;
                    (ahead && at_edge).then_some(e.dir)
                });
                self.trackers[victim] = StreamEntry {
                    page,
                    last_line: line,
                    dir: carried.unwrap_or(0),
                    run: if carried.is_some() { 2 } else { 0 },
                    next: line + carried.unwrap_or(0),
                    stamp: self.clock,
                    valid: true,
                };
                if carried.is_none() {
                    return Vec::new();
                }
                fresh = true;
                victim
            }
        };
        let e = &mut self.trackers[slot];
        e.stamp = self.clock;
        let delta = line - e.last_line;
        if fresh {
            // Carried entry: already confirmed, go straight to prefetching.
        } else if delta == 0 {
            return Vec::new();
        } else if delta.abs() == 1 {
            if delta == e.dir {
                e.run += 1;
            } else {
                e.dir = delta;
                e.run = 1;
                e.next = line + delta;
            }
        } else {
            e.dir = 0;
            e.run = 0;
        }
        e.last_line = line;
        if e.run < 2 {
            return Vec::new();
        }
        let dir = e.dir;
        let start = if (e.next - line) * dir > 0 { e.next } else { line + dir };
        let out: Vec<i64> = (0..self.degree as i64)
            .map(|k| start + k * dir)
            .take_while(|l| (l - line) * dir <= self.distance as i64)
            .take_while(|l| (0..lines_per_page).contains(l))
            .collect();
        if let Some(&last) = out.last() {
            e.next = last + dir;
        }
        out.into_iter()
            .map(|l| page * self.page_size + l as u64 * LINE_BYTES)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(reqs: &[PrefetchRequest]) -> Vec<u64> {
        reqs.iter().map(|r| r.target_vaddr).collect()
    }

    #[test]
    fn confirmed_stride_emits_degree_four() {
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::IpStride, 4, 4096);
        assert!(p.on_access(0x400, 0x1000, false).is_empty());
        assert!(p.on_access(0x400, 0x1040, false).is_empty());
        let out = p.on_access(0x400, 0x1080, false);
        assert_eq!(targets(&out), vec![0x10C0, 0x1100, 0x1140, 0x1180]);
        let out = p.on_access(0x400, 0x10C0, false);
        assert_eq!(*targets(&out).last().unwrap(), 0x11C0);
        assert!(out.iter().all(|r| r.level == PrefetchLevel::L1d && r.trigger_pc == 0x400));
    }

    #[test]
    fn fresh_pc_emits_nothing() {
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::IpStride, 4, 4096);
        assert!(p.on_access(0x999, 0x5000, false).is_empty());
    }

    #[test]
    fn stride_clipped_at_page_end() {
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::IpStride, 4, 4096);
        p.on_access(0x400, 0xF40, false);
        p.on_access(0x400, 0xF80, false);
        let out = p.on_access(0x400, 0xFC0, false);
        assert!(out.is_empty(), "{:x?}", targets(&out));
    }

    #[test]
    fn negative_stride_and_broken_stride() {
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::IpStride, 2, 4096);
        p.on_access(0x10, 0x2800, false);
        p.on_access(0x10, 0x2780, false);
        assert_eq!(targets(&p.on_access(0x10, 0x2700, false)), vec![0x2680, 0x2600]);
        assert!(p.on_access(0x10, 0x9000, false).is_empty());
        assert_eq!(p.state.confidence(0x10), Some(0));
    }

    #[test]
    fn next_line_mode() {
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::NextLine, 4, 4096);
        assert_eq!(targets(&p.on_access(1, 0x1008, true)), vec![0x1048]);
        assert!(p.on_access(1, 0x1FC8, true).is_empty());
    }

    #[test]
    fn stream_ascending() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
        let base = 7 * 4096;
        assert!(s.on_access(base + 10 * 64, false).is_empty());
        assert!(s.on_access(base + 11 * 64, false).is_empty());
        assert_eq!(s.on_access(base + 12 * 64, false), vec![base + 13 * 64, base + 14 * 64]);
    }

    #[test]
    fn stream_ramps_up_to_distance() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 4, 4096);
        s.on_access(0, false);
        s.on_access(64, false);
        assert_eq!(s.on_access(2 * 64, false), vec![3 * 64, 4 * 64]);
        assert_eq!(s.on_access(3 * 64, false), vec![5 * 64, 6 * 64]);
        // Lead is capped at four lines past the access.
        assert_eq!(s.on_access(4 * 64, false), vec![7 * 64, 8 * 64]);
        assert_eq!(s.on_access(5 * 64, false), vec![9 * 64]);
        assert_eq!(s.on_access(6 * 64, false), vec![10 * 64]);
    }

    #[test]
    fn stream_carries_over_page_edge() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
        for l in 60..64u64 {
            s.on_access(4096 + l * 64, false);
        }
        assert_eq!(s.on_access(2 * 4096, false), vec![2 * 4096 + 64, 2 * 4096 + 128]);
        // An unrelated page start still has to confirm on its own.
        assert!(s.on_access(9 * 4096, false).is_empty());
    }

    #[test]
    fn stream_descending() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
        let base = 3 * 4096;
        s.on_access(base + 20 * 64, false);
        s.on_access(base + 19 * 64, false);
        assert_eq!(s.on_access(base + 18 * 64, false), vec![base + 17 * 64, base + 16 * 64]);
    }

    #[test]
    fn stream_ignores_scattered_lines() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
        let base = 4096;
        for l in [1u64, 40, 2, 41, 3, 42, 4, 43] {
            assert!(s.on_access(base + l * 64, false).is_empty());
        }
    }

    #[test]
    fn stream_stays_in_page() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
        s.on_access(61 * 64, false);
        s.on_access(62 * 64, false);
        assert_eq!(s.on_access(63 * 64, false), Vec::<u64>::new());
    }

    #[test]
    fn disabled_prefetchers_are_silent() {
        let mut s = StreamPrefetcher::new(L2PrefetcherKind::None, 2, 12, 4096);
        let mut p = L1dPrefetcher::new(L1dPrefetcherKind::None, 4, 4096);
        for l in 0..10u64 {
            assert!(s.on_access(l * 64, false).is_empty());
            assert!(p.on_access(1, l * 64, false).is_empty());
        }
    }

    proptest::proptest! {
        #[test]
        fn never_crosses_a_page(accesses in proptest::collection::vec((0u64..4, 0u64..(1 << 16), -300i64..300), 1..300)) {
            let mut p = L1dPrefetcher::new(L1dPrefetcherKind::IpStride, 4, 4096);
            let mut s = StreamPrefetcher::new(L2PrefetcherKind::Stream, 2, 12, 4096);
            let mut addr = 0x10_0000u64;
            for (pc, jump, stride) in accesses {
                addr = if jump % 5 == 0 { addr.wrapping_add(jump) } else { addr.wrapping_add_signed(stride) };
                for r in p.on_access(pc + 1, addr, false) {
                    proptest::prop_assert_eq!(r.target_vaddr / 4096, addr / 4096);
                    proptest::prop_assert_ne!(r.target_vaddr / 64, addr / 64);
                }
                for t in s.on_access(addr, false) {
                    proptest::prop_assert_eq!(t / 4096, addr / 4096);
                }
            }
        }
    }
}
