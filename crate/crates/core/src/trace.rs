//! Trace records, the binary trace file format, and synthetic workload
//! generators.
//!
//! A trace file is an 8-byte header (`b"TLPT"`, version as `u16`, two
//! reserved bytes) followed by packed 19-byte records, little-endian
//! throughout:
//!
//! ```text
//! offset  size  field
//!      0     2  gap    non-memory instructions since the previous record
//!      2     1  kind   0 = load, 1 = store
//!      3     8  pc
//!     11     8  vaddr
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::TraceError;

pub const RECORD_BYTES: usize = 19;
pub const HEADER_BYTES: usize = 8;
pub const MAGIC: &[u8; 4] = b"TLPT";
pub const VERSION: u16 = 1;

pub const LINE_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Load,
    Store,
}

impl AccessKind {
    fn to_byte(self) -> u8 {
        match self {
            AccessKind::Load => 0,
            AccessKind::Store => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub gap: u16,
    pub kind: AccessKind,
    pub pc: u64,
    pub vaddr: u64,
}

impl TraceRecord {
    pub fn load(pc: u64, vaddr: u64) -> Self {
        TraceRecord {
            gap: 0,
            kind: AccessKind::Load,
            pc,
            vaddr,
        }
    }

    pub fn store(pc: u64, vaddr: u64) -> Self {
        TraceRecord {
            gap: 0,
            kind: AccessKind::Store,
            pc,
            vaddr,
        }
    }

    pub fn with_gap(mut self, gap: u16) -> Self {
        self.gap = gap;
        self
    }

    pub fn is_load(&self) -> bool {
        self.kind == AccessKind::Load
    }
}

pub fn encode_record(rec: &TraceRecord) -> [u8; RECORD_BYTES] {
    let mut out = [0u8; RECORD_BYTES];
    out[0..2].copy_from_slice(&rec.gap.to_le_bytes());
    out[2] = rec.kind.to_byte();
    out[3..11].copy_from_slice(&rec.pc.to_le_bytes());
    out[11..19].copy_from_slice(&rec.vaddr.to_le_bytes());
    out
}

/// Decodes the record starting at `offset` in `bytes`.
pub fn decode_record(bytes: &[u8], offset: usize) -> Result<TraceRecord, TraceError> {
    let available = bytes.len().saturating_sub(offset);
    if available < RECORD_BYTES {
        return Err(TraceError::Truncated {
            offset,
            needed: RECORD_BYTES,
            available,
        });
    }
    let b = &bytes[offset..offset + RECORD_BYTES];
    let kind = match b[2] {
        0 => AccessKind::Load,
        1 => AccessKind::Store,
        other => {
            return Err(TraceError::UnknownKind {
                offset: offset + 2,
                kind: other,
            })
        }
    };
    Ok(TraceRecord {
        gap: u16::from_le_bytes([b[0], b[1]]),
        kind,
        pc: u64::from_le_bytes(b[3..11].try_into().unwrap()),
        vaddr: u64::from_le_bytes(b[11..19].try_into().unwrap()),
    })
}

pub fn encode_header() -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[0..4].copy_from_slice(MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h
}

pub fn encode_trace(records: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + records.len() * RECORD_BYTES);
    out.extend_from_slice(&encode_header());
    for r in records {
        out.extend_from_slice(&encode_record(r));
    }
    out
}

/// Decodes a complete trace image and checks the record invariants.
pub fn decode_trace(bytes: &[u8]) -> Result<Vec<TraceRecord>, TraceError> {
    if bytes.len() < HEADER_BYTES {
        return Err(TraceError::Truncated {
            offset: 0,
            needed: HEADER_BYTES,
            available: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(TraceError::BadHeader(format!(
            "magic {:02x?}, expected \"TLPT\"",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(TraceError::BadHeader(format!("unsupported version {version}")));
    }
    let body = bytes.len() - HEADER_BYTES;
    let count = body / RECORD_BYTES;
    let mut records = Vec::with_capacity(count);
    let mut offset = HEADER_BYTES;
    while offset < bytes.len() {
        let rec = decode_record(bytes, offset)?;
        if rec.pc == 0 {
            return Err(TraceError::InvalidRecord {
                index: records.len(),
                reason: "pc is zero".into(),
            });
        }
        records.push(rec);
        offset += RECORD_BYTES;
    }
    if records.is_empty() {
        return Err(TraceError::InvalidRecord {
            index: 0,
            reason: "trace has no records".into(),
        });
    }
    Ok(records)
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_trace(records)).map_err(io)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let bytes = fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_trace(&bytes)
}

/// Σ gap + record count.
pub fn instruction_count(records: &[TraceRecord]) -> u64 {
    records.iter().map(|r| r.gap as u64 + 1).sum()
}

/// Number of distinct 64-byte lines touched.
pub fn unique_lines(records: &[TraceRecord]) -> usize {
    let mut lines: Vec<u64> = records.iter().map(|r| r.vaddr / LINE_BYTES).collect();
    lines.sort_unstable();
    lines.dedup();
    lines.len()
}

// ---------------------------------------------------------------------------
// Synthetic workloads

/// Bytes between consecutive fields of a pointer-chase node.
pub const NODE_FIELD_STRIDE: u64 = 128;
/// Loads issued per node visit.
pub const NODE_FIELDS: u64 = 3;
pub const NODE_BYTES: u64 = NODE_FIELD_STRIDE * NODE_FIELDS;
/// Distinct load sites walking the pointer-chase structure.
pub const CHASE_SITES: u64 = 4;
/// Records per segment when interleaving the parts of a mixed pattern.
pub const MIX_SEGMENT: u64 = 96;

const PC_BASE: u64 = 0x40_0000;
const PC_REGION: u64 = 0x1000;
const DATA_REGION: u64 = 1 << 36;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// One load site walking memory line by line.
    Stream,
    /// One load site with a fixed byte stride.
    Strided { stride: i64 },
    /// Node visits drawn from a power-law ranked footprint. Each visit reads
    /// [`NODE_FIELDS`] fields [`NODE_FIELD_STRIDE`] bytes apart. Ranks are laid
    /// out page by page, and pages are scattered over the footprint, so the
    /// hottest nodes share pages.
    PointerChase { footprint: u64, exponent: f64 },
    /// Interleaves segments of the component patterns, picked by weight.
    Mixed { parts: Vec<(u32, Pattern)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    pub record_count: u64,
    pub seed: u64,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
    /// Start of the first component's data region.
    #[serde(default)]
    pub base: u64,
    /// Gaps are drawn uniformly from `0..=2 * mean_gap`.
    #[serde(default)]
    pub mean_gap: u16,
    /// Percentage of records turned into stores.
    #[serde(default)]
    pub store_percent: u8,
}

fn default_page_size() -> u64 {
    4096
}

impl SyntheticSpec {
    pub fn new(pattern: Pattern, record_count: u64, seed: u64) -> Self {
        SyntheticSpec {
            pattern,
            record_count,
            seed,
            page_size: default_page_size(),
            base: 0,
            mean_gap: 0,
            store_percent: 0,
        }
    }

    pub fn with_gap(mut self, mean_gap: u16) -> Self {
        self.mean_gap = mean_gap;
        self
    }

    pub fn with_stores(mut self, percent: u8) -> Self {
        self.store_percent = percent;
        self
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.record_count == 0 {
            return Err(TraceError::Spec("record count must be positive".into()));
        }
        if !self.page_size.is_power_of_two() || self.page_size < NODE_BYTES {
            return Err(TraceError::Spec(format!(
                "page size {} must be a power of two of at least {NODE_BYTES}",
                self.page_size
            )));
        }
        if self.store_percent > 100 {
            return Err(TraceError::Spec("store percent above 100".into()));
        }
        validate_pattern(&self.pattern, true)
    }
}

fn validate_pattern(p: &Pattern, top: bool) -> Result<(), TraceError> {
    match p {
        Pattern::Stream => Ok(()),
        Pattern::Strided { stride } => {
            if *stride == 0 {
                Err(TraceError::Spec("stride must be non-zero".into()))
            } else {
                Ok(())
            }
        }
        Pattern::PointerChase {
            footprint,
            exponent,
        } => {
            if *footprint == 0 {
                return Err(TraceError::Spec("footprint must be positive".into()));
            }
            if !exponent.is_finite() || *exponent < 0.0 {
                return Err(TraceError::Spec(format!(
                    "power-law exponent {exponent} must be finite and non-negative"
                )));
            }
            Ok(())
        }
        Pattern::Mixed { parts } => {
            if !top {
                return Err(TraceError::Spec("mixed patterns cannot nest".into()));
            }
            if parts.is_empty() || parts.iter().all(|(w, _)| *w == 0) {
                return Err(TraceError::Spec("mixed pattern needs a positive weight".into()));
            }
            parts.iter().try_for_each(|(_, p)| validate_pattern(p, false))
        }
    }
}

/// Address/PC source for one non-mixed pattern.
enum Source {
    Linear {
        pc: u64,
        next: u64,
        step: i64,
    },
    Chase {
        pc_base: u64,
        region: u64,
        page_size: u64,
        pages: u64,
        nodes_per_page: u64,
        page_mult: u64,
        zipf: Zipf<f64>,
        site_pc: u64,
        node_addr: u64,
        field: u64,
    },
}

impl Source {
    fn new(p: &Pattern, index: u64, spec: &SyntheticSpec) -> Source {
        let pc_base = PC_BASE + index * PC_REGION;
        let region = spec.base.wrapping_add(index * DATA_REGION);
        match p {
            Pattern::Stream => Source::Linear {
                pc: pc_base + 0x10,
                next: region,
                step: LINE_BYTES as i64,
            },
            Pattern::Strided { stride } => Source::Linear {
                pc: pc_base + 0x20,
                // descending strides start at the top of the region
                next: if *stride < 0 {
                    region + DATA_REGION / 2
                } else {
                    region
                },
                step: *stride,
            },
            Pattern::PointerChase {
                footprint,
                exponent,
            } => {
                let pages = footprint.div_ceil(spec.page_size).max(1);
                let nodes_per_page = spec.page_size / NODE_BYTES;
                let nodes = pages * nodes_per_page;
                Source::Chase {
                    pc_base,
                    region,
                    page_size: spec.page_size,
                    pages,
                    nodes_per_page,
                    page_mult: coprime_multiplier(pages),
                    zipf: Zipf::new(nodes as f64, *exponent).expect("validated zipf parameters"),
                    site_pc: 0,
                    node_addr: 0,
                    field: NODE_FIELDS,
                }
            }
            Pattern::Mixed { .. } => unreachable!("mixed patterns are flattened"),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> (u64, u64) {
        match self {
            Source::Linear { pc, next, step } => {
                let v = *next;
                *next = next.wrapping_add_signed(*step);
                (*pc, v)
            }
            Source::Chase {
                pc_base,
                region,
                page_size,
                pages,
                nodes_per_page,
                page_mult,
                zipf,
                site_pc,
                node_addr,
                field,
            } => {
                if *field == NODE_FIELDS {
                    let rank = zipf.sample(rng) as u64 - 1;
                    let page = (rank / *nodes_per_page).wrapping_mul(*page_mult) % *pages;
                    let slot = rank % *nodes_per_page;
                    *node_addr = *region + page * *page_size + slot * NODE_BYTES;
                    *site_pc = *pc_base + 0x40 + rng.random_range(0..CHASE_SITES) * 8;
                    *field = 0;
                }
                let v = *node_addr + *field * NODE_FIELD_STRIDE;
                *field += 1;
                (*site_pc, v)
            }
        }
    }
}

/// Smallest multiplier ≥ 0x9E37 that is coprime with `n`, so that
/// `i * m mod n` permutes `0..n`.
fn coprime_multiplier(n: u64) -> u64 {
    fn gcd(mut a: u64, mut b: u64) -> u64 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    if n <= 1 {
        return 1;
    }
    let mut m = 0x9E37_79B9 % n;
    if m == 0 {
        m = 1;
    }
    while gcd(m, n) != 1 {
        m = (m + 1) % n;
        if m == 0 {
            m = 1;
        }
    }
    m
}

/// Deterministic record stream for a [`SyntheticSpec`].
pub struct Generator {
    rng: ChaCha8Rng,
    sources: Vec<Source>,
    weights: Vec<u32>,
    total_weight: u32,
    current: usize,
    segment_left: u64,
    remaining: u64,
    mean_gap: u16,
    store_percent: u8,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self, TraceError> {
        spec.validate()?;
        let (sources, weights): (Vec<Source>, Vec<u32>) = match &spec.pattern {
            Pattern::Mixed { parts } => parts
                .iter()
                .enumerate()
                .map(|(i, (w, p))| (Source::new(p, i as u64, spec), *w))
                .unzip(),
            p => (vec![Source::new(p, 0, spec)], vec![1]),
        };
        Ok(Generator {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            total_weight: weights.iter().sum(),
            sources,
            weights,
            current: 0,
            segment_left: 0,
            remaining: spec.record_count,
            mean_gap: spec.mean_gap,
            store_percent: spec.store_percent,
        })
    }

    fn pick_segment(&mut self) {
        if self.sources.len() == 1 {
            self.segment_left = u64::MAX;
            return;
        }
        let mut x = self.rng.random_range(0..self.total_weight);
        for (i, w) in self.weights.iter().enumerate() {
            if x < *w {
                self.current = i;
                break;
            }
            x -= *w;
        }
        self.segment_left = MIX_SEGMENT;
    }
}

impl Iterator for Generator {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        if self.segment_left == 0 {
            self.pick_segment();
        }
        self.segment_left -= 1;
        let (pc, vaddr) = self.sources[self.current].next(&mut self.rng);
        let gap = if self.mean_gap == 0 {
            0
        } else {
            self.rng
                .random_range(0..=(self.mean_gap as u32 * 2).min(u16::MAX as u32)) as u16
        };
        let kind = if self.store_percent > 0 && self.rng.random_range(0..100u8) < self.store_percent {
            AccessKind::Store
        } else {
            AccessKind::Load
        };
        Some(TraceRecord { gap, kind, pc, vaddr })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<TraceRecord>, TraceError> {
    Ok(Generator::new(spec)?.collect())
}
