//! Caches, MSHRs, page translation and DRAM.

mod cache;
mod dram;
mod mshr;
mod pagemap;

use serde::{Deserialize, Serialize};

pub use cache::{Cache, CacheGeometry, Evicted, LineState, Lookup};
pub use dram::{DramConfig, DramCounters, DramModel, DramResponse, ReadKind};
pub use mshr::{Mshr, MshrEntry};
pub use pagemap::PageMap;

use crate::trace::LINE_BYTES;

/// Where in the hierarchy a request was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1d,
    L2,
    Llc,
    Dram,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1d, Level::L2, Level::Llc, Level::Dram];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::L1d => "l1d",
            Level::L2 => "l2",
            Level::Llc => "llc",
            Level::Dram => "dram",
        }
    }
}

pub fn line_of(addr: u64) -> u64 {
    addr / LINE_BYTES
}
