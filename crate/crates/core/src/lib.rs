//! Trace-driven memory hierarchy simulator with perceptron-based off-chip
//! load prediction and prefetch filtering.

pub mod engine;
pub mod error;
pub mod memhier;
pub mod offchip;
pub mod perceptron;
pub mod prefetch;
pub mod stats;
pub mod trace;

pub use engine::{simulate, simulate_multicore, MulticoreStats, SimConfig};
pub use error::{ConfigError, ExportError, MetricError, SimError, TraceError};
pub use offchip::VariantName;
pub use stats::{SimStats, StatsRow};
pub use trace::{AccessKind, TraceRecord};
