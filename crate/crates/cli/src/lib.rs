//! Experiment driver for the tlp-core simulator.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use thiserror::Error;
use tlp_core::{ExportError, SimError, TraceError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TLPSIM_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Input files that exist but cannot be decoded.
    #[error("{0}")]
    Data(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io { .. } | CliError::Data(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(tlp_core::ConfigError::Invalid(errs)) => CliError::Config(errs),
            SimError::Trace(t) => t.into(),
            SimError::Input(m) => CliError::Usage(format!("simulation needs {m}")),
            SimError::Invariant(m) => CliError::Internal(m),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io { path, source } => CliError::Io { path, source },
            TraceError::Spec(m) => CliError::Usage(format!("invalid synthetic spec: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}
