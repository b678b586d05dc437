use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::{commands, CliError, OUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "tlpsim", version, about = "Trace-driven simulator for off-chip load prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trace file.
    Gen(GenArgs),
    /// Simulate traces under one configuration.
    Run(RunArgs),
    /// Run every predictor variant on the same traces.
    Ablate(AblateArgs),
    /// Vary one parameter across a list of values.
    Sweep(SweepArgs),
    /// Summarize stats files or manifests.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatternArg {
    Stream,
    Strided,
    Chase,
    /// Pointer chase with no locality in node choice.
    Uniform,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, required_unless_present = "spec", conflicts_with = "spec")]
    pub pattern: Option<PatternArg>,
    /// Full generator spec as JSON, for mixed patterns.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), required_unless_present = "spec")]
    pub records: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Mean non-memory instructions between memory operations.
    #[arg(long, default_value_t = 0)]
    pub gap: u16,
    /// Percentage of operations turned into stores.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=100))]
    pub stores: u8,
    /// Byte stride for `strided`.
    #[arg(long, default_value_t = 128, allow_negative_numbers = true)]
    pub stride: i64,
    /// Footprint for `chase` and `uniform`, e.g. 64M or 1G.
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    pub footprint: u64,
    /// Power-law exponent for `chase`.
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; keys left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set perceptron.tau_high=12`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set variant=...`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Shorthand for `--set dram.gbps_per_core=...`.
    #[arg(long, value_name = "GBPS")]
    pub dram_bw: Option<f64>,
    /// Trace file; repeat for several.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    /// Generator spec (JSON) used in place of a trace file; repeatable.
    #[arg(long = "synthetic")]
    pub synthetic: Vec<PathBuf>,
    /// Simulate all traces together as one multi-core mix.
    #[arg(long)]
    pub multicore: bool,
    /// Output directory [default: tlpsim-out].
    #[arg(long, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    /// Base name of the output files; defaults to the subcommand.
    #[arg(long)]
    pub name: Option<String>,
    /// Worker threads; 0 uses one per CPU.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Replay a manifest written by an earlier run.
    #[arg(long, conflicts_with_all = ["traces", "synthetic", "config", "overrides", "variant", "dram_bw", "multicore", "name"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    TauHigh,
    TauLow,
    TauPref,
    ThetaTrain,
    DramBw,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values; `dram_bw` defaults to 1.6,3.2,6.4,12.8,25.6.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub values: Vec<String>,
    /// Comma-separated variants, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Stats CSV/JSON files or run manifests.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Also write all rows as one CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses byte sizes with an optional K, M or G suffix (powers of 1024).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, shift) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let n: u64 = num.parse().map_err(|e| format!("bad size {s:?}: {e}"))?;
    n.checked_mul(1 << shift).ok_or_else(|| format!("size {s:?} overflows"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Run(a) => commands::run(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(list) if list.len() > 1 => {
                    eprintln!("tlpsim: config has {} problems:", list.len());
                    for m in list {
                        eprintln!("  {m}");
                    }
                }
                _ => eprintln!("tlpsim: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
