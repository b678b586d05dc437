use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tlp_core::stats::{self, prefetch_accuracy, ExportFormat};
use tlp_core::memhier::Level;
use tlp_core::prefetch::PrefetchLevel;
use tlp_core::trace::{self, Pattern, SyntheticSpec, LINE_BYTES};
use tlp_core::{SimConfig, StatsRow, VariantName};
use toml::Table;

use crate::cli::{AblateArgs, Axis, Common, GenArgs, PatternArg, ReportArgs, RunArgs, SweepArgs};
use crate::config;
use crate::manifest::{self, Outputs, RunEntry, RunManifest, TraceSource};
use crate::CliError;

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let spec = match (&a.spec, a.pattern) {
        (Some(path), _) => {
            let mut spec = read_spec(path)?;
            if let Some(n) = a.records {
                spec.record_count = n;
            }
            spec
        }
        (None, Some(p)) => {
            let pattern = match p {
                PatternArg::Stream => Pattern::Stream,
                PatternArg::Strided => Pattern::Strided { stride: a.stride },
                PatternArg::Chase => Pattern::PointerChase {
                    footprint: a.footprint,
                    exponent: a.exponent,
                },
                PatternArg::Uniform => Pattern::PointerChase {
                    footprint: a.footprint,
                    exponent: 0.0,
                },
            };
            let n = a.records.expect("clap requires --records without --spec");
            SyntheticSpec::new(pattern, n, a.seed).with_gap(a.gap).with_stores(a.stores)
        }
        (None, None) => unreachable!("clap requires --pattern or --spec"),
    };
    if spec.record_count == 0 {
        return Err(CliError::Usage("--records must be at least 1".into()));
    }
    let records = trace::generate(&spec)?;
    trace::write_trace(&a.out, &records)?;
    let lines = trace::unique_lines(&records);
    println!(
        "wrote {} records ({} instructions) to {}; footprint {} lines ({} bytes)",
        records.len(),
        trace::instruction_count(&records),
        a.out.display(),
        lines,
        lines as u64 * LINE_BYTES
    );
    Ok(())
}

fn read_spec(path: &Path) -> Result<SyntheticSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_variant(s: &str) -> Result<VariantName, CliError> {
    VariantName::from_str(s.trim()).map_err(|_| {
        let names: Vec<&str> = VariantName::ALL.iter().map(|v| v.as_str()).collect();
        CliError::Usage(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
    })
}

/// Config file text and the overrides given as flags, in precedence order.
struct ConfigSource {
    text: Option<String>,
    overrides: Vec<Table>,
}

impl ConfigSource {
    fn from_common(c: &Common) -> Result<Self, CliError> {
        let text = match &c.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
            None => None,
        };
        let mut overrides: Vec<Table> = c.overrides.iter().map(|s| config::parse_override(s)).collect::<Result<_, _>>()?;
        if let Some(v) = &c.variant {
            overrides.push(config::parse_override(&format!("variant=\"{}\"", parse_variant(v)?))?);
        }
        if let Some(bw) = c.dram_bw {
            overrides.push(config::parse_override(&format!("dram.gbps_per_core={bw:?}"))?);
        }
        Ok(ConfigSource { text, overrides })
    }

    fn build(&self, extra: &[Table]) -> Result<SimConfig, CliError> {
        let mut all = self.overrides.clone();
        all.extend(extra.iter().cloned());
        config::build(self.text.as_deref(), &all)
    }
}

/// Groups of traces simulated together: one per trace, or a single mix.
fn units(c: &Common) -> Result<Vec<(String, Vec<TraceSource>)>, CliError> {
    let mut sources: Vec<TraceSource> = c.traces.iter().map(|p| TraceSource::File { path: p.clone() }).collect();
    for p in &c.synthetic {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        sources.push(TraceSource::Synthetic { name, spec: read_spec(p)? });
    }
    if sources.is_empty() {
        return Err(CliError::Usage("give at least one --trace or --synthetic".into()));
    }
    let groups = if c.multicore {
        if sources.len() < 2 {
            return Err(CliError::Usage("--multicore needs at least two traces".into()));
        }
        vec![sources]
    } else {
        sources.into_iter().map(|s| vec![s]).collect()
    };
    let mut named: Vec<(String, Vec<TraceSource>)> = Vec::new();
    for g in groups {
        let base = g.iter().map(TraceSource::name).collect::<Vec<_>>().join("+");
        let mut name = base.clone();
        let mut n = 2;
        while named.iter().any(|(k, _)| *k == name) {
            name = format!("{base}#{n}");
            n += 1;
        }
        named.push((name, g));
    }
    Ok(named)
}

fn new_manifest(command: &str, c: &Common, entries: Vec<RunEntry>) -> RunManifest {
    let name = c.name.clone().unwrap_or_else(|| command.to_string());
    let dir = c.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    RunManifest {
        command: command.to_string(),
        jobs: c.jobs,
        outputs: Outputs {
            csv: dir.join(format!("{name}.csv")),
            json: dir.join(format!("{name}.json")),
        },
        entries,
    }
}

fn entry(id: String, traces: Vec<TraceSource>, config: SimConfig) -> RunEntry {
    RunEntry {
        id,
        traces,
        config,
        axis: String::new(),
        axis_value: String::new(),
    }
}

fn execute_and_write(m: &RunManifest) -> Result<Vec<StatsRow>, CliError> {
    let rows = manifest::execute(m)?;
    manifest::write_outputs(m, &rows)?;
    print!("{}", summary(&rows));
    println!("wrote {} and {}", m.outputs.csv.display(), m.outputs.json.display());
    Ok(rows)
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::read(path)?;
        if a.common.jobs != 0 {
            m.jobs = a.common.jobs;
        }
        if let Some(dir) = &a.common.out_dir {
            m.redirect(dir);
        }
        execute_and_write(&m)?;
        return Ok(());
    }
    let src = ConfigSource::from_common(&a.common)?;
    let cfg = src.build(&[])?;
    let entries = units(&a.common)?
        .into_iter()
        .map(|(name, traces)| entry(name, traces, cfg))
        .collect();
    execute_and_write(&new_manifest("run", &a.common, entries))?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let src = ConfigSource::from_common(&a.common)?;
    let cfg = src.build(&[])?;
    let mut entries = Vec::new();
    for (name, traces) in units(&a.common)? {
        for v in VariantName::ALL {
            entries.push(entry(format!("{name}/{v}"), traces.clone(), cfg.with_variant(v)));
        }
    }
    execute_and_write(&new_manifest("ablate", &a.common, entries))?;
    Ok(())
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::TauHigh => "tau_high",
            Axis::TauLow => "tau_low",
            Axis::TauPref => "tau_pref",
            Axis::ThetaTrain => "theta_train",
            Axis::DramBw => "dram_bw",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Axis::DramBw => "dram.gbps_per_core",
            Axis::TauHigh => "perceptron.tau_high",
            Axis::TauLow => "perceptron.tau_low",
            Axis::TauPref => "perceptron.tau_pref",
            Axis::ThetaTrain => "perceptron.theta_train",
        }
    }

    /// Normalizes one value, so `3.20` and `3.2` name the same point.
    fn canonical(self, raw: &str) -> Result<String, CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{} value {raw:?}: {e}", self.name()));
        match self {
            Axis::DramBw => {
                let v: f64 = raw.trim().parse().map_err(|e| bad(&e))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad(&"must be positive"));
                }
                Ok(format!("{v:?}"))
            }
            _ => raw.trim().parse::<i32>().map(|v| v.to_string()).map_err(|e| bad(&e)),
        }
    }
}

pub const DEFAULT_OUT_DIR: &str = "tlpsim-out";

pub const DEFAULT_BANDWIDTHS: [&str; 5] = ["1.6", "3.2", "6.4", "12.8", "25.6"];

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let axis = a.axis;
    let raw: Vec<String> = if a.values.is_empty() {
        match axis {
            Axis::DramBw => DEFAULT_BANDWIDTHS.iter().map(|s| s.to_string()).collect(),
            _ => return Err(CliError::Usage(format!("--values is required for {}", axis.name()))),
        }
    } else {
        a.values.clone()
    };
    let values: Vec<String> = raw.iter().map(|v| axis.canonical(v)).collect::<Result<_, _>>()?;
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(CliError::Usage(format!("{} value {v} given twice", axis.name())));
        }
    }
    let variants: Vec<VariantName> = if a.variants.iter().any(|v| v == "all") {
        VariantName::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?
    };

    let src = ConfigSource::from_common(&a.common)?;
    let mut configs = Vec::new();
    for v in &values {
        let o = config::parse_override(&format!("{}={v}", axis.key()))?;
        configs.push(src.build(&[o])?);
    }
    let mut entries = Vec::new();
    for (name, traces) in units(&a.common)? {
        for &variant in &variants {
            for (v, cfg) in values.iter().zip(&configs) {
                let mut e = entry(
                    format!("{name}/{variant}/{}={v}", axis.name()),
                    traces.clone(),
                    cfg.with_variant(variant),
                );
                e.axis = axis.name().to_string();
                e.axis_value = v.clone();
                entries.push(e);
            }
        }
    }
    let m = new_manifest("sweep", &a.common, entries);
    let rows = execute_and_write(&m)?;
    print!("{}", best_points(&rows));
    Ok(())
}

/// For each trace and variant, the sweep point with the fewest cycles.
pub fn best_points(rows: &[StatsRow]) -> String {
    let mut out = String::new();
    let mut groups: Vec<(&str, &str)> = Vec::new();
    for r in rows.iter().filter(|r| r.core == "all" && !r.axis.is_empty()) {
        if !groups.contains(&(r.trace.as_str(), r.variant.as_str())) {
            groups.push((&r.trace, &r.variant));
        }
    }
    for (t, v) in groups {
        let best = rows
            .iter()
            .filter(|r| r.core == "all" && r.trace == t && r.variant == v)
            .min_by_key(|r| r.stats.cycles)
            .expect("group has rows");
        let _ = writeln!(
            out,
            "best {}={} for {v} on {t} ({} cycles)",
            best.axis, best.axis_value, best.stats.cycles
        );
    }
    out
}

fn fmt_opt(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{:+.1}%", x * 100.0),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

/// Fixed-width table of the headline numbers, one line per row.
pub fn summary(rows: &[StatsRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let _ = writeln!(
        out,
        "{:<width$} {:>5} {:>12} {:>7} {:>9} {:>9} {:>8} {:>10} {:>6}",
        "run", "core", "cycles", "ipc", "llc_mpki", "dram_d", "pf_acc", "spec_reads", "ws"
    );
    for r in rows {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "{:<width$} {:>5} {:>12} {:>7} {:>9} {:>9} {:>8} {:>10} {:>6}",
            r.run,
            r.core,
            s.cycles,
            fmt_opt(s.ipc().ok(), false),
            fmt_opt(s.level_mpki(Level::Llc).ok(), false),
            fmt_opt(r.dram_delta, true),
            fmt_opt(prefetch_accuracy(s, PrefetchLevel::L1d).ok(), false),
            s.speculation.issued,
            fmt_opt(r.weighted_speedup, false),
        );
    }
    out
}

fn rows_from(path: &Path) -> Result<Vec<StatsRow>, CliError> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
            return Ok(stats::import(&m.outputs.csv)?);
        }
    }
    Ok(stats::import(path)?)
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(rows_from(p)?);
    }
    print!("{}", summary(&rows));
    print!("{}", best_points(&rows));
    if let Some(out) = &a.out {
        let format = match out.extension().and_then(|e| e.to_str()) {
            Some("json") => ExportFormat::Json,
            _ => ExportFormat::Csv,
        };
        stats::export(&rows, format, out)?;
        println!("wrote {} rows to {}", rows.len(), PathBuf::from(out).display());
    }
    Ok(())
}
