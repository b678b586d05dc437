//! Run manifests: the complete, replayable description of a batch of
//! simulations and where their merged results go.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tlp_core::stats::{self, dram_delta, weighted_speedup};
use tlp_core::trace::{self, SyntheticSpec, TraceRecord};
use tlp_core::{simulate, simulate_multicore, SimConfig, SimStats, StatsRow, VariantName};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    File { path: PathBuf },
    Synthetic { name: String, spec: SyntheticSpec },
}

impl TraceSource {
    /// Name used in the `trace` column.
    pub fn name(&self) -> String {
        match self {
            TraceSource::File { path } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            TraceSource::Synthetic { name, .. } => name.clone(),
        }
    }

    pub fn load(&self) -> Result<Vec<TraceRecord>, CliError> {
        let records = match self {
            TraceSource::File { path } => trace::read_trace(path)?,
            TraceSource::Synthetic { spec, .. } => trace::generate(spec)?,
        };
        if records.is_empty() {
            return Err(CliError::Data(format!("trace {} has no records", self.name())));
        }
        Ok(records)
    }
}

/// One simulation: a single trace, or several sharing the LLC and DRAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// Unique within the manifest; becomes the `run` column.
    pub id: String,
    pub traces: Vec<TraceSource>,
    pub config: SimConfig,
    #[serde(default)]
    pub axis: String,
    #[serde(default)]
    pub axis_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub csv: PathBuf,
    pub json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Worker threads; 0 lets the pool pick.
    pub jobs: usize,
    pub outputs: Outputs,
    pub entries: Vec<RunEntry>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.entries.is_empty() {
            return Err(CliError::Usage("nothing to run: no traces given".into()));
        }
        if self.outputs.csv == self.outputs.json {
            return Err(CliError::Usage("csv and json outputs must differ".into()));
        }
        let mut seen = HashSet::new();
        let mut errs = Vec::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CliError::Usage(format!("duplicate run id {:?}", e.id)));
            }
            if e.traces.is_empty() {
                return Err(CliError::Usage(format!("run {:?} has no traces", e.id)));
            }
            if let Err(tlp_core::ConfigError::Invalid(list)) = e.config.validate() {
                errs.extend(list.into_iter().map(|m| format!("{}: {m}", e.id)));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    /// Points both outputs into `dir`, keeping their file names.
    pub fn redirect(&mut self, dir: &Path) {
        for p in [&mut self.outputs.csv, &mut self.outputs.json] {
            let name = p.file_name().map(PathBuf::from).unwrap_or_default();
            *p = dir.join(name);
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.outputs.csv.with_extension("manifest.json")
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn check(stats: &SimStats, id: &str) -> Result<(), CliError> {
    stats.check().map_err(|m| CliError::Internal(format!("{id}: {m}")))
}

fn row(entry: &RunEntry, trace: String, stats: SimStats) -> StatsRow {
    let mut r = StatsRow::new(entry.id.clone(), trace, entry.config.variant.as_str(), stats);
    r.axis = entry.axis.clone();
    r.axis_value = entry.axis_value.clone();
    r.config = entry.config.to_json();
    r
}

fn run_single(entry: &RunEntry, records: &[TraceRecord]) -> Result<Vec<StatsRow>, CliError> {
    let stats = simulate(records, &entry.config)?;
    check(&stats, &entry.id)?;
    Ok(vec![row(entry, entry.traces[0].name(), stats)])
}

/// A mix yields one row per core plus a whole-run row. The whole-run row
/// carries the weighted speedup over the baseline, with single-core
/// baseline IPCs as the reference for both.
fn run_mix(entry: &RunEntry, traces: &[&[TraceRecord]]) -> Result<Vec<StatsRow>, CliError> {
    let cfg = &entry.config;
    let mix = simulate_multicore(traces, cfg)?;
    let base_cfg = cfg.with_variant(VariantName::Baseline);
    let base_mix = if cfg.variant == VariantName::Baseline {
        mix.clone()
    } else {
        simulate_multicore(traces, &base_cfg)?
    };
    let base_solo: Vec<SimStats> = traces.iter().map(|t| simulate(t, &base_cfg)).collect::<Result<_, _>>()?;
    let ipcs = |cores: &[SimStats]| -> Result<Vec<f64>, CliError> {
        cores
            .iter()
            .map(|s| s.ipc().map_err(|e| CliError::Data(format!("{}: {e}", entry.id))))
            .collect()
    };
    let solo_ipc = ipcs(&base_solo)?;
    let ws = weighted_speedup(&ipcs(&mix.cores)?, &solo_ipc, &ipcs(&base_mix.cores)?, &solo_ipc).ok();

    let mut rows = Vec::with_capacity(traces.len() + 1);
    for (i, (core, base)) in mix.cores.iter().zip(&base_mix.cores).enumerate() {
        check(core, &entry.id)?;
        let mut r = row(entry, entry.traces[i].name(), *core);
        r.core = i.to_string();
        r.dram_delta = dram_delta(core, base).ok();
        rows.push(r);
    }
    check(&mix.total, &entry.id)?;
    let name = entry.traces.iter().map(TraceSource::name).collect::<Vec<_>>().join("+");
    let mut total = row(entry, name, mix.total);
    total.dram_delta = dram_delta(&mix.total, &base_mix.total).ok();
    total.weighted_speedup = ws;
    rows.push(total);
    Ok(rows)
}

/// Fills `dram_delta` on single-core rows from the baseline row of the same
/// trace and sweep point, when the batch has one.
fn fill_deltas(rows: &mut [StatsRow]) {
    type Key = (String, String, String, String);
    let key = |r: &StatsRow| -> Key { (r.trace.clone(), r.core.clone(), r.axis.clone(), r.axis_value.clone()) };
    let base: HashMap<Key, SimStats> = rows
        .iter()
        .filter(|r| r.variant == VariantName::Baseline.as_str() && r.core == "all")
        .map(|r| (key(r), r.stats))
        .collect();
    for r in rows.iter_mut().filter(|r| r.dram_delta.is_none() && r.core == "all") {
        if let Some(b) = base.get(&key(r)) {
            r.dram_delta = dram_delta(&r.stats, b).ok();
        }
    }
}

/// Runs every entry and returns the merged rows in manifest order. All
/// traces are loaded before the first simulation starts.
pub fn execute(m: &RunManifest) -> Result<Vec<StatsRow>, CliError> {
    m.validate()?;
    let mut sources: Vec<&TraceSource> = Vec::new();
    for e in &m.entries {
        for t in &e.traces {
            if !sources.contains(&t) {
                sources.push(t);
            }
        }
    }
    let loaded: Vec<Vec<TraceRecord>> = sources.iter().map(|s| s.load()).collect::<Result<_, _>>()?;
    let lookup = |t: &TraceSource| -> &[TraceRecord] {
        let i = sources.iter().position(|s| *s == t).expect("every source was loaded");
        &loaded[i]
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.jobs)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    let per_entry: Vec<Result<Vec<StatsRow>, CliError>> = pool.install(|| {
        m.entries
            .par_iter()
            .map(|e| {
                let traces: Vec<&[TraceRecord]> = e.traces.iter().map(lookup).collect();
                if traces.len() == 1 {
                    run_single(e, traces[0])
                } else {
                    run_mix(e, &traces)
                }
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_entry {
        rows.extend(r?);
    }
    fill_deltas(&mut rows);
    Ok(rows)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes the CSV, the JSON and the manifest itself. Nothing is written
/// unless every run succeeded.
pub fn write_outputs(m: &RunManifest, rows: &[StatsRow]) -> Result<(), CliError> {
    let csv = stats::to_csv(rows)?;
    let json = stats::to_json(rows)?;
    write_atomic(&m.outputs.csv, &csv)?;
    write_atomic(&m.outputs.json, &json)?;
    write_atomic(&m.manifest_path(), &m.to_json())
}
