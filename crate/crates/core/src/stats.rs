//! Run counters, derived metrics and CSV/JSON export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ExportError, MetricError};
use crate::memhier::{DramCounters, Level};
use crate::prefetch::PrefetchLevel;

/// Demand traffic seen by one cache level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
}

impl LevelStats {
    pub fn record(&mut self, hit: bool) {
        self.accesses += 1;
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
    }
}

/// Prefetches of one prefetcher level. Per-source arrays are indexed by the
/// level that served the fill (`Level::index`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchStats {
    /// Candidates not already resident in the target cache.
    pub emitted: u64,
    pub dropped: u64,
    pub issued: u64,
    pub filled: u64,
    pub useful: u64,
    pub useless: u64,
    pub filled_from: [u64; 4],
    pub useful_from: [u64; 4],
    pub useless_from: [u64; 4],
}

impl PrefetchStats {
    pub fn record_fill(&mut self, source: Level) {
        self.filled += 1;
        self.filled_from[source.index()] += 1;
    }

    pub fn record_useful(&mut self, source: Level) {
        self.useful += 1;
        self.useful_from[source.index()] += 1;
    }

    pub fn record_useless(&mut self, source: Level) {
        self.useless += 1;
        self.useless_from[source.index()] += 1;
    }
}

/// FLP decisions on loads, and how they turned out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionStats {
    pub consulted: u64,
    pub high: u64,
    pub delayed: u64,
    pub onchip: u64,
    /// Off-chip predictions (high or delayed) whose load was served by DRAM.
    pub true_offchip: u64,
    /// On-chip predictions whose load was served by DRAM.
    pub missed_offchip: u64,
}

impl PredictionStats {
    pub fn predicted_offchip(&self) -> u64 {
        self.high + self.delayed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationStats {
    /// Speculative reads requested (merged or not).
    pub issued: u64,
    pub issued_at_core: u64,
    pub issued_at_l1d_miss: u64,
    /// Where the regular request found the block, per issued read.
    pub location: [u64; 4],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub instructions: u64,
    pub memory_ops: u64,
    pub loads: u64,
    pub stores: u64,
    pub cycles: u64,
    pub l1d: LevelStats,
    pub l2: LevelStats,
    pub llc: LevelStats,
    /// Demand accesses by serving level.
    pub served: [u64; 4],
    pub dram: DramCounters,
    pub speculation: SpeculationStats,
    pub prediction: PredictionStats,
    pub l1d_prefetch: PrefetchStats,
    pub l2_prefetch: PrefetchStats,
    pub load_latency: u64,
    pub mshr_stall_cycles: u64,
}

impl SimStats {
    pub fn level(&self, level: Level) -> Option<&LevelStats> {
        match level {
            Level::L1d => Some(&self.l1d),
            Level::L2 => Some(&self.l2),
            Level::Llc => Some(&self.llc),
            Level::Dram => None,
        }
    }

    pub fn prefetch(&self, level: PrefetchLevel) -> &PrefetchStats {
        match level {
            PrefetchLevel::L1d => &self.l1d_prefetch,
            PrefetchLevel::L2 => &self.l2_prefetch,
        }
    }

    pub fn ipc(&self) -> Result<f64, MetricError> {
        if self.cycles == 0 {
            return Err(MetricError::Undefined("ipc with zero cycles"));
        }
        Ok(self.instructions as f64 / self.cycles as f64)
    }

    pub fn level_mpki(&self, level: Level) -> Result<f64, MetricError> {
        let misses = self.level(level).map_or(self.served[Level::Dram.index()], |l| l.misses);
        mpki(misses, self.instructions)
    }

    /// Consistency checks that must hold for every finished run.
    pub fn check(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        let demand: u64 = self.served.iter().sum();
        if demand != self.memory_ops {
            errs.push(format!("served levels sum to {demand}, expected {} demand ops", self.memory_ops));
        }
        if self.l1d.accesses != self.memory_ops {
            errs.push("l1d accesses differ from demand ops".to_string());
        }
        if self.l1d.misses != self.l2.accesses || self.l2.misses != self.llc.accesses {
            errs.push("miss/access chain between levels is broken".to_string());
        }
        if self.llc.misses != self.served[Level::Dram.index()] {
            errs.push("llc misses differ from dram-served demands".to_string());
        }
        let loc: u64 = self.speculation.location.iter().sum();
        if loc != self.speculation.issued {
            errs.push(format!("speculation breakdown sums to {loc}, issued {}", self.speculation.issued));
        }
        if self.speculation.issued_at_core + self.speculation.issued_at_l1d_miss != self.speculation.issued {
            errs.push("speculation issue points do not sum to issued".to_string());
        }
        if self.dram.speculative_reads > self.speculation.issued {
            errs.push("more speculative dram reads than speculative issues".to_string());
        }
        for (name, p) in [("l1d", &self.l1d_prefetch), ("l2", &self.l2_prefetch)] {
            if p.issued + p.dropped != p.emitted {
                errs.push(format!("{name} prefetch: issued + dropped != emitted"));
            }
            if p.useful + p.useless != p.filled {
                errs.push(format!("{name} prefetch: useful + useless != filled"));
            }
            if p.filled != p.issued {
                errs.push(format!("{name} prefetch: filled != issued"));
            }
            for (what, arr, total) in [
                ("filled", p.filled_from, p.filled),
                ("useful", p.useful_from, p.useful),
                ("useless", p.useless_from, p.useless),
            ] {
                if arr.iter().sum::<u64>() != total {
                    errs.push(format!("{name} prefetch {what} breakdown does not sum"));
                }
            }
        }
        if self.loads + self.stores != self.memory_ops {
            errs.push("loads + stores != memory ops".to_string());
        }
        let p = &self.prediction;
        if p.high + p.delayed + p.onchip != p.consulted {
            errs.push("prediction classes do not sum".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

pub fn mpki(misses: u64, instructions: u64) -> Result<f64, MetricError> {
    if instructions == 0 {
        return Err(MetricError::Undefined("mpki with zero instructions"));
    }
    Ok(misses as f64 * 1000.0 / instructions as f64)
}

/// Per-kilo-instruction rate of any counter.
pub fn per_kilo(count: u64, instructions: u64) -> Result<f64, MetricError> {
    mpki(count, instructions)
}

pub fn prefetch_accuracy(stats: &SimStats, level: PrefetchLevel) -> Result<f64, MetricError> {
    let p = stats.prefetch(level);
    if p.filled == 0 {
        return Err(MetricError::Undefined("prefetch accuracy with no fills"));
    }
    Ok(p.useful as f64 / p.filled as f64)
}

/// Relative change in DRAM transactions (reads after merging, plus
/// writebacks) against a baseline run of the same trace.
pub fn dram_delta(run: &SimStats, baseline: &SimStats) -> Result<f64, MetricError> {
    let base = baseline.dram.transactions();
    if base == 0 {
        return Err(MetricError::Undefined("dram delta with zero baseline transactions"));
    }
    Ok((run.dram.transactions() as f64 - base as f64) / base as f64)
}

/// Reads-only variant of [`dram_delta`].
pub fn dram_read_delta(run: &SimStats, baseline: &SimStats) -> Result<f64, MetricError> {
    let base = baseline.dram.reads();
    if base == 0 {
        return Err(MetricError::Undefined("dram delta with zero baseline reads"));
    }
    Ok((run.dram.reads() as f64 - base as f64) / base as f64)
}

fn speedup_sum(shared: &[f64], solo: &[f64]) -> Result<f64, MetricError> {
    if shared.len() != solo.len() {
        return Err(MetricError::Input(format!(
            "{} shared runs but {} solo runs",
            shared.len(),
            solo.len()
        )));
    }
    if shared.is_empty() {
        return Err(MetricError::Input("empty workload mix".into()));
    }
    shared
        .iter()
        .zip(solo)
        .map(|(s, a)| {
            if *a > 0.0 && a.is_finite() {
                Ok(s / a)
            } else {
                Err(MetricError::Undefined("solo ipc must be positive"))
            }
        })
        .sum()
}

/// Σ(IPC_shared / IPC_single) of a technique divided by the same sum for
/// the baseline. Inputs are IPCs listed per core in mix order.
pub fn weighted_speedup(
    mix_ipc: &[f64],
    solo_ipc: &[f64],
    baseline_mix_ipc: &[f64],
    baseline_solo_ipc: &[f64],
) -> Result<f64, MetricError> {
    let tech = speedup_sum(mix_ipc, solo_ipc)?;
    let base = speedup_sum(baseline_mix_ipc, baseline_solo_ipc)?;
    if base == 0.0 {
        return Err(MetricError::Undefined("baseline weighted sum is zero"));
    }
    Ok(tech / base)
}

/// One exported row: identifying columns plus a run's counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub run: String,
    pub trace: String,
    pub variant: String,
    /// Core index, or "all" for whole-run rows.
    pub core: String,
    /// Sweep axis name, empty outside sweeps.
    pub axis: String,
    pub axis_value: String,
    pub stats: SimStats,
    /// Relative DRAM-transaction change against the baseline row of the
    /// same trace, when one is known.
    pub dram_delta: Option<f64>,
    pub weighted_speedup: Option<f64>,
    /// Configuration of the run, serialized as JSON.
    pub config: serde_json::Value,
}

const LEVEL_NAMES: [&str; 4] = ["l1d", "l2", "llc", "dram"];

fn opt(v: Result<f64, MetricError>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

impl StatsRow {
    pub fn new(run: impl Into<String>, trace: impl Into<String>, variant: impl Into<String>, stats: SimStats) -> Self {
        StatsRow {
            run: run.into(),
            trace: trace.into(),
            variant: variant.into(),
            core: "all".into(),
            axis: String::new(),
            axis_value: String::new(),
            stats,
            dram_delta: None,
            weighted_speedup: None,
            config: serde_json::Value::Null,
        }
    }

    /// Column names in export order.
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["run", "trace", "variant", "core", "axis", "axis_value"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(counter_columns());
        h.extend(
            [
                "ipc",
                "mpki_l1d",
                "mpki_l2",
                "mpki_llc",
                "dram_reads",
                "dram_transactions",
                "ppki_issued_l1d",
                "ppki_filled_l1d",
                "ppki_issued_l2",
                "ppki_filled_l2",
                "prefetch_accuracy_l1d",
                "prefetch_accuracy_l2",
                "dram_delta",
                "weighted_speedup",
                "config",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h
    }

    pub fn values(&self) -> Vec<String> {
        let s = &self.stats;
        let mut v = vec![
            self.run.clone(),
            self.trace.clone(),
            self.variant.clone(),
            self.core.clone(),
            self.axis.clone(),
            self.axis_value.clone(),
        ];
        v.extend(counter_values(s).into_iter().map(|x| x.to_string()));
        let inst = s.instructions;
        v.push(opt(s.ipc()));
        v.push(opt(s.level_mpki(Level::L1d)));
        v.push(opt(s.level_mpki(Level::L2)));
        v.push(opt(s.level_mpki(Level::Llc)));
        v.push(s.dram.reads().to_string());
        v.push(s.dram.transactions().to_string());
        v.push(opt(per_kilo(s.l1d_prefetch.issued, inst)));
        v.push(opt(per_kilo(s.l1d_prefetch.filled, inst)));
        v.push(opt(per_kilo(s.l2_prefetch.issued, inst)));
        v.push(opt(per_kilo(s.l2_prefetch.filled, inst)));
        v.push(opt(prefetch_accuracy(s, PrefetchLevel::L1d)));
        v.push(opt(prefetch_accuracy(s, PrefetchLevel::L2)));
        v.push(self.dram_delta.map(fmt_f64).unwrap_or_default());
        v.push(self.weighted_speedup.map(fmt_f64).unwrap_or_default());
        v.push(if self.config.is_null() {
            String::new()
        } else {
            self.config.to_string()
        });
        v
    }
}

fn counter_columns() -> Vec<String> {
    let mut c: Vec<String> = [
        "instructions",
        "memory_ops",
        "loads",
        "stores",
        "cycles",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in &LEVEL_NAMES[..3] {
        for f in ["accesses", "hits", "misses"] {
            c.push(format!("{l}_{f}"));
        }
    }
    for l in LEVEL_NAMES {
        c.push(format!("served_{l}"));
    }
    for f in [
        "dram_demand_reads",
        "dram_prefetch_reads",
        "dram_speculative_reads",
        "dram_merged",
        "dram_writebacks",
        "dram_queue_delay",
        "spec_issued",
        "spec_issued_at_core",
        "spec_issued_at_l1d_miss",
    ] {
        c.push(f.to_string());
    }
    for l in LEVEL_NAMES {
        c.push(format!("spec_loc_{l}"));
    }
    for f in ["consulted", "high", "delayed", "onchip", "true_offchip", "missed_offchip"] {
        c.push(format!("pred_{f}"));
    }
    for p in ["pf_l1d", "pf_l2"] {
        for f in ["emitted", "dropped", "issued", "filled", "useful", "useless"] {
            c.push(format!("{p}_{f}"));
        }
        for f in ["filled", "useful", "useless"] {
            for l in LEVEL_NAMES {
                c.push(format!("{p}_{f}_{l}"));
            }
        }
    }
    c.push("load_latency".into());
    c.push("mshr_stall_cycles".into());
    c
}

fn counter_values(s: &SimStats) -> Vec<u64> {
    let mut v = vec![s.instructions, s.memory_ops, s.loads, s.stores, s.cycles];
    for l in [&s.l1d, &s.l2, &s.llc] {
        v.extend([l.accesses, l.hits, l.misses]);
    }
    v.extend(s.served);
    let d = &s.dram;
    v.extend([
        d.demand_reads,
        d.prefetch_reads,
        d.speculative_reads,
        d.merged,
        d.writebacks,
        d.queue_delay,
    ]);
    let sp = &s.speculation;
    v.extend([sp.issued, sp.issued_at_core, sp.issued_at_l1d_miss]);
    v.extend(sp.location);
    let p = &s.prediction;
    v.extend([p.consulted, p.high, p.delayed, p.onchip, p.true_offchip, p.missed_offchip]);
    for pf in [&s.l1d_prefetch, &s.l2_prefetch] {
        v.extend([pf.emitted, pf.dropped, pf.issued, pf.filled, pf.useful, pf.useless]);
        v.extend(pf.filled_from);
        v.extend(pf.useful_from);
        v.extend(pf.useless_from);
    }
    v.push(s.load_latency);
    v.push(s.mshr_stall_cycles);
    v
}

fn counters_from(values: &[u64]) -> SimStats {
    let mut it = values.iter().copied();
    let mut n = || it.next().expect("column count checked by caller");
    let mut s = SimStats {
        instructions: n(),
        memory_ops: n(),
        loads: n(),
        stores: n(),
        cycles: n(),
        ..Default::default()
    };
    for l in [&mut s.l1d, &mut s.l2, &mut s.llc] {
        *l = LevelStats {
            accesses: n(),
            hits: n(),
            misses: n(),
        };
    }
    s.served = [n(), n(), n(), n()];
    s.dram = DramCounters {
        demand_reads: n(),
        prefetch_reads: n(),
        speculative_reads: n(),
        merged: n(),
        writebacks: n(),
        queue_delay: n(),
    };
    s.speculation.issued = n();
    s.speculation.issued_at_core = n();
    s.speculation.issued_at_l1d_miss = n();
    s.speculation.location = [n(), n(), n(), n()];
    s.prediction = PredictionStats {
        consulted: n(),
        high: n(),
        delayed: n(),
        onchip: n(),
        true_offchip: n(),
        missed_offchip: n(),
    };
    for pf in [&mut s.l1d_prefetch, &mut s.l2_prefetch] {
        pf.emitted = n();
        pf.dropped = n();
        pf.issued = n();
        pf.filled = n();
        pf.useful = n();
        pf.useless = n();
        pf.filled_from = [n(), n(), n(), n()];
        pf.useful_from = [n(), n(), n(), n()];
        pf.useless_from = [n(), n(), n(), n()];
    }
    s.load_latency = n();
    s.mshr_stall_cycles = n();
    s
}

/// Sums the counters of several runs; `cycles` becomes the longest run's.
pub fn merge_stats(parts: &[SimStats]) -> SimStats {
    let mut acc = vec![0u64; counter_columns().len()];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(counter_values(p)) {
            *a += v;
        }
    }
    let mut s = counters_from(&acc);
    s.cycles = parts.iter().map(|p| p.cycles).max().unwrap_or(0);
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_csv(rows: &[StatsRow]) -> Result<String, ExportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| ExportError::Parse(e.to_string());
    w.write_record(StatsRow::header()).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.values()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ExportError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<StatsRow>, ExportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| ExportError::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = StatsRow::header();
    if header != expected {
        let missing: Vec<&str> = expected.iter().filter(|c| !header.contains(c)).map(String::as_str).collect();
        let extra: Vec<&str> = header.iter().filter(|c| !expected.contains(c)).map(String::as_str).collect();
        return Err(ExportError::Parse(if missing.is_empty() && extra.is_empty() {
            "csv columns are out of order".into()
        } else {
            format!("csv header: missing [{}], unexpected [{}]", missing.join(", "), extra.join(", "))
        }));
    }
    let ncounters = counter_columns().len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ExportError::Parse(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let counters: Vec<u64> = (6..6 + ncounters)
            .map(|i| {
                field(i)
                    .parse::<u64>()
                    .map_err(|e| ExportError::Parse(format!("column {}: {e}", header[i])))
            })
            .collect::<Result<_, _>>()?;
        let parse_opt = |name: &str| -> Result<Option<f64>, ExportError> {
            let i = header.iter().position(|h| h == name).expect("known column");
            let s = field(i);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| ExportError::Parse(format!("column {name}: {e}")))
            }
        };
        let cfg = field(header.len() - 1);
        rows.push(StatsRow {
            run: field(0),
            trace: field(1),
            variant: field(2),
            core: field(3),
            axis: field(4),
            axis_value: field(5),
            stats: counters_from(&counters),
            dram_delta: parse_opt("dram_delta")?,
            weighted_speedup: parse_opt("weighted_speedup")?,
            config: if cfg.is_empty() {
                serde_json::Value::Null
            } else {
                serde_json::from_str(&cfg)?
            },
        });
    }
    Ok(rows)
}

pub fn to_json(rows: &[StatsRow]) -> Result<String, ExportError> {
    let mut s = serde_json::to_string_pretty(rows)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<Vec<StatsRow>, ExportError> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub fn export(rows: &[StatsRow], format: ExportFormat, path: &Path) -> Result<(), ExportError> {
    let text = match format {
        ExportFormat::Csv => to_csv(rows)?,
        ExportFormat::Json => to_json(rows)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn import(path: &Path) -> Result<Vec<StatsRow>, ExportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => from_json(&text),
        _ => from_csv(&text),
    }
}
