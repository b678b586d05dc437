//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero when any of them fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tlp_core::engine::{simulate, simulate_multicore, SimConfig};
use tlp_core::memhier::{Cache, CacheGeometry, Lookup};
use tlp_core::memhier::Level;
use tlp_core::offchip::{ConsumeAt, Flp, StorageReport};
use tlp_core::perceptron::PerceptronConfig;
use tlp_core::prefetch::PrefetchLevel;
use tlp_core::stats::{self, dram_delta, prefetch_accuracy, weighted_speedup, SimStats, StatsRow};
use tlp_core::trace::{generate, Pattern, SyntheticSpec, TraceRecord, LINE_BYTES};
use tlp_core::VariantName;

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, pass, detail }
}

// ---------------------------------------------------------------------------
// Workloads

const RECORDS: u64 = 100_000;
const FAMILY_SEEDS: [u64; 4] = [1, 2, 3, 4];

/// The pointer-chase mix used by A3, A5, A8 and (per core) A4.
fn chase_spec(seed: u64) -> SyntheticSpec {
    let parts = vec![(1, Pattern::PointerChase { footprint: 128 << 20, exponent: 1.5 })];
    SyntheticSpec::new(Pattern::Mixed { parts }, RECORDS, seed)
        .with_gap(24)
        .with_stores(10)
}

/// Stream regions interleaved with uniform-random node visits over 1 GB.
fn filter_spec() -> SyntheticSpec {
    let parts = vec![
        (1, Pattern::Stream),
        (1, Pattern::PointerChase { footprint: 1 << 30, exponent: 0.0 }),
    ];
    SyntheticSpec::new(Pattern::Mixed { parts }, RECORDS, 7).with_gap(16)
}

fn gen(spec: &SyntheticSpec) -> Vec<TraceRecord> {
    generate(spec).expect("workload spec is valid")
}

fn run(trace: &[TraceRecord], cfg: &SimConfig, v: VariantName) -> SimStats {
    simulate(trace, &cfg.with_variant(v)).expect("simulation succeeds")
}

// ---------------------------------------------------------------------------
// Simulation-backed experiments, gathered so A9 can rerun them verbatim.

struct Experiments {
    /// family[seed index][variant index in VariantName::ALL]
    family: Vec<Vec<SimStats>>,
    filter: BTreeMap<&'static str, SimStats>,
    /// (GB/s, baseline, hermes, tlp)
    bandwidth: Vec<(f64, SimStats, SimStats, SimStats)>,
    /// Per variant: mix stats, plus the solo stats shared by all variants.
    multicore: Vec<(VariantName, Vec<SimStats>)>,
    solo: Vec<SimStats>,
}

const BANDWIDTHS: [f64; 5] = [1.6, 3.2, 6.4, 12.8, 25.6];
const MC_VARIANTS: [VariantName; 3] = [VariantName::Baseline, VariantName::Hermes, VariantName::Tlp];

fn experiments() -> Experiments {
    let cfg = SimConfig::default();
    let family = FAMILY_SEEDS
        .par_iter()
        .map(|&seed| {
            let t = gen(&chase_spec(seed));
            VariantName::ALL.par_iter().map(|&v| run(&t, &cfg, v)).collect()
        })
        .collect();

    let ft = gen(&filter_spec());
    let filter = [("baseline", VariantName::Baseline), ("tlp", VariantName::Tlp)]
        .par_iter()
        .map(|&(k, v)| (k, run(&ft, &cfg, v)))
        .collect();

    let bt = gen(&chase_spec(FAMILY_SEEDS[0]));
    let bandwidth = BANDWIDTHS
        .par_iter()
        .map(|&bw| {
            let mut c = cfg;
            c.dram.gbps_per_core = bw;
            (
                bw,
                run(&bt, &c, VariantName::Baseline),
                run(&bt, &c, VariantName::Hermes),
                run(&bt, &c, VariantName::Tlp),
            )
        })
        .collect();

    let mut mc_cfg = cfg;
    mc_cfg.dram.gbps_per_core = 3.2;
    let traces: Vec<Vec<TraceRecord>> = (0..4).map(|i| gen(&chase_spec(11 + i))).collect();
    let solo = traces
        .par_iter()
        .map(|t| run(t, &mc_cfg, VariantName::Baseline))
        .collect();
    let multicore = MC_VARIANTS
        .par_iter()
        .map(|&v| {
            let m = simulate_multicore(&traces, &mc_cfg.with_variant(v)).expect("multicore run");
            (v, m.cores)
        })
        .collect();

    Experiments { family, filter, bandwidth, multicore, solo }
}

/// Every stats row the experiments produce, in a fixed order.
fn rows(e: &Experiments) -> Vec<StatsRow> {
    let mut out = Vec::new();
    for (seed, per_variant) in FAMILY_SEEDS.iter().zip(&e.family) {
        for (v, s) in VariantName::ALL.iter().zip(per_variant) {
            out.push(StatsRow::new("family", format!("chase-{seed}"), v.as_str(), *s));
        }
    }
    for (k, s) in &e.filter {
        out.push(StatsRow::new("filter", "stream+uniform", *k, *s));
    }
    for (bw, b, h, t) in &e.bandwidth {
        for (name, s) in [("baseline", b), ("hermes", h), ("tlp", t)] {
            let mut r = StatsRow::new("bandwidth", "chase-1", name, *s);
            r.axis = "dram_bw".into();
            r.axis_value = format!("{bw}");
            out.push(r);
        }
    }
    for (v, cores) in &e.multicore {
        for (i, s) in cores.iter().enumerate() {
            let mut r = StatsRow::new("multicore", format!("chase-{}", 11 + i), v.as_str(), *s);
            r.core = i.to_string();
            out.push(r);
        }
    }
    out
}

fn variant_index(v: VariantName) -> usize {
    VariantName::ALL.iter().position(|&x| x == v).unwrap()
}

fn family_sum(e: &Experiments, v: VariantName) -> SimStats {
    let i = variant_index(v);
    let parts: Vec<SimStats> = e.family.iter().map(|r| r[i]).collect();
    stats::merge_stats(&parts)
}

fn family_mean_cycles(e: &Experiments, v: VariantName) -> f64 {
    let i = variant_index(v);
    e.family.iter().map(|r| r[i].cycles as f64).sum::<f64>() / e.family.len() as f64
}

// ---------------------------------------------------------------------------
// A1: cache against a brute-force LRU model

struct RefLru {
    ways: usize,
    /// Per set, most recent first.
    sets: Vec<Vec<u64>>,
}

impl RefLru {
    /// Returns (hit, evicted line).
    fn access(&mut self, line: u64) -> (bool, Option<u64>) {
        let n = self.sets.len() as u64;
        let set = &mut self.sets[(line % n) as usize];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            set.remove(pos);
            set.insert(0, line);
            return (true, None);
        }
        set.insert(0, line);
        let evicted = if set.len() > self.ways { set.pop() } else { None };
        (false, evicted)
    }
}

fn a1() -> Verdict {
    let start = Instant::now();
    let mut mismatch = None;
    'outer: for (sets, ways) in [(2usize, 2usize), (4, 8)] {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cache = Cache::new(CacheGeometry::new((sets * ways) as u64 * LINE_BYTES, ways, 1, 1));
            let mut reference = RefLru { ways, sets: vec![Vec::new(); sets] };
            let universe = (sets * ways * 3) as u64;
            for op in 0..10_000 {
                let line = rng.random_range(0..universe);
                let paddr = line * LINE_BYTES + rng.random_range(0..LINE_BYTES);
                let (want_hit, want_evict) = reference.access(line);
                let got_hit = matches!(cache.lookup(paddr, 0), Lookup::Hit(_));
                let got_evict = if got_hit { None } else { cache.fill(paddr, false).map(|e| e.line) };
                let set = (line % sets as u64) as usize;
                if got_hit != want_hit || got_evict != want_evict || cache.set_contents(set) != reference.sets[set] {
                    mismatch = Some(format!("{sets}x{ways} seed {seed} op {op} line {line}"));
                    break 'outer;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    match mismatch {
        Some(m) => verdict("A1", false, format!("cache diverged from reference at {m}")),
        None => verdict(
            "A1",
            secs < 10.0,
            format!("2x2 and 4x8 caches match reference LRU over 2x100 seeds x 10^4 ops ({secs:.2}s, limit 10s)"),
        ),
    }
}

// ---------------------------------------------------------------------------
// A2: FLP learns a PC-determined outcome

fn a2() -> Verdict {
    let start = Instant::now();
    let mut flp = Flp::new(&PerceptronConfig::default(), ConsumeAt::Selective);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pcs: Vec<u64> = (0..64).map(|k| 0x40_0000 + 0x40 * k).collect();
    let offchip = |pc: u64| ((pc - 0x40_0000) / 0x40).is_multiple_of(3);
    let mut last4 = [0u64; 4];
    let mut bounded = true;
    let mut correct = 0;
    const TRAIN: usize = 10_000;
    const EVAL: usize = 2_000;
    for i in 0..TRAIN + EVAL {
        let pc = pcs[rng.random_range(0..pcs.len())];
        let vaddr = rng.random_range(0..1u64 << 32);
        let out = flp.on_load(pc, vaddr, &last4, i as u64);
        let truth = offchip(pc);
        if i >= TRAIN && out.decision.is_offchip() == truth {
            correct += 1;
        }
        let served = if truth { Level::Dram } else { Level::L1d };
        flp.on_complete(&out.metadata, vaddr, served);
        bounded &= flp
            .perceptron()
            .tables()
            .iter()
            .all(|t| t.weights().iter().all(|&w| (-16..=15).contains(&w)));
        last4 = [pc, last4[0], last4[1], last4[2]];
    }
    let acc = correct as f64 / EVAL as f64;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "A2",
        acc >= 0.95 && bounded && secs < 5.0,
        format!(
            "accuracy {:.1}% after {TRAIN} training events (need >= 95%), weights bounded: {bounded} ({secs:.2}s)",
            acc * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// A3: DRAM traffic direction and speculative-read dominance

fn a3(e: &Experiments) -> Verdict {
    let base = family_sum(e, VariantName::Baseline);
    let hermes = family_sum(e, VariantName::Hermes);
    let tlp = family_sum(e, VariantName::Tlp);
    let mpki = e
        .family
        .iter()
        .map(|r| r[variant_index(VariantName::Baseline)].level_mpki(Level::Llc).unwrap())
        .fold(f64::INFINITY, f64::min);
    let dh = dram_delta(&hermes, &base).unwrap();
    let dt = dram_delta(&tlp, &base).unwrap();
    let ratio = tlp.speculation.issued as f64 / hermes.speculation.issued as f64;
    let per_trace_ok = e.family.iter().all(|r| {
        let b = &r[variant_index(VariantName::Baseline)];
        let h = &r[variant_index(VariantName::Hermes)];
        let t = &r[variant_index(VariantName::Tlp)];
        dram_delta(h, b).unwrap() > 0.0
            && dram_delta(t, b).unwrap() < 0.0
            && t.speculation.issued < h.speculation.issued
    });
    verdict(
        "A3",
        mpki > 1.0 && dh > 0.0 && dt < 0.0 && ratio <= 0.7 && per_trace_ok,
        format!(
            "LLC MPKI >= {mpki:.2}; dram_delta hermes {dh:+.3}, tlp {dt:+.3}; speculative reads tlp/hermes = {} / {} = {ratio:.3} (need <= 0.7); every trace agrees: {per_trace_ok}",
            tlp.speculation.issued, hermes.speculation.issued
        ),
    )
}

// ---------------------------------------------------------------------------
// A5: ablation ordering

/// Relative gap below which two mean cycle counts are treated as tied.
const TIE: f64 = 0.001;

fn a5(e: &Experiments) -> Verdict {
    let m = |v| family_mean_cycles(e, v);
    let (b, h, tsp, d, s, t) = (
        m(VariantName::Baseline),
        m(VariantName::Hermes),
        m(VariantName::Tsp),
        m(VariantName::DelayedTsp),
        m(VariantName::SelectiveTsp),
        m(VariantName::Tlp),
    );
    let chain = [("baseline", b), ("hermes", h), ("tsp", tsp), ("delayed/selective", d.min(s)), ("tlp", t)];
    let mut ties = 0;
    let mut broken = Vec::new();
    for w in chain.windows(2) {
        let ((na, a), (nb, bb)) = (w[0], w[1]);
        if (a - bb).abs() <= TIE * a {
            ties += 1;
        } else if a < bb {
            broken.push(format!("{na} < {nb}"));
        }
    }
    let cycles_ok = broken.is_empty() && ties <= 1;

    // Required chain: SelectiveTSP <= DelayedTSP <= core consumption (TSP).
    let mut issue_ok = true;
    let mut counts = Vec::new();
    for r in &e.family {
        let c = |v| r[variant_index(v)].speculation.issued;
        let (sel, del, core) = (c(VariantName::SelectiveTsp), c(VariantName::DelayedTsp), c(VariantName::Tsp));
        issue_ok &= sel <= del && del <= core;
        counts.push(format!("{sel}/{del}/{core}"));
    }
    verdict(
        "A5",
        cycles_ok && issue_ok,
        format!(
            "mean cycles baseline {b:.0} >= hermes {h:.0} >= tsp {tsp:.0} >= delayed {d:.0} / selective {s:.0} >= tlp {t:.0} \
             ({ties} tie(s), violations: {broken:?}); speculative issues selective <= delayed <= core on every trace: {issue_ok} \
             (selective/delayed/core per trace: {})",
            counts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// A4: multicore weighted speedup

fn a4(e: &Experiments) -> Verdict {
    let solo: Vec<f64> = e.solo.iter().map(|s| s.ipc().unwrap()).collect();
    let ipcs = |v: VariantName| -> Vec<f64> {
        let (_, cores) = e.multicore.iter().find(|(x, _)| *x == v).unwrap();
        cores.iter().map(|s| s.ipc().unwrap()).collect()
    };
    let base = ipcs(VariantName::Baseline);
    let ws = |v| weighted_speedup(&ipcs(v), &solo, &base, &solo).unwrap();
    let (wb, wh, wt) = (ws(VariantName::Baseline), ws(VariantName::Hermes), ws(VariantName::Tlp));
    verdict(
        "A4",
        wt > wh && wh > wb && (wb - 1.0).abs() < 1e-12,
        format!("weighted speedup at 4 cores x 3.2 GB/s: tlp {wt:.4} > hermes {wh:.4} > baseline {wb:.4}"),
    )
}

// ---------------------------------------------------------------------------
// A6: storage budget

fn a6() -> Verdict {
    let r = StorageReport::for_config(&PerceptronConfig::default());
    let kib = StorageReport::kib;
    let close = |got: f64, want: f64| (got - want).abs() <= 0.01 * want;
    let checks = [
        ("flp tables", kib(r.flp_tables), 2.58),
        ("slp tables", kib(r.slp_tables), 2.66),
        ("flp page buffer", kib(r.flp_page_buffer), 0.625),
        ("slp page buffer", kib(r.slp_page_buffer), 0.625),
    ];
    let total = kib(r.total_bits());
    let ok = checks.iter().all(|&(_, g, w)| close(g, w)) && total <= 7.0;
    let detail = checks
        .iter()
        .map(|(n, g, w)| format!("{n} {g:.3} KB (want {w})"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict("A6", ok, format!("{detail}; total {total:.3} KB (limit 7)"))
}

// ---------------------------------------------------------------------------
// A7: prefetch filter

fn a7(e: &Experiments) -> Verdict {
    let base = &e.filter["baseline"];
    let tlp = &e.filter["tlp"];
    let acc_b = prefetch_accuracy(base, PrefetchLevel::L1d).unwrap();
    let acc_t = prefetch_accuracy(tlp, PrefetchLevel::L1d).unwrap();
    let useful_b = base.l1d_prefetch.useful as f64;
    let useful_t = tlp.l1d_prefetch.useful as f64;
    let drop = 1.0 - useful_t / useful_b;
    verdict(
        "A7",
        acc_t >= acc_b + 0.10 && drop < 0.20,
        format!(
            "L1D prefetch accuracy {:.1}% -> {:.1}% (need +10 points); useful prefetches {} -> {} ({:+.1}%, need drop < 20%)",
            acc_b * 100.0,
            acc_t * 100.0,
            base.l1d_prefetch.useful,
            tlp.l1d_prefetch.useful,
            -drop * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// A8: bandwidth sensitivity

fn a8(e: &Experiments) -> Verdict {
    let adv: Vec<i64> = e
        .bandwidth
        .iter()
        .map(|(_, _, h, t)| h.cycles as i64 - t.cycles as i64)
        .collect();
    let non_increasing = adv.windows(2).all(|w| w[0] >= w[1]);
    let largest_first = adv.iter().all(|&a| a <= adv[0]);
    let shown = BANDWIDTHS
        .iter()
        .zip(&adv)
        .map(|(bw, a)| format!("{bw} GB/s: {a}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "A8",
        non_increasing && largest_first && adv[0] > 0,
        format!("hermes - tlp cycles per bandwidth: {shown}"),
    )
}

// ---------------------------------------------------------------------------
// A9: determinism

fn a9(first: &Experiments) -> Verdict {
    let second = experiments();
    let (r1, r2) = (rows(first), rows(&second));
    let csv_same = stats::to_csv(&r1).unwrap() == stats::to_csv(&r2).unwrap();
    let json_same = stats::to_json(&r1).unwrap() == stats::to_json(&r2).unwrap();
    verdict(
        "A9",
        csv_same && json_same,
        format!("{} stats rows rerun: csv identical {csv_same}, json identical {json_same}", r1.len()),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut verdicts = vec![a1(), a2()];
    let e = experiments();
    verdicts.push(a3(&e));
    verdicts.push(a4(&e));
    verdicts.push(a5(&e));
    verdicts.push(a6());
    verdicts.push(a7(&e));
    verdicts.push(a8(&e));
    verdicts.push(a9(&e));

    for v in &verdicts {
        println!("{} {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1}s",
        verdicts.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
