//! Load-side (FLP) and prefetch-side (SLP) off-chip predictors, the request
//! metadata they keep for training, and the predictor variant matrix.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::memhier::Level;
use crate::perceptron::{
    classify_flp, fold_hash, FeatureContext, FeatureKind, FlpDecision, Perceptron, PerceptronConfig,
    WEIGHT_MAX, WEIGHT_MIN,
};
use crate::prefetch::PrefetchRequest;

/// Cycles between a predictor decision and the speculative request leaving.
pub const PREDICTOR_LATENCY: u64 = 6;
pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_BUFFER_ENTRIES: usize = 128;
pub const PAGE_TAG_BITS: u64 = 40;
/// Load-queue entries carrying FLP metadata.
pub const LOAD_QUEUE_ENTRIES: u64 = 72;
/// L1D MSHR entries carrying SLP metadata.
pub const L1D_MSHR_ENTRIES: u64 = 10;

/// Training payload kept with an in-flight request.
///
/// 32-bit hashed PC, 10-bit last-4-PC hash, first-access bit and 5-bit
/// confidence (48 bits in the load queue); MSHR entries add the prediction
/// bit (49 bits).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMetadata {
    pub hashed_pc: u32,
    pub last4_hash: u16,
    pub first_access: bool,
    pub confidence: i8,
    pub prediction: Option<bool>,
}

impl RequestMetadata {
    pub const LOAD_QUEUE_BITS: u64 = 32 + 10 + 1 + 5;
    pub const MSHR_BITS: u64 = Self::LOAD_QUEUE_BITS + 1;

    pub fn new(pc: u64, last4_pcs: &[u64; 4], first_access: bool, last4_bits: u32) -> Self {
        let mix = FeatureContext {
            last4_pcs: *last4_pcs,
            ..Default::default()
        }
        .last4_mix();
        RequestMetadata {
            hashed_pc: fold_hash(pc, 32) as u32,
            last4_hash: fold_hash(mix, last4_bits) as u16,
            first_access,
            confidence: 0,
            prediction: None,
        }
    }

    /// Feature inputs replayed from the stored fields. The last-4 hash sits
    /// in the first history slot; folding it again is the identity.
    pub fn context(&self, addr: u64) -> FeatureContext {
        FeatureContext {
            pc: self.hashed_pc as u64,
            addr,
            first_access: self.first_access,
            last4_pcs: [self.last4_hash as u64, 0, 0, 0],
            flp_pred: self.prediction.unwrap_or(false),
        }
    }

    pub fn bits(&self) -> u64 {
        if self.prediction.is_some() {
            Self::MSHR_BITS
        } else {
            Self::LOAD_QUEUE_BITS
        }
    }
}

pub fn clamp_confidence(conf: i32) -> i8 {
    conf.clamp(WEIGHT_MIN as i32, WEIGHT_MAX as i32) as i8
}

/// FIFO of recently first-touched page tags.
#[derive(Debug, Clone)]
pub struct PageBuffer {
    pages: VecDeque<u64>,
    capacity: usize,
}

impl Default for PageBuffer {
    fn default() -> Self {
        Self::new(PAGE_BUFFER_ENTRIES)
    }
}

impl PageBuffer {
    pub fn new(capacity: usize) -> Self {
        PageBuffer {
            pages: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn contains(&self, page: u64) -> bool {
        self.pages.contains(&page)
    }

    /// Returns the first-access bit: true when `page` was not buffered, in
    /// which case it is inserted (evicting the oldest tag when full).
    pub fn check_and_insert(&mut self, page: u64) -> bool {
        if self.contains(page) {
            return false;
        }
        if self.pages.len() == self.capacity {
            self.pages.pop_front();
        }
        self.pages.push_back(page);
        true
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn storage_bits(&self) -> u64 {
        self.capacity as u64 * PAGE_TAG_BITS
    }
}

/// When FLP predictions are acted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsumeAt {
    /// Every off-chip prediction issues from the core alongside the L1D lookup.
    Core,
    /// Every off-chip prediction waits for an L1D miss.
    L1dMiss,
    /// High-confidence predictions issue from the core, the rest wait for an
    /// L1D miss.
    Selective,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictorVariant {
    pub consume_at: ConsumeAt,
    pub slp_enabled: bool,
    pub slp_leveling_feature: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Baseline,
    Hermes,
    Flp,
    Slp,
    Tsp,
    DelayedTsp,
    SelectiveTsp,
    Tlp,
}

impl VariantName {
    pub const ALL: [VariantName; 8] = [
        VariantName::Baseline,
        VariantName::Hermes,
        VariantName::Flp,
        VariantName::Slp,
        VariantName::Tsp,
        VariantName::DelayedTsp,
        VariantName::SelectiveTsp,
        VariantName::Tlp,
    ];

    pub fn variant(self) -> PredictorVariant {
        let (consume_at, slp_enabled, slp_leveling_feature) = match self {
            VariantName::Baseline => (ConsumeAt::Never, false, false),
            VariantName::Hermes | VariantName::Flp => (ConsumeAt::Core, false, false),
            VariantName::Slp => (ConsumeAt::Never, true, false),
            VariantName::Tsp => (ConsumeAt::Core, true, false),
            VariantName::DelayedTsp => (ConsumeAt::L1dMiss, true, false),
            VariantName::SelectiveTsp => (ConsumeAt::Selective, true, false),
            VariantName::Tlp => (ConsumeAt::Selective, true, true),
        };
        PredictorVariant {
            consume_at,
            slp_enabled,
            slp_leveling_feature,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Baseline => "baseline",
            VariantName::Hermes => "hermes",
            VariantName::Flp => "flp",
            VariantName::Slp => "slp",
            VariantName::Tsp => "tsp",
            VariantName::DelayedTsp => "delayed_tsp",
            VariantName::SelectiveTsp => "selective_tsp",
            VariantName::Tlp => "tlp",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown variant `{s}` (expected one of: {})",
                    VariantName::ALL.map(|v| v.as_str()).join(", ")
                )
            })
    }
}

/// Result of consulting the FLP for one load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlpOutcome {
    pub decision: FlpDecision,
    pub confidence: i32,
    pub metadata: RequestMetadata,
    /// Cycle at which a speculative DRAM read leaves the core.
    pub speculate_at: Option<u64>,
    /// Issue a speculative read if the L1D lookup misses.
    pub flagged: bool,
}

/// Core-side off-chip predictor over virtual addresses.
#[derive(Debug, Clone)]
pub struct Flp {
    perceptron: Perceptron,
    pages: PageBuffer,
    cfg: PerceptronConfig,
    consume_at: ConsumeAt,
}

impl Flp {
    pub fn new(cfg: &PerceptronConfig, consume_at: ConsumeAt) -> Self {
        Flp {
            perceptron: Perceptron::new(&FeatureKind::FLP, &cfg.table_bits),
            pages: PageBuffer::default(),
            cfg: *cfg,
            consume_at,
        }
    }

    pub fn perceptron(&self) -> &Perceptron {
        &self.perceptron
    }

    pub fn page_buffer(&self) -> &PageBuffer {
        &self.pages
    }

    pub fn consume_at(&self) -> ConsumeAt {
        self.consume_at
    }

    pub fn on_load(&mut self, pc: u64, vaddr: u64, last4_pcs: &[u64; 4], now: u64) -> FlpOutcome {
        let first = self.pages.check_and_insert(vaddr >> PAGE_SHIFT);
        let mut metadata = RequestMetadata::new(pc, last4_pcs, first, self.cfg.table_bits.last4_load_pcs);
        let confidence = self.perceptron.predict_sum(&metadata.context(vaddr));
        let decision = classify_flp(confidence, self.cfg.tau_high, self.cfg.tau_low);
        metadata.confidence = clamp_confidence(confidence);
        metadata.prediction = Some(decision.is_offchip());
        let now_issue = Some(now + PREDICTOR_LATENCY);
        let (speculate_at, flagged) = match (self.consume_at, decision) {
            (_, FlpDecision::OnChip) | (ConsumeAt::Never, _) => (None, false),
            (ConsumeAt::Core, _) => (now_issue, false),
            (ConsumeAt::L1dMiss, _) => (None, true),
            (ConsumeAt::Selective, FlpDecision::HighOffChip) => (now_issue, false),
            (ConsumeAt::Selective, FlpDecision::DelayedOffChip) => (None, true),
        };
        FlpOutcome {
            decision,
            confidence,
            metadata,
            speculate_at,
            flagged,
        }
    }

    /// Speculative issue time for a flagged load that missed the L1D at `now`.
    pub fn on_l1d_miss(&self, flagged: bool, now: u64) -> Option<u64> {
        flagged.then_some(now + PREDICTOR_LATENCY)
    }

    pub fn on_complete(&mut self, metadata: &RequestMetadata, vaddr: u64, served: Level) {
        self.perceptron.train(
            &metadata.context(vaddr),
            served == Level::Dram,
            metadata.confidence as i32,
            self.cfg.theta_train,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlpDecision {
    Issue,
    Drop,
}

/// L1D-side prefetch filter over physical addresses.
#[derive(Debug, Clone)]
pub struct Slp {
    perceptron: Perceptron,
    pages: PageBuffer,
    cfg: PerceptronConfig,
    enabled: bool,
    leveling: bool,
}

impl Slp {
    pub fn new(cfg: &PerceptronConfig, variant: &PredictorVariant) -> Self {
        let features: &[FeatureKind] = if variant.slp_leveling_feature {
            &FeatureKind::SLP
        } else {
            &FeatureKind::FLP
        };
        Slp {
            perceptron: Perceptron::new(features, &cfg.table_bits),
            pages: PageBuffer::default(),
            cfg: *cfg,
            enabled: variant.slp_enabled,
            leveling: variant.slp_leveling_feature,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn perceptron(&self) -> &Perceptron {
        &self.perceptron
    }

    pub fn page_buffer(&self) -> &PageBuffer {
        &self.pages
    }

    /// Decides whether an L1D prefetch to `target_paddr` goes ahead.
    /// `flp_tag` is the off-chip tag of the triggering load.
    pub fn filter(&mut self, req: &PrefetchRequest, target_paddr: u64, flp_tag: bool) -> (SlpDecision, RequestMetadata) {
        if !self.enabled {
            return (SlpDecision::Issue, req.metadata);
        }
        let first = self.pages.check_and_insert(target_paddr >> PAGE_SHIFT);
        let mut metadata = RequestMetadata {
            hashed_pc: req.metadata.hashed_pc,
            last4_hash: req.metadata.last4_hash,
            first_access: first,
            confidence: 0,
            prediction: Some(self.leveling && flp_tag),
        };
        let conf = self.perceptron.predict_sum(&metadata.context(target_paddr));
        metadata.confidence = clamp_confidence(conf);
        let decision = if conf >= self.cfg.tau_pref {
            SlpDecision::Drop
        } else {
            SlpDecision::Issue
        };
        (decision, metadata)
    }

    pub fn on_prefetch_fill(&mut self, metadata: &RequestMetadata, target_paddr: u64, served: Level) {
        if !self.enabled {
            return;
        }
        self.perceptron.train(
            &metadata.context(target_paddr),
            served == Level::Dram,
            metadata.confidence as i32,
            self.cfg.theta_train_slp,
        );
    }
}

/// Per-core storage of the full two-level predictor, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub flp_tables: u64,
    pub flp_page_buffer: u64,
    pub slp_tables: u64,
    pub slp_page_buffer: u64,
    pub load_queue_metadata: u64,
    pub mshr_metadata: u64,
}

impl StorageReport {
    pub fn for_config(cfg: &PerceptronConfig) -> Self {
        let tlp = VariantName::Tlp.variant();
        let flp = Flp::new(cfg, tlp.consume_at);
        let slp = Slp::new(cfg, &tlp);
        StorageReport {
            flp_tables: flp.perceptron().storage_bits(),
            flp_page_buffer: flp.page_buffer().storage_bits(),
            slp_tables: slp.perceptron().storage_bits(),
            slp_page_buffer: slp.page_buffer().storage_bits(),
            load_queue_metadata: LOAD_QUEUE_ENTRIES * RequestMetadata::LOAD_QUEUE_BITS,
            mshr_metadata: L1D_MSHR_ENTRIES * RequestMetadata::MSHR_BITS,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.flp_tables
            + self.flp_page_buffer
            + self.slp_tables
            + self.slp_page_buffer
            + self.load_queue_metadata
            + self.mshr_metadata
    }

    pub fn kib(bits: u64) -> f64 {
        bits as f64 / 8.0 / 1024.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptron::TableBits;
    use crate::prefetch::PrefetchLevel;

    // Round thresholds that make the rule examples easy to read.
    fn cfg() -> PerceptronConfig {
        PerceptronConfig {
            tau_high: 8,
            tau_low: 0,
            tau_pref: 8,
            ..PerceptronConfig::default()
        }
    }

    fn force_sum(p: &mut Perceptron, ctx: &FeatureContext, target: i32) {
        let idx: Vec<usize> = p
            .features()
            .iter()
            .zip(p.tables())
            .map(|(k, t)| crate::perceptron::feature_index(*k, ctx, t.bits()))
            .collect();
        let n = idx.len() as i32;
        for (j, (t, i)) in p.tables_mut().iter_mut().zip(idx).enumerate() {
            let share = target.div_euclid(n) + if (j as i32) < target.rem_euclid(n) { 1 } else { 0 };
            t.set(i, share as i8);
        }
    }

    fn primed_flp(consume: ConsumeAt, conf: i32, pc: u64, vaddr: u64) -> Flp {
        let mut flp = Flp::new(&cfg(), consume);
        // the first lookup of the page is a first access
        let meta = RequestMetadata::new(pc, &[0; 4], true, 10);
        force_sum(&mut flp.perceptron, &meta.context(vaddr), conf);
        flp
    }

    #[test]
    fn metadata_widths() {
        assert_eq!(RequestMetadata::LOAD_QUEUE_BITS, 48);
        assert_eq!(RequestMetadata::MSHR_BITS, 49);
        let m = RequestMetadata::new(u64::MAX, &[u64::MAX; 4], true, 10);
        assert!(m.last4_hash < 1024);
        assert_eq!(m.bits(), 48);
    }

    #[test]
    fn replayed_context_indexes_like_live_history() {
        let pcs = [0x401234, 0x40abcd, 0x400010, 0x4ffff0];
        let meta = RequestMetadata::new(0x400abc, &pcs, false, 10);
        let live = FeatureContext {
            pc: meta.hashed_pc as u64,
            addr: 0x1234,
            last4_pcs: pcs,
            ..Default::default()
        };
        let replay = meta.context(0x1234);
        for k in FeatureKind::FLP {
            let b = TableBits::default().bits(k);
            assert_eq!(
                crate::perceptron::feature_index(k, &live, b),
                crate::perceptron::feature_index(k, &replay, b)
            );
        }
    }

    #[test]
    fn page_buffer_fifo() {
        let mut pb = PageBuffer::new(2);
        assert!(pb.check_and_insert(1));
        assert!(!pb.check_and_insert(1));
        assert!(pb.check_and_insert(2));
        assert!(pb.check_and_insert(3));
        assert!(!pb.contains(1));
        assert!(pb.check_and_insert(1));
        assert_eq!(pb.len(), 2);
        assert_eq!(PageBuffer::default().storage_bits(), 128 * 40);
    }

    #[test]
    fn high_confidence_speculates_after_predictor_latency() {
        let mut flp = primed_flp(ConsumeAt::Selective, 20, 0x400100, 0x8000);
        let out = flp.on_load(0x400100, 0x8000, &[0; 4], 100);
        assert_eq!(out.decision, FlpDecision::HighOffChip);
        assert_eq!(out.speculate_at, Some(106));
        assert!(!out.flagged);
    }

    #[test]
    fn band_confidence_flags_instead() {
        let mut flp = primed_flp(ConsumeAt::Selective, 4, 0x400100, 0x8000);
        let out = flp.on_load(0x400100, 0x8000, &[0; 4], 100);
        assert_eq!(out.decision, FlpDecision::DelayedOffChip);
        assert_eq!(out.speculate_at, None);
        assert!(out.flagged);
        assert_eq!(flp.on_l1d_miss(out.flagged, 104), Some(110));
        assert_eq!(flp.on_l1d_miss(false, 104), None);
    }

    #[test]
    fn core_consumption_has_no_band() {
        let mut flp = primed_flp(ConsumeAt::Core, 4, 0x400100, 0x8000);
        let out = flp.on_load(0x400100, 0x8000, &[0; 4], 0);
        assert_eq!(out.speculate_at, Some(6));
        assert!(!out.flagged);
    }

    #[test]
    fn low_confidence_does_nothing() {
        for c in [ConsumeAt::Core, ConsumeAt::L1dMiss, ConsumeAt::Selective] {
            let mut flp = primed_flp(c, -3, 0x400100, 0x8000);
            let out = flp.on_load(0x400100, 0x8000, &[0; 4], 0);
            assert_eq!(out.decision, FlpDecision::OnChip);
            assert_eq!(out.speculate_at, None);
            assert!(!out.flagged);
        }
    }

    #[test]
    fn training_direction_follows_served_level() {
        let mut flp = Flp::new(&cfg(), ConsumeAt::Selective);
        let out = flp.on_load(0x400100, 0x8000, &[0; 4], 0);
        let ctx = out.metadata.context(0x8000);
        flp.on_complete(&out.metadata, 0x8000, Level::Dram);
        assert_eq!(flp.perceptron().predict_sum(&ctx), 5);
        let mut flp2 = Flp::new(&cfg(), ConsumeAt::Selective);
        let out2 = flp2.on_load(0x400100, 0x8000, &[0; 4], 0);
        flp2.on_complete(&out2.metadata, 0x8000, Level::L1d);
        assert_eq!(flp2.perceptron().predict_sum(&ctx), -5);
    }

    #[test]
    fn identical_completions_give_identical_tables() {
        let mut a = Flp::new(&cfg(), ConsumeAt::Core);
        let mut b = Flp::new(&cfg(), ConsumeAt::Core);
        let meta = RequestMetadata::new(0x400200, &[1, 2, 3, 4], true, 10);
        for f in [&mut a, &mut b] {
            f.on_complete(&meta, 0x9040, Level::Dram);
            f.on_complete(&meta, 0x9040, Level::Llc);
        }
        assert_eq!(a.perceptron(), b.perceptron());
    }

    fn preq() -> PrefetchRequest {
        PrefetchRequest {
            trigger_pc: 0x400300,
            trigger_vaddr: 0x10000,
            target_vaddr: 0x10040,
            level: PrefetchLevel::L1d,
            metadata: RequestMetadata::new(0x400300, &[0; 4], false, 10),
        }
    }

    #[test]
    fn slp_drops_at_or_above_threshold() {
        let tlp = VariantName::Tlp.variant();
        let mut slp = Slp::new(&cfg(), &tlp);
        let req = preq();
        let mut meta = req.metadata;
        meta.first_access = true;
        meta.prediction = Some(true);
        force_sum(&mut slp.perceptron, &meta.context(0x5040), 8);
        assert_eq!(slp.filter(&req, 0x5040, true).0, SlpDecision::Drop);
        // same page again: no longer a first access, different context, zero sum
        assert_eq!(slp.filter(&req, 0x5040, true).0, SlpDecision::Issue);
    }

    #[test]
    fn slp_issues_below_threshold() {
        let mut slp = Slp::new(&cfg(), &VariantName::Tsp.variant());
        let req = preq();
        let mut meta = req.metadata;
        meta.first_access = true;
        meta.prediction = Some(false);
        force_sum(&mut slp.perceptron, &meta.context(0x5040), 7);
        assert_eq!(slp.filter(&req, 0x5040, true).0, SlpDecision::Issue);
    }

    #[test]
    fn disabled_slp_always_issues_and_never_trains() {
        let mut slp = Slp::new(&cfg(), &VariantName::Hermes.variant());
        for _ in 0..10 {
            let (d, m) = slp.filter(&preq(), 0x5040, true);
            assert_eq!(d, SlpDecision::Issue);
            slp.on_prefetch_fill(&m, 0x5040, Level::Dram);
        }
        assert!(slp.perceptron().tables().iter().all(|t| t.weights().iter().all(|w| *w == 0)));
    }

    #[test]
    fn slp_training_direction() {
        let tlp = VariantName::Tlp.variant();
        let mut slp = Slp::new(&cfg(), &tlp);
        let (_, m) = slp.filter(&preq(), 0x5040, false);
        slp.on_prefetch_fill(&m, 0x5040, Level::Dram);
        assert_eq!(slp.perceptron().predict_sum(&m.context(0x5040)), 6);
        slp.on_prefetch_fill(&m, 0x5040, Level::L2);
        slp.on_prefetch_fill(&m, 0x5040, Level::L2);
        assert_eq!(slp.perceptron().predict_sum(&m.context(0x5040)), -6);
    }

    #[test]
    fn leveling_feature_only_in_tlp() {
        assert_eq!(Slp::new(&cfg(), &VariantName::Tlp.variant()).perceptron().features().len(), 6);
        assert_eq!(Slp::new(&cfg(), &VariantName::SelectiveTsp.variant()).perceptron().features().len(), 5);
    }

    #[test]
    fn variant_matrix() {
        use ConsumeAt::*;
        let expect = [
            ("baseline", Never, false, false),
            ("hermes", Core, false, false),
            ("flp", Core, false, false),
            ("slp", Never, true, false),
            ("tsp", Core, true, false),
            ("delayed_tsp", L1dMiss, true, false),
            ("selective_tsp", Selective, true, false),
            ("tlp", Selective, true, true),
        ];
        for (name, c, s, l) in expect {
            let v: VariantName = name.parse().unwrap();
            assert_eq!(v.to_string(), name);
            assert_eq!(
                v.variant(),
                PredictorVariant {
                    consume_at: c,
                    slp_enabled: s,
                    slp_leveling_feature: l
                }
            );
        }
        assert!("ppf".parse::<VariantName>().is_err());
    }

    #[test]
    fn storage_of_default_config() {
        let r = StorageReport::for_config(&cfg());
        assert_eq!(r.flp_tables, 4224 * 5);
        assert_eq!(r.slp_tables, 4352 * 5);
        assert_eq!(r.flp_page_buffer, 5120);
        assert_eq!(r.load_queue_metadata, 72 * 48);
        assert_eq!(r.mshr_metadata, 490);
    }
}
