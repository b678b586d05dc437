//! Hashed-perceptron engine shared by the load and prefetch predictors.

use serde::{Deserialize, Serialize};

pub const WEIGHT_MIN: i8 = -16;
pub const WEIGHT_MAX: i8 = 15;
pub const WEIGHT_BITS: u64 = 5;

/// Width of the two offset-indexed tables.
pub const OFFSET_TABLE_BITS: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    PcXorCacheLineOffset,
    PcXorByteOffset,
    PcPlusFirstAccess,
    CacheLineOffsetPlusFirstAccess,
    Last4LoadPcs,
    FlpPredPlusCacheLineOffset,
}

impl FeatureKind {
    pub const FLP: [FeatureKind; 5] = [
        FeatureKind::PcXorCacheLineOffset,
        FeatureKind::PcXorByteOffset,
        FeatureKind::PcPlusFirstAccess,
        FeatureKind::CacheLineOffsetPlusFirstAccess,
        FeatureKind::Last4LoadPcs,
    ];

    pub const SLP: [FeatureKind; 6] = [
        FeatureKind::PcXorCacheLineOffset,
        FeatureKind::PcXorByteOffset,
        FeatureKind::PcPlusFirstAccess,
        FeatureKind::CacheLineOffsetPlusFirstAccess,
        FeatureKind::Last4LoadPcs,
        FeatureKind::FlpPredPlusCacheLineOffset,
    ];

    /// Tables whose index is the raw 7-bit input rather than a hash.
    pub fn fixed_bits(self) -> Option<u32> {
        match self {
            FeatureKind::CacheLineOffsetPlusFirstAccess
            | FeatureKind::FlpPredPlusCacheLineOffset => Some(OFFSET_TABLE_BITS),
            _ => None,
        }
    }
}

/// Inputs of one prediction. `pc` is whatever PC value the predictor hashes
/// (the controllers pass the 32-bit hashed PC they keep in metadata).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeatureContext {
    pub pc: u64,
    pub addr: u64,
    pub first_access: bool,
    /// Most recent first.
    pub last4_pcs: [u64; 4],
    pub flp_pred: bool,
}

impl FeatureContext {
    /// Address bits 6..11.
    pub fn cacheline_offset(&self) -> u64 {
        (self.addr >> 6) & 0x3f
    }

    /// Address bits 0..5.
    pub fn byte_offset(&self) -> u64 {
        self.addr & 0x3f
    }

    pub fn last4_mix(&self) -> u64 {
        let [p1, p2, p3, p4] = self.last4_pcs;
        p1 ^ p2.rotate_left(1) ^ p3.rotate_left(2) ^ p4.rotate_left(3)
    }
}

/// XOR-folds `v` into `bits` bits.
pub fn fold_hash(mut v: u64, bits: u32) -> u64 {
    debug_assert!((1..=63).contains(&bits));
    let mask = (1u64 << bits) - 1;
    let mut acc = 0;
    while v != 0 {
        acc ^= v & mask;
        v >>= bits;
    }
    acc
}

pub fn feature_index(kind: FeatureKind, ctx: &FeatureContext, table_bits: u32) -> usize {
    let mask = (1u64 << table_bits) - 1;
    let first = ctx.first_access as u64;
    let idx = match kind {
        FeatureKind::PcXorCacheLineOffset => fold_hash(ctx.pc, table_bits) ^ ctx.cacheline_offset(),
        FeatureKind::PcXorByteOffset => fold_hash(ctx.pc, table_bits) ^ ctx.byte_offset(),
        FeatureKind::PcPlusFirstAccess => fold_hash((ctx.pc << 1) | first, table_bits),
        FeatureKind::CacheLineOffsetPlusFirstAccess => (ctx.cacheline_offset() << 1) | first,
        FeatureKind::Last4LoadPcs => fold_hash(ctx.last4_mix(), table_bits),
        FeatureKind::FlpPredPlusCacheLineOffset => ((ctx.flp_pred as u64) << 6) | ctx.cacheline_offset(),
    };
    (idx & mask) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightTable {
    weights: Vec<i8>,
    bits: u32,
}

impl WeightTable {
    pub fn new(bits: u32) -> Self {
        WeightTable {
            weights: vec![0; 1 << bits],
            bits,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, i: usize) -> i8 {
        self.weights[i]
    }

    pub fn set(&mut self, i: usize, w: i8) {
        self.weights[i] = w.clamp(WEIGHT_MIN, WEIGHT_MAX);
    }

    pub fn nudge(&mut self, i: usize, delta: i8) {
        self.weights[i] = self.weights[i].saturating_add(delta).clamp(WEIGHT_MIN, WEIGHT_MAX);
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn storage_bits(&self) -> u64 {
        self.weights.len() as u64 * WEIGHT_BITS
    }
}

/// Per-feature table sizes (log2 entries).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableBits {
    pub pc_xor_cacheline_offset: u32,
    pub pc_xor_byte_offset: u32,
    pub pc_first_access: u32,
    pub cacheline_offset_first_access: u32,
    pub last4_load_pcs: u32,
    pub flp_pred_cacheline_offset: u32,
}

impl Default for TableBits {
    fn default() -> Self {
        TableBits {
            pc_xor_cacheline_offset: 10,
            pc_xor_byte_offset: 10,
            pc_first_access: 10,
            cacheline_offset_first_access: OFFSET_TABLE_BITS,
            last4_load_pcs: 10,
            flp_pred_cacheline_offset: OFFSET_TABLE_BITS,
        }
    }
}

impl TableBits {
    pub fn bits(&self, kind: FeatureKind) -> u32 {
        match kind {
            FeatureKind::PcXorCacheLineOffset => self.pc_xor_cacheline_offset,
            FeatureKind::PcXorByteOffset => self.pc_xor_byte_offset,
            FeatureKind::PcPlusFirstAccess => self.pc_first_access,
            FeatureKind::CacheLineOffsetPlusFirstAccess => self.cacheline_offset_first_access,
            FeatureKind::Last4LoadPcs => self.last4_load_pcs,
            FeatureKind::FlpPredPlusCacheLineOffset => self.flp_pred_cacheline_offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptronConfig {
    pub table_bits: TableBits,
    /// Training margin of the FLP.
    pub theta_train: i32,
    /// Training margin of the SLP. Stored confidences are clamped to
    /// [-16, 15], so 16 or more makes the SLP train on every completion.
    pub theta_train_slp: i32,
    pub tau_high: i32,
    pub tau_low: i32,
    pub tau_pref: i32,
}

impl Default for PerceptronConfig {
    fn default() -> Self {
        PerceptronConfig {
            table_bits: TableBits::default(),
            theta_train: 14,
            theta_train_slp: 16,
            tau_high: 16,
            tau_low: -12,
            tau_pref: 16,
        }
    }
}

impl PerceptronConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for kind in FeatureKind::SLP {
            let b = self.table_bits.bits(kind);
            match kind.fixed_bits() {
                Some(fixed) if b != fixed => {
                    errs.push(format!("table_bits for {kind:?} must be {fixed}, got {b}"))
                }
                None if !(6..=20).contains(&b) => {
                    errs.push(format!("table_bits for {kind:?} must be within 6..=20, got {b}"))
                }
                _ => {}
            }
        }
        if self.tau_low > self.tau_high {
            errs.push(format!(
                "tau_low ({}) exceeds tau_high ({})",
                self.tau_low, self.tau_high
            ));
        }
        let flp_range = 16 * FeatureKind::FLP.len() as i32;
        let slp_range = 16 * FeatureKind::SLP.len() as i32;
        for (name, v, range) in [
            ("tau_high", self.tau_high, flp_range),
            ("tau_low", self.tau_low, flp_range),
            ("tau_pref", self.tau_pref, slp_range),
        ] {
            if v.abs() > range {
                errs.push(format!("{name} = {v} is outside the reachable sum range ±{range}"));
            }
        }
        if self.theta_train < 0 {
            errs.push("theta_train must be non-negative".into());
        }
        if self.theta_train_slp < 0 {
            errs.push("theta_train_slp must be non-negative".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlpDecision {
    HighOffChip,
    DelayedOffChip,
    OnChip,
}

impl FlpDecision {
    pub fn is_offchip(self) -> bool {
        self != FlpDecision::OnChip
    }
}

pub fn classify_flp(conf: i32, tau_high: i32, tau_low: i32) -> FlpDecision {
    if conf > tau_high {
        FlpDecision::HighOffChip
    } else if conf >= tau_low {
        FlpDecision::DelayedOffChip
    } else {
        FlpDecision::OnChip
    }
}

/// One weight table per feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perceptron {
    features: Vec<FeatureKind>,
    tables: Vec<WeightTable>,
}

impl Perceptron {
    pub fn new(features: &[FeatureKind], bits: &TableBits) -> Self {
        Perceptron {
            features: features.to_vec(),
            tables: features.iter().map(|k| WeightTable::new(bits.bits(*k))).collect(),
        }
    }

    pub fn features(&self) -> &[FeatureKind] {
        &self.features
    }

    pub fn tables(&self) -> &[WeightTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [WeightTable] {
        &mut self.tables
    }

    fn indices<'a>(&'a self, ctx: &'a FeatureContext) -> impl Iterator<Item = usize> + 'a {
        self.features
            .iter()
            .zip(&self.tables)
            .map(move |(k, t)| feature_index(*k, ctx, t.bits()))
    }

    pub fn predict_sum(&self, ctx: &FeatureContext) -> i32 {
        self.indices(ctx)
            .zip(&self.tables)
            .map(|(i, t)| t.get(i) as i32)
            .sum()
    }

    /// Trains toward `went_offchip` when the prediction had the wrong sign
    /// or its magnitude was within `theta`.
    pub fn train(&mut self, ctx: &FeatureContext, went_offchip: bool, conf_at_predict: i32, theta: i32) {
        let wrong = if went_offchip {
            conf_at_predict <= 0
        } else {
            conf_at_predict >= 0
        };
        if !wrong && conf_at_predict.abs() > theta {
            return;
        }
        let delta = if went_offchip { 1 } else { -1 };
        let idx: Vec<usize> = self.indices(ctx).collect();
        for (t, i) in self.tables.iter_mut().zip(idx) {
            t.nudge(i, delta);
        }
    }

    pub fn storage_bits(&self) -> u64 {
        self.tables.iter().map(WeightTable::storage_bits).sum()
    }

    pub fn max_sum(&self) -> i32 {
        WEIGHT_MAX as i32 * self.tables.len() as i32
    }

    pub fn min_sum(&self) -> i32 {
        WEIGHT_MIN as i32 * self.tables.len() as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal XOR-fold: the value is cut into b-bit slices and the slices XORed.
    fn fold_by_slices(v: u64, b: u32) -> u64 {
        let mut acc = 0;
        let mut shift = 0;
        while shift < 64 {
            acc ^= (v >> shift) & ((1u64 << b) - 1);
            shift += b;
        }
        acc
    }

    #[test]
    fn fold_hash_examples() {
        assert_eq!(fold_hash(0, 7), 0);
        assert_eq!(fold_hash(0x5A, 7), 0x5A);
        // slices 1 and 64
        assert_eq!(fold_by_slices((1 << 13) | 1, 7), 65);
        assert_eq!(fold_hash((1 << 13) | 1, 7), 65);
    }

    #[test]
    fn fixed_feature_indices() {
        let ctx = FeatureContext {
            addr: 5 << 6,
            first_access: true,
            ..Default::default()
        };
        assert_eq!(feature_index(FeatureKind::CacheLineOffsetPlusFirstAccess, &ctx, 7), 11);
        let ctx = FeatureContext {
            addr: 0,
            flp_pred: true,
            ..Default::default()
        };
        assert_eq!(feature_index(FeatureKind::FlpPredPlusCacheLineOffset, &ctx, 7), 64);
        for k in 0..64u64 {
            let ctx = FeatureContext {
                pc: 0,
                addr: k << 6,
                ..Default::default()
            };
            assert_eq!(feature_index(FeatureKind::PcXorCacheLineOffset, &ctx, 10), k as usize);
        }
    }

    #[test]
    fn default_tables_match_budget() {
        let flp = Perceptron::new(&FeatureKind::FLP, &TableBits::default());
        let slp = Perceptron::new(&FeatureKind::SLP, &TableBits::default());
        assert_eq!(flp.tables().iter().map(|t| t.len()).sum::<usize>(), 4224);
        assert_eq!(flp.storage_bits(), 4224 * 5);
        assert_eq!(slp.storage_bits() - flp.storage_bits(), 128 * 5);
    }

    #[test]
    fn sums_and_saturation() {
        let ctx = FeatureContext {
            pc: 0x1234,
            addr: 0xdead_beef,
            last4_pcs: [1, 2, 3, 4],
            ..Default::default()
        };
        let mut p = Perceptron::new(&FeatureKind::FLP, &TableBits::default());
        assert_eq!(p.predict_sum(&ctx), 0);
        p.train(&ctx, true, 0, 14);
        assert_eq!(p.predict_sum(&ctx), 5);
        for _ in 0..40 {
            p.train(&ctx, true, 0, 14);
        }
        assert_eq!(p.predict_sum(&ctx), 75);
    }

    #[test]
    fn training_rule() {
        let ctx = FeatureContext {
            pc: 77,
            addr: 4096 + 128,
            ..Default::default()
        };
        let mut p = Perceptron::new(&FeatureKind::FLP, &TableBits::default());
        p.train(&ctx, true, 5, 14);
        assert_eq!(p.predict_sum(&ctx), 5);
        let before = p.clone();
        p.train(&ctx, true, 40, 14);
        assert_eq!(p, before, "confident and correct: no update");
        p.train(&ctx, false, 40, 14);
        assert_eq!(p.predict_sum(&ctx), 0, "confident but wrong: update");
    }

    #[test]
    fn classify_bands() {
        assert_eq!(classify_flp(20, 8, 0), FlpDecision::HighOffChip);
        assert_eq!(classify_flp(4, 8, 0), FlpDecision::DelayedOffChip);
        assert_eq!(classify_flp(8, 8, 0), FlpDecision::DelayedOffChip);
        assert_eq!(classify_flp(0, 8, 0), FlpDecision::DelayedOffChip);
        assert_eq!(classify_flp(-3, 8, 0), FlpDecision::OnChip);
    }

    #[test]
    fn config_validation() {
        assert!(PerceptronConfig::default().validate().is_empty());
        let bad = PerceptronConfig {
            tau_low: 9,
            tau_high: 8,
            tau_pref: 200,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 2);
        let bits = TableBits {
            cacheline_offset_first_access: 8,
            ..TableBits::default()
        };
        let bad = PerceptronConfig {
            table_bits: bits,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 1);
    }

    proptest! {
        #[test]
        fn fold_hash_matches_slices(v in any::<u64>(), b in 1u32..=63) {
            let h = fold_hash(v, b);
            prop_assert!(h < (1u64 << b));
            prop_assert_eq!(h, fold_by_slices(v, b));
        }

        #[test]
        fn weights_stay_bounded(events in prop::collection::vec((any::<u64>(), any::<u64>(), any::<bool>(), -80i32..80), 1..400)) {
            let mut p = Perceptron::new(&FeatureKind::SLP, &TableBits::default());
            for (pc, addr, out, conf) in events {
                let ctx = FeatureContext { pc: pc % 7, addr: addr % 8192, first_access: pc & 1 == 1, last4_pcs: [pc % 3, 0, 0, 0], flp_pred: out };
                p.train(&ctx, out, conf, 14);
                for t in p.tables() {
                    prop_assert!(t.weights().iter().all(|w| (WEIGHT_MIN..=WEIGHT_MAX).contains(w)));
                }
                let s = p.predict_sum(&ctx);
                prop_assert!(s >= p.min_sum() && s <= p.max_sum());
            }
        }

        #[test]
        fn classify_is_shift_invariant(conf in -100i32..100, lo in -50i32..50, width in 0i32..40, k in -30i32..30) {
            let hi = lo + width;
            prop_assert_eq!(classify_flp(conf, hi, lo), classify_flp(conf + k, hi + k, lo + k));
        }

        #[test]
        fn feature_index_is_pure(pc in any::<u64>(), addr in any::<u64>(), f in any::<bool>(), l in any::<[u64; 4]>()) {
            let ctx = FeatureContext { pc, addr, first_access: f, last4_pcs: l, flp_pred: f };
            for k in FeatureKind::SLP {
                let bits = TableBits::default().bits(k);
                let i = feature_index(k, &ctx, bits);
                prop_assert!(i < 1 << bits);
                prop_assert_eq!(i, feature_index(k, &ctx.clone(), bits));
            }
        }
    }
}
