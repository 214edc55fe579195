//! Seeded generator of procurement ledgers with planted fraud patterns.
//!
//! Every fraud archetype perturbs exactly one aspect of an otherwise clean
//! record, and clean records never trip any archetype's rule, so with no
//! label noise the fraud type is a deterministic function of the eight
//! feature columns. Label noise is then injected at a known rate, which
//! makes the best achievable accuracy computable in closed form
//! ([`bayes_accuracy`]).
//!
//! Clean records:
//!
//! | column | distribution |
//! |--------|--------------|
//! | PSN    | `PSN_BASE + row index` |
//! | PGN    | uniform over the non-offender groups `1..=pgn_pool - offenders` |
//! | PON    | uniform `1..=pon_pool` |
//! | MGN    | uniform `1..=mgn_pool` |
//! | NP     | log-uniform in `[m/1.5, 1.5·m]`, `m = 10 + 2·MGN` (material median), cents |
//! | PA     | log-uniform in `[1, 200]`, whole units |
//! | PTP    | `NP · PA`, cents |
//! | SSN    | uniform over the non-blacklisted suppliers `1..=ssn_pool - blacklisted` |
//!
//! Archetypes (type id, what changes, detection rule):
//!
//! 1. blacklisted supplier: SSN drawn from the top `blacklist_fraction` of
//!    the supplier pool; rule `SSN > ssn_pool - blacklisted`.
//! 2. inflated price: NP log-uniform in `[2.5·m, 4·m]`; rule `NP > 2·m`.
//! 3. bulk order at thin unit margin: PA uniform in `[600, 1000]`, NP at or
//!    below the material median; rule `PA > 400`.
//! 4. total mismatch: PTP = `NP · PA + s`, a fictitious surcharge `s`
//!    uniform in `[1.25·T, 2.5·T]` where `T` is the largest total a clean
//!    record can have; rule `PTP > 1.25 · NP · PA`.
//! 5. repeat-offender group: PGN drawn from the top `blacklist_fraction` of
//!    the group pool; rule `PGN > pgn_pool - offenders`.
//!
//! Label noise with rate `ε` flips exactly `round(ε·F)` fraud labels to clean
//! and `round(ε·C)` clean labels to a uniformly random fraud type, where `F`
//! and `C` are the planted fraud and clean counts.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMode, ProcurementRecord};
use crate::error::{Error, Result};

pub const PSN_BASE: u64 = 4_500_000_000;
pub const MAX_FRAUD_TYPES: u32 = 5;

const CLEAN_PRICE_SPREAD: f64 = 1.5;
const CLEAN_AMOUNT_MAX: f64 = 200.0;
const INFLATION: (f64, f64) = (2.5, 4.0);
const INFLATION_RULE: f64 = 2.0;
const BULK_AMOUNT: (u32, u32) = (600, 1000);
const BULK_AMOUNT_RULE: f64 = 400.0;
const SURCHARGE: (f64, f64) = (1.25, 2.5);
const MISMATCH_RULE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPools {
    pub pgn: u64,
    pub pon: u64,
    pub mgn: u64,
    pub ssn: u64,
}

impl Default for IdPools {
    fn default() -> Self {
        IdPools {
            pgn: 40,
            pon: 20,
            mgn: 50,
            ssn: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub fraud_ratio: f64,
    pub k_fraud: u32,
    pub label_noise: f64,
    pub seed: u64,
    pub id_pools: IdPools,
    /// Share of the supplier pool that is blacklisted, and of the group pool
    /// that is repeat-offending.
    pub blacklist_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 50_000,
            fraud_ratio: 0.5,
            k_fraud: MAX_FRAUD_TYPES,
            label_noise: 0.0,
            seed: 0,
            id_pools: IdPools::default(),
            blacklist_fraction: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.fraud_ratio > 0.0 && self.fraud_ratio < 1.0) {
            return bad(format!("fraud ratio must be in (0, 1), got {}", self.fraud_ratio));
        }
        if !(1..=MAX_FRAUD_TYPES).contains(&self.k_fraud) {
            return bad(format!(
                "k_fraud must be in 1..={MAX_FRAUD_TYPES}, got {}",
                self.k_fraud
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise must be in [0, 0.5), got {}", self.label_noise));
        }
        let p = self.id_pools;
        if p.pon == 0 || p.mgn == 0 {
            return bad("id pools must be non-empty".into());
        }
        if !(self.blacklist_fraction > 0.0 && self.blacklist_fraction < 1.0) {
            return bad(format!(
                "blacklist fraction must be in (0, 1), got {}",
                self.blacklist_fraction
            ));
        }
        for (name, pool) in [("ssn", p.ssn), ("pgn", p.pgn)] {
            if self.flagged_ids(pool) >= pool {
                return bad(format!("{name} pool of {pool} leaves no clean ids"));
            }
        }
        Ok(())
    }

    /// Number of ids at the top of a pool reserved for fraud.
    fn flagged_ids(&self, pool: u64) -> u64 {
        ((pool as f64 * self.blacklist_fraction).round() as u64).max(1)
    }

    /// Highest supplier id that is not blacklisted.
    pub fn last_clean_ssn(&self) -> u64 {
        self.id_pools.ssn - self.flagged_ids(self.id_pools.ssn)
    }

    /// Highest procurement group that is not a repeat offender.
    pub fn last_clean_pgn(&self) -> u64 {
        self.id_pools.pgn - self.flagged_ids(self.id_pools.pgn)
    }

    pub fn fraud_count(&self) -> usize {
        (self.n as f64 * self.fraud_ratio).round() as usize
    }

    /// Flips in each direction: (fraud → clean, clean → fraud).
    pub fn noise_flips(&self) -> (usize, usize) {
        let fraud = self.fraud_count();
        let clean = self.n - fraud;
        (
            (fraud as f64 * self.label_noise).round() as usize,
            (clean as f64 * self.label_noise).round() as usize,
        )
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected. Keys: n, fraud_ratio, k_fraud, label_noise, seed, pgn_pool,
    /// pon_pool, mgn_pool, ssn_pool, blacklist_fraction.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = || Error::Argument(format!("line {}: bad value for {key}: {value}", lineno + 1));
            match key {
                "n" => cfg.n = value.parse().map_err(|_| err())?,
                "fraud_ratio" => cfg.fraud_ratio = value.parse().map_err(|_| err())?,
                "k_fraud" => cfg.k_fraud = value.parse().map_err(|_| err())?,
                "label_noise" => cfg.label_noise = value.parse().map_err(|_| err())?,
                "seed" => cfg.seed = value.parse().map_err(|_| err())?,
                "pgn_pool" => cfg.id_pools.pgn = value.parse().map_err(|_| err())?,
                "pon_pool" => cfg.id_pools.pon = value.parse().map_err(|_| err())?,
                "mgn_pool" => cfg.id_pools.mgn = value.parse().map_err(|_| err())?,
                "ssn_pool" => cfg.id_pools.ssn = value.parse().map_err(|_| err())?,
                "blacklist_fraction" => {
                    cfg.blacklist_fraction = value.parse().map_err(|_| err())?
                }
                _ => {
                    return Err(Error::Argument(format!(
                        "line {}: unknown key `{key}`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }
}

/// Median unit price of a material group.
pub fn material_median(mgn: u64) -> f64 {
    10.0 + 2.0 * mgn as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FraudArchetype {
    BlacklistedSupplier = 1,
    InflatedPrice = 2,
    BulkThinMargin = 3,
    TotalMismatch = 4,
    RepeatOffenderGroup = 5,
}

impl FraudArchetype {
    pub const ALL: [FraudArchetype; 5] = [
        FraudArchetype::BlacklistedSupplier,
        FraudArchetype::InflatedPrice,
        FraudArchetype::BulkThinMargin,
        FraudArchetype::TotalMismatch,
        FraudArchetype::RepeatOffenderGroup,
    ];

    pub fn from_type(ft: u32) -> Option<Self> {
        Self::ALL.get((ft as usize).checked_sub(1)?).copied()
    }

    pub fn type_id(self) -> u32 {
        self as u32
    }

    pub fn description(self) -> &'static str {
        match self {
            FraudArchetype::BlacklistedSupplier => "supplier from the blacklisted pool (SSN)",
            FraudArchetype::InflatedPrice => "net price over twice the material-group median (NP, MGN)",
            FraudArchetype::BulkThinMargin => "very large purchase amount at a thin unit margin (PA)",
            FraudArchetype::TotalMismatch => "total price disagrees with price times amount (PTP)",
            FraudArchetype::RepeatOffenderGroup => "procurement group from the repeat-offender pool (PGN)",
        }
    }

    /// Whether `r`'s features carry this archetype's planted signal.
    pub fn detect(self, r: &ProcurementRecord, cfg: &GeneratorConfig) -> bool {
        match self {
            FraudArchetype::BlacklistedSupplier => r.ssn > cfg.last_clean_ssn(),
            FraudArchetype::InflatedPrice => r.np > INFLATION_RULE * material_median(r.mgn),
            FraudArchetype::BulkThinMargin => r.pa > BULK_AMOUNT_RULE,
            FraudArchetype::TotalMismatch => r.ptp > MISMATCH_RULE * r.np * r.pa,
            FraudArchetype::RepeatOffenderGroup => r.pgn > cfg.last_clean_pgn(),
        }
    }
}

/// Fraud type implied by a record's features alone (0 when clean).
pub fn rule_label(r: &ProcurementRecord, cfg: &GeneratorConfig) -> u32 {
    FraudArchetype::ALL[..cfg.k_fraud as usize]
        .iter()
        .find(|a| a.detect(r, cfg))
        .map_or(0, |a| a.type_id())
}

/// Largest total price a clean record can carry.
pub fn clean_total_ceiling(cfg: &GeneratorConfig) -> f64 {
    CLEAN_PRICE_SPREAD * material_median(cfg.id_pools.mgn) * CLEAN_AMOUNT_MAX
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..=hi.ln()).exp()
}

fn planted_record(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, row: usize, ft: u32) -> ProcurementRecord {
    let pools = cfg.id_pools;
    let mgn = rng.gen_range(1..=pools.mgn);
    let median = material_median(mgn);
    let mut r = ProcurementRecord {
        psn: PSN_BASE + row as u64,
        pgn: rng.gen_range(1..=cfg.last_clean_pgn()),
        pon: rng.gen_range(1..=pools.pon),
        mgn,
        np: cents(log_uniform(rng, median / CLEAN_PRICE_SPREAD, median * CLEAN_PRICE_SPREAD)),
        pa: log_uniform(rng, 1.0, CLEAN_AMOUNT_MAX).round(),
        ptp: 0.0,
        ft,
        ssn: rng.gen_range(1..=cfg.last_clean_ssn()),
    };
    let mut surcharge = 0.0;
    match FraudArchetype::from_type(ft) {
        None => {}
        Some(FraudArchetype::BlacklistedSupplier) => {
            r.ssn = rng.gen_range(cfg.last_clean_ssn() + 1..=pools.ssn);
        }
        Some(FraudArchetype::InflatedPrice) => {
            r.np = cents(median * log_uniform(rng, INFLATION.0, INFLATION.1));
        }
        Some(FraudArchetype::BulkThinMargin) => {
            r.pa = f64::from(rng.gen_range(BULK_AMOUNT.0..=BULK_AMOUNT.1));
            r.np = cents(log_uniform(rng, median / CLEAN_PRICE_SPREAD, median));
        }
        Some(FraudArchetype::TotalMismatch) => {
            surcharge = clean_total_ceiling(cfg) * rng.gen_range(SURCHARGE.0..=SURCHARGE.1);
        }
        Some(FraudArchetype::RepeatOffenderGroup) => {
            r.pgn = rng.gen_range(cfg.last_clean_pgn() + 1..=pools.pgn);
        }
    }
    r.ptp = cents(r.np * r.pa + surcharge);
    r
}

/// Generates a labeled ledger. Deterministic in `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fraud = cfg.fraud_count();
    let mut planted: Vec<u32> = (0..fraud)
        .map(|_| rng.gen_range(1..=cfg.k_fraud))
        .chain(std::iter::repeat(0).take(cfg.n - fraud))
        .collect();
    planted.shuffle(&mut rng);

    let mut records: Vec<ProcurementRecord> = planted
        .iter()
        .enumerate()
        .map(|(row, &ft)| planted_record(&mut rng, cfg, row, ft))
        .collect();

    let (to_clean, to_fraud) = cfg.noise_flips();
    if to_clean + to_fraud > 0 {
        let (fraud_rows, clean_rows): (Vec<usize>, Vec<usize>) =
            (0..records.len()).partition(|&i| records[i].is_fraud());
        for j in index::sample(&mut rng, fraud_rows.len(), to_clean) {
            records[fraud_rows[j]].ft = 0;
        }
        for j in index::sample(&mut rng, clean_rows.len(), to_fraud) {
            records[clean_rows[j]].ft = rng.gen_range(1..=cfg.k_fraud);
        }
    }
    Ok(Dataset::new(records))
}

/// Best achievable expected accuracy on data from `cfg` for `task`.
///
/// Labels are a deterministic function of the features except for the
/// flipped records. For the binary task every flip is an irreducible error,
/// so the ceiling is `1 - (flips)/n`, which is `1 - ε` up to rounding. The
/// multiclass task sees the fraud-labeled subset: the `F - f` unflipped
/// fraud records are fully predictable, while the `c` clean records flipped
/// to a random type are right only by chance (`1/k`), giving
/// `(F - f + c/k) / (F - f + c)`; at a 1:1 ratio this is `1 - ε·(k-1)/k`.
pub fn bayes_accuracy(cfg: &GeneratorConfig, task: LabelMode) -> f64 {
    let fraud = cfg.fraud_count() as f64;
    let (to_clean, to_fraud) = cfg.noise_flips();
    let (to_clean, to_fraud) = (to_clean as f64, to_fraud as f64);
    match task {
        LabelMode::Binary | LabelMode::MulticlassWithClean => {
            1.0 - (to_clean + to_fraud) / cfg.n as f64
        }
        LabelMode::Multiclass => {
            let kept = fraud - to_clean;
            (kept + to_fraud / f64::from(cfg.k_fraud)) / (kept + to_fraud)
        }
    }
}
