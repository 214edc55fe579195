//! Epoch loop, k-fold cross-validation and the report types built from it.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{derive_labels, Dataset, LabelMode, ProcurementRecord, FEATURE_COLUMNS};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::mlp::{Mode, NetworkConfig, NetworkParameters, Optimizer, OptimizerState};
use crate::model::Model;
use crate::normalize::NormalizationStats;

/// Value of the `schema` field on every JSON report line.
pub const REPORT_SCHEMA: &str = "procaudit.report/1";

/// How many times fold assignment is re-drawn when a training split is
/// missing a class.
pub const PARTITION_RETRIES: usize = 5;

const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Splits `0..n` into `k` folds: one seeded shuffle, then contiguous runs.
/// The first `n % k` folds get one extra element.
pub fn partition_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_fold_args(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Like [`partition_folds`], but deals each class out round-robin so every
/// fold gets its share of every class. Sizes still differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_fold_args(labels.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for mut members in by_class {
        members.shuffle(&mut rng);
        for i in members {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

fn check_fold_args(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Argument(format!("cannot split {n} samples into {k} folds")));
    }
    Ok(())
}

/// Trains in place and returns the mean training loss of each epoch.
///
/// Each epoch shuffles the rows with `rng`, then walks them in mini-batches
/// of at most `batch_size`, one optimizer step per batch.
pub fn train_epochs(
    params: &mut NetworkParameters,
    features: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if features.rows() == 0 {
        return Err(Error::Argument("training set is empty".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = features.select_rows(batch);
            targets.clear();
            targets.extend(batch.iter().map(|&i| labels[i]));
            let fwd = params.forward(&x, Mode::Train(&mut *rng))?;
            total += targets
                .iter()
                .enumerate()
                .map(|(r, &t)| math::cross_entropy_unchecked(fwd.probs.row(r), t))
                .sum::<f64>();
            let cache = fwd.cache.expect("training forward keeps its cache");
            let grads = params.backward(&cache, &targets)?;
            optimizer.step(params, &grads)?;
        }
        trace.push(total / features.rows() as f64);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and argmax accuracy (ties to the lowest class).
pub fn evaluate(params: &NetworkParameters, features: &Matrix, labels: &[usize]) -> Result<Evaluation> {
    if features.rows() == 0 {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let rows: Vec<usize> = (0..features.rows()).collect();
    let mut loss = 0.0;
    let mut hits = 0usize;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let probs = params.predict_batch(&features.select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let t = labels[i];
            if t >= probs.cols() {
                return Err(Error::Argument(format!(
                    "label {t} out of range for {} classes",
                    probs.cols()
                )));
            }
            loss += math::cross_entropy_unchecked(probs.row(r), t);
            hits += usize::from(math::argmax(probs.row(r)) == t);
        }
    }
    let n = features.rows() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits as f64 / n,
    })
}

/// Fraction of rows of `probs` whose argmax equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &t)| math::argmax(probs.row(r)) == t)
        .count();
    hits as f64 / labels.len() as f64
}

/// Where normalization ranges come from during cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    /// Fit on the training folds only.
    PerFold,
    /// Fit once on every sample before splitting.
    WholeDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValConfig {
    pub k: usize,
    pub train: TrainConfig,
    /// `input_dim`, `output_classes` and `seed` are set per fold.
    pub network: NetworkConfig,
    pub seed: u64,
    pub normalization: NormalizationScope,
    pub stratified: bool,
    /// Fraud-type count for multiclass tasks; inferred from the data when
    /// `None`.
    pub k_fraud: Option<u32>,
    /// Worker threads for folds. Does not affect results.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        CrossValConfig {
            k: 10,
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            seed: 0,
            normalization: NormalizationScope::PerFold,
            stratified: false,
            k_fraud: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// 1-based.
    pub fold: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub task: LabelMode,
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
    /// Fold assignments drawn, including the accepted one.
    pub partition_attempts: usize,
    pub config: CrossValConfig,
    pub folds: Vec<FoldReport>,
    pub average_loss: f64,
    pub average_accuracy: f64,
}

/// Rows a fold trains and tests on, as indices into the task's sample list.
pub struct FoldAssignment<'a> {
    pub fold: usize,
    pub train: &'a [usize],
    pub test: &'a [usize],
}

/// SplitMix64 finalizer; turns (seed, stream) into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

pub fn num_classes(ds: &Dataset, mode: LabelMode, k_fraud: Option<u32>) -> usize {
    mode.num_classes(k_fraud.unwrap_or_else(|| ds.max_fraud_type()))
}

pub fn cross_validate(ds: &Dataset, mode: LabelMode, cfg: &CrossValConfig) -> Result<CrossValReport> {
    cross_validate_observed(ds, mode, cfg, &|_| {})
}

/// [`cross_validate`] with a hook that sees each fold's train/test split
/// before training starts.
pub fn cross_validate_observed(
    ds: &Dataset,
    mode: LabelMode,
    cfg: &CrossValConfig,
    observer: &(dyn Fn(&FoldAssignment<'_>) + Sync),
) -> Result<CrossValReport> {
    cfg.train.validate()?;
    if let Some(k) = cfg.k_fraud {
        ds.check_fraud_classes(k)?;
    }
    let labels = derive_labels(ds, mode)?;
    let samples = ds.subset(&labels.rows);
    let labels = labels.labels;
    check_fold_args(samples.len(), cfg.k)?;
    let classes = num_classes(ds, mode, cfg.k_fraud);
    let network = NetworkConfig {
        input_dim: crate::data::NUM_FEATURES,
        output_classes: classes,
        ..cfg.network.clone()
    };
    network.validate()?;

    let mut accepted = None;
    for attempt in 0..=PARTITION_RETRIES {
        let split_seed = derive_seed(cfg.seed, attempt as u64);
        let folds = if cfg.stratified {
            stratified_folds(&labels, cfg.k, split_seed)?
        } else {
            partition_folds(samples.len(), cfg.k, split_seed)?
        };
        if folds.iter().all(|f| training_split_covers(&labels, f, classes)) {
            accepted = Some((attempt + 1, folds));
            break;
        }
    }
    let (attempts, folds) = accepted.ok_or_else(|| {
        Error::Stratification(format!(
            "some training split lacks one of the {classes} classes after {} attempts",
            PARTITION_RETRIES + 1
        ))
    })?;

    let features_raw = samples.feature_matrix();
    let global_stats = match cfg.normalization {
        NormalizationScope::WholeDataset => Some(NormalizationStats::fit(&samples)?),
        NormalizationScope::PerFold => None,
    };

    let run_fold = |i: usize| -> Result<FoldReport> {
        let mut in_test = vec![false; samples.len()];
        folds[i].iter().for_each(|&j| in_test[j] = true);
        let train_rows: Vec<usize> = (0..samples.len()).filter(|&j| !in_test[j]).collect();
        let test_rows = &folds[i];
        observer(&FoldAssignment {
            fold: i + 1,
            train: &train_rows,
            test: test_rows,
        });
        let stats = match &global_stats {
            Some(s) => s.clone(),
            None => NormalizationStats::fit_rows(&samples, &train_rows)?,
        };
        let x_train = normalize_rows(&features_raw, &train_rows, &stats);
        let y_train: Vec<usize> = train_rows.iter().map(|&j| labels[j]).collect();
        let x_test = normalize_rows(&features_raw, test_rows, &stats);
        let y_test: Vec<usize> = test_rows.iter().map(|&j| labels[j]).collect();

        let mut init_rng = fold_rng(cfg.seed, 2 * i);
        let mut params = NetworkParameters::init(&NetworkConfig {
            seed: init_rng.next_u64(),
            ..network.clone()
        })?;
        let mut rng = fold_rng(cfg.seed, 2 * i + 1);
        let trace = train_epochs(&mut params, &x_train, &y_train, &cfg.train, &mut rng)?;
        let eval = evaluate(&params, &x_test, &y_test)?;
        Ok(FoldReport {
            fold: i + 1,
            loss: eval.loss,
            accuracy: eval.accuracy,
            train_size: train_rows.len(),
            test_size: test_rows.len(),
            final_train_loss: *trace.last().expect("at least one epoch"),
        })
    };

    let reports: Vec<FoldReport> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs.min(cfg.k))
            .build()
            .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..cfg.k).into_par_iter().map(run_fold).collect::<Result<_>>())?
    } else {
        (0..cfg.k).map(run_fold).collect::<Result<_>>()?
    };

    let k = reports.len() as f64;
    let average_loss = reports.iter().map(|r| r.loss).sum::<f64>() / k;
    let average_accuracy = reports.iter().map(|r| r.accuracy).sum::<f64>() / k;
    Ok(CrossValReport {
        task: mode,
        samples: samples.len(),
        classes,
        seed: cfg.seed,
        partition_attempts: attempts,
        config: cfg.clone(),
        folds: reports,
        average_loss,
        average_accuracy,
    })
}

fn training_split_covers(labels: &[usize], test_fold: &[usize], classes: usize) -> bool {
    let mut held_out = vec![false; labels.len()];
    test_fold.iter().for_each(|&j| held_out[j] = true);
    let mut seen = vec![false; classes];
    for (j, &l) in labels.iter().enumerate() {
        if !held_out[j] && l < classes {
            seen[l] = true;
        }
    }
    seen.into_iter().all(|s| s)
}

fn normalize_rows(raw: &Matrix, rows: &[usize], stats: &NormalizationStats) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * raw.cols());
    for &r in rows {
        let features: &[f64; crate::data::NUM_FEATURES] =
            raw.row(r).try_into().expect("eight feature columns");
        data.extend_from_slice(&stats.transform_features(features));
    }
    Matrix::from_vec(rows.len(), raw.cols(), data).expect("scaled values are finite")
}

impl CrossValReport {
    /// Fold/loss/accuracy table with a closing average row.
    pub fn render_table(&self) -> String {
        let mut out = format!("{:<8} {:>10} {:>10}\n", "Fold #", "Loss", "Accuracy");
        for f in &self.folds {
            out.push_str(&format!("{:<8} {:>10.4} {:>10.4}\n", f.fold, f.loss, f.accuracy));
        }
        out.push_str(&format!(
            "{:<8} {:>10.4} {:>10.4}\n",
            "Average", self.average_loss, self.average_accuracy
        ));
        out
    }

    /// One JSON object per fold, then a summary object.
    pub fn write_jsonl<W: Write>(&self, mut sink: W) -> Result<()> {
        for f in &self.folds {
            let line = json!({
                "schema": REPORT_SCHEMA,
                "type": "fold",
                "fold": f.fold,
                "loss": f.loss,
                "accuracy": f.accuracy,
                "train_size": f.train_size,
                "test_size": f.test_size,
                "final_train_loss": f.final_train_loss,
            });
            writeln!(sink, "{line}")?;
        }
        let summary = json!({
            "schema": REPORT_SCHEMA,
            "type": "summary",
            "task": self.task,
            "k": self.folds.len(),
            "samples": self.samples,
            "classes": self.classes,
            "seed": self.seed,
            "partition_attempts": self.partition_attempts,
            "average_loss": self.average_loss,
            "average_accuracy": self.average_accuracy,
            "config": self.config,
        });
        writeln!(sink, "{summary}")?;
        Ok(())
    }
}

/// Trains a single model on every labeled sample, for deployment.
pub fn fit_model(
    ds: &Dataset,
    mode: LabelMode,
    network: &NetworkConfig,
    train: &TrainConfig,
    k_fraud: Option<u32>,
) -> Result<(Model, Vec<f64>)> {
    if let Some(k) = k_fraud {
        ds.check_fraud_classes(k)?;
    }
    let labels = derive_labels(ds, mode)?;
    if labels.labels.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let samples = ds.subset(&labels.rows);
    let stats = NormalizationStats::fit(&samples)?;
    let x = stats.transform(&samples);
    let cfg = NetworkConfig {
        input_dim: crate::data::NUM_FEATURES,
        output_classes: num_classes(ds, mode, k_fraud),
        ..network.clone()
    };
    let mut params = NetworkParameters::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let trace = train_epochs(&mut params, &x, &labels.labels, train, &mut rng)?;
    Ok((Model::new(mode, params, stats), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub record: ProcurementRecord,
    /// Class index of the ground truth, when known.
    pub truth: Option<usize>,
    pub predicted: usize,
    /// Probability assigned to the predicted class.
    pub probability: f64,
    pub hit: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionTable {
    pub task: LabelMode,
    pub rows: Vec<PredictionRow>,
    /// Share of rows with known truth that were predicted correctly.
    pub hit_rate: Option<f64>,
}

/// Per-record predictions. `truth[i]` is the class index of `records[i]`,
/// or `None` when unknown or outside the model's task.
pub fn prediction_table(
    model: &Model,
    records: &[ProcurementRecord],
    truth: Option<&[Option<usize>]>,
) -> Result<PredictionTable> {
    if let Some(t) = truth {
        if t.len() != records.len() {
            return Err(Error::Shape(format!(
                "{} truth labels for {} records",
                t.len(),
                records.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let pred = model.predict_record(record)?;
        let predicted = pred.predicted_class();
        let truth = truth.and_then(|t| t[i]);
        rows.push(PredictionRow {
            record: *record,
            truth,
            predicted,
            probability: pred.confidence(),
            hit: truth.map(|t| t == predicted),
        });
    }
    let judged: Vec<bool> = rows.iter().filter_map(|r| r.hit).collect();
    let hit_rate = (!judged.is_empty())
        .then(|| judged.iter().filter(|&&h| h).count() as f64 / judged.len() as f64);
    Ok(PredictionTable {
        task: model.task,
        rows,
        hit_rate,
    })
}

impl PredictionTable {
    fn has_truth(&self) -> bool {
        self.rows.iter().any(|r| r.truth.is_some())
    }

    /// Text table; the truth and hit columns appear only when some truth is
    /// known. Labels are shown as 0/1 for the binary task and as fraud types
    /// otherwise.
    pub fn render(&self) -> String {
        let truth = self.has_truth();
        let mut out = String::new();
        for c in FEATURE_COLUMNS {
            out.push_str(&format!("{c:>12} "));
        }
        if truth {
            out.push_str(&format!("{:>6} ", "TRUE"));
        }
        out.push_str(&format!("{:>6} {:>8}", "PRED", "PROB"));
        if truth {
            out.push_str(&format!(" {:>4}", "HIT"));
        }
        out.push('\n');
        for row in &self.rows {
            for v in row.record.features() {
                out.push_str(&format!("{v:>12} "));
            }
            if truth {
                let t = row
                    .truth
                    .map_or("-".to_string(), |t| self.task.display_label(t).to_string());
                out.push_str(&format!("{t:>6} "));
            }
            out.push_str(&format!(
                "{:>6} {:>8.4}",
                self.task.display_label(row.predicted),
                row.probability
            ));
            if truth {
                let h = match row.hit {
                    Some(true) => "yes",
                    Some(false) => "no",
                    None => "-",
                };
                out.push_str(&format!(" {h:>4}"));
            }
            out.push('\n');
        }
        if let Some(rate) = self.hit_rate {
            out.push_str(&format!("hit rate: {rate:.4}\n"));
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut sink: W) -> Result<()> {
        for row in &self.rows {
            let r = &row.record;
            let line = json!({
                "schema": REPORT_SCHEMA,
                "type": "prediction",
                "psn": r.psn, "pgn": r.pgn, "pon": r.pon, "mgn": r.mgn,
                "np": r.np, "pa": r.pa, "ptp": r.ptp, "ssn": r.ssn,
                "truth": row.truth.map(|t| self.task.display_label(t)),
                "predicted": self.task.display_label(row.predicted),
                "probability": row.probability,
                "hit": row.hit,
            });
            writeln!(sink, "{line}")?;
        }
        let summary = json!({
            "schema": REPORT_SCHEMA,
            "type": "summary",
            "task": self.task,
            "rows": self.rows.len(),
            "hit_rate": self.hit_rate,
        });
        writeln!(sink, "{summary}")?;
        Ok(())
    }
}

/// `count` distinct row indices out of `n`, sorted; all rows if `count >= n`.
pub fn sample_rows(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    rows
}
