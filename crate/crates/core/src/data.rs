//! Procurement records, the canonical CSV interchange format, and label
//! derivation for the two classification tasks.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Header of the canonical CSV format, in order.
pub const CSV_HEADER: [&str; 9] = ["PSN", "PGN", "PON", "MGN", "NP", "PA", "PTP", "FT", "SSN"];

/// Model input columns, in order. `FT` is the label and never an input.
pub const FEATURE_COLUMNS: [&str; 8] = ["PSN", "PGN", "PON", "MGN", "NP", "PA", "PTP", "SSN"];

pub const NUM_FEATURES: usize = FEATURE_COLUMNS.len();

/// One procurement event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcurementRecord {
    /// Procurement serial number.
    pub psn: u64,
    /// Procurement group number.
    pub pgn: u64,
    /// Procurement organization number.
    pub pon: u64,
    /// Material group number.
    pub mgn: u64,
    /// Net price per unit.
    pub np: f64,
    /// Purchase amount in units.
    pub pa: f64,
    /// Procurement total price.
    pub ptp: f64,
    /// Fraud type; 0 means clean.
    pub ft: u32,
    /// Supplier serial number.
    pub ssn: u64,
}

impl ProcurementRecord {
    pub fn is_fraud(&self) -> bool {
        self.ft != 0
    }

    /// Raw feature values in [`FEATURE_COLUMNS`] order.
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [
            self.psn as f64,
            self.pgn as f64,
            self.pon as f64,
            self.mgn as f64,
            self.np,
            self.pa,
            self.ptp,
            self.ssn as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<ProcurementRecord>,
    labeled: bool,
}

impl Dataset {
    pub fn new(records: Vec<ProcurementRecord>) -> Self {
        Dataset {
            records,
            labeled: true,
        }
    }

    pub fn records(&self) -> &[ProcurementRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ProcurementRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// False when the source had no `FT` column; every `ft` is then 0 and
    /// carries no meaning.
    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn fraud_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_fraud()).count()
    }

    pub fn max_fraud_type(&self) -> u32 {
        self.records.iter().map(|r| r.ft).max().unwrap_or(0)
    }

    /// Record counts indexed by fraud type, `0..=max_fraud_type`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.max_fraud_type() as usize + 1];
        for r in &self.records {
            counts[r.ft as usize] += 1;
        }
        counts
    }

    /// Rejects any record whose fraud type is outside `0..=k_fraud`.
    pub fn check_fraud_classes(&self, k_fraud: u32) -> Result<()> {
        match self.records.iter().position(|r| r.ft > k_fraud) {
            Some(i) => Err(Error::Validation {
                row: i + 1,
                message: format!(
                    "fraud type {} exceeds configured count {k_fraud}",
                    self.records[i].ft
                ),
            }),
            None => Ok(()),
        }
    }

    /// `n × 8` matrix of raw features.
    pub fn feature_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * NUM_FEATURES);
        for r in &self.records {
            data.extend_from_slice(&r.features());
        }
        Matrix::from_vec(self.len(), NUM_FEATURES, data)
            .expect("validated records have finite features")
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            records: rows.iter().map(|&i| self.records[i]).collect(),
            labeled: self.labeled,
        }
    }
}

impl FromIterator<ProcurementRecord> for Dataset {
    fn from_iter<I: IntoIterator<Item = ProcurementRecord>>(iter: I) -> Self {
        Dataset::new(iter.into_iter().collect())
    }
}

/// Parses the canonical CSV format. All nine columns are required.
pub fn parse_csv<R: Read>(source: R) -> Result<Dataset> {
    read_csv(source, true)
}

/// Like [`parse_csv`] but accepts input without an `FT` column, for
/// prediction on unlabeled data. Check [`Dataset::is_labeled`] afterwards.
pub fn parse_csv_unlabeled<R: Read>(source: R) -> Result<Dataset> {
    read_csv(source, false)
}

fn read_csv<R: Read>(source: R, require_ft: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let mut columns = [None; 9];
    for (slot, name) in columns.iter_mut().zip(CSV_HEADER) {
        *slot = headers.iter().position(|h| h == name);
    }
    for (slot, name) in columns.iter().zip(CSV_HEADER) {
        if slot.is_none() && (require_ft || name != "FT") {
            return Err(Error::Schema(name.to_string()));
        }
    }
    let labeled = columns[7].is_some();

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 1;
        let cell = |c: usize| -> &str { columns[c].and_then(|idx| row.get(idx)).unwrap_or("") };
        let id = |c: usize| -> Result<u64> {
            cell(c).parse::<u64>().map_err(|e| Error::Parse {
                row: line,
                column: CSV_HEADER[c].to_string(),
                message: format!("{:?}: {e}", cell(c)),
            })
        };
        let real = |c: usize| -> Result<f64> {
            let v = cell(c).parse::<f64>().map_err(|e| Error::Parse {
                row: line,
                column: CSV_HEADER[c].to_string(),
                message: format!("{:?}: {e}", cell(c)),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: CSV_HEADER[c].to_string(),
                    message: format!("{:?} is not finite", cell(c)),
                });
            }
            if v < 0.0 {
                return Err(Error::Validation {
                    row: line,
                    message: format!("{} must be non-negative, got {v}", CSV_HEADER[c]),
                });
            }
            Ok(v)
        };
        let ft = if labeled {
            cell(7).parse::<u32>().map_err(|e| Error::Parse {
                row: line,
                column: "FT".into(),
                message: format!("{:?}: {e}", cell(7)),
            })?
        } else {
            0
        };
        records.push(ProcurementRecord {
            psn: id(0)?,
            pgn: id(1)?,
            pon: id(2)?,
            mgn: id(3)?,
            np: real(4)?,
            pa: real(5)?,
            ptp: real(6)?,
            ft,
            ssn: id(8)?,
        });
    }
    Ok(Dataset { records, labeled })
}

/// Writes the canonical CSV format, header included.
pub fn write_csv<W: Write>(ds: &Dataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_HEADER)?;
    for r in ds.records() {
        w.write_record([
            r.psn.to_string(),
            r.pgn.to_string(),
            r.pon.to_string(),
            r.mgn.to_string(),
            r.np.to_string(),
            r.pa.to_string(),
            r.ptp.to_string(),
            r.ft.to_string(),
            r.ssn.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which target a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// 0 clean, 1 fraud.
    Binary,
    /// Fraud type among fraud records only; label is `ft - 1`.
    Multiclass,
    /// Fraud type over all records, clean included as class 0.
    MulticlassWithClean,
}

impl LabelMode {
    /// Class count for a dataset with `k_fraud` fraud types.
    pub fn num_classes(self, k_fraud: u32) -> usize {
        match self {
            LabelMode::Binary => 2,
            LabelMode::Multiclass => k_fraud as usize,
            LabelMode::MulticlassWithClean => k_fraud as usize + 1,
        }
    }

    /// Maps a class index back to the value shown to users: 0/1 for the
    /// binary task, the fraud type otherwise.
    pub fn display_label(self, class: usize) -> u32 {
        match self {
            LabelMode::Multiclass => class as u32 + 1,
            _ => class as u32,
        }
    }

    /// Class index for a record, or `None` when the record is outside the task.
    pub fn label_of(self, record: &ProcurementRecord) -> Option<usize> {
        match self {
            LabelMode::Binary => Some(usize::from(record.is_fraud())),
            LabelMode::Multiclass => record.is_fraud().then(|| record.ft as usize - 1),
            LabelMode::MulticlassWithClean => Some(record.ft as usize),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Binary => "binary",
            LabelMode::Multiclass => "multiclass",
            LabelMode::MulticlassWithClean => "multiclass-with-clean",
        })
    }
}

/// Task labels plus the dataset rows they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub labels: Vec<usize>,
    pub rows: Vec<usize>,
}

pub fn derive_labels(ds: &Dataset, mode: LabelMode) -> Result<Labels> {
    let mut labels = Vec::with_capacity(ds.len());
    let mut rows = Vec::with_capacity(ds.len());
    for (i, r) in ds.records().iter().enumerate() {
        if let Some(l) = mode.label_of(r) {
            labels.push(l);
            rows.push(i);
        }
    }
    if mode == LabelMode::Multiclass && labels.is_empty() {
        return Err(Error::EmptyLabels(
            "multiclass task needs at least one fraud record".into(),
        ));
    }
    Ok(Labels { labels, rows })
}

/// Downsamples the majority class (clean vs fraud) so both have the same
/// count. Surviving records keep their original relative order.
pub fn balance(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let (fraud, clean): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.records[i].is_fraud());
    if fraud.is_empty() || clean.is_empty() {
        return Err(Error::Balance(format!(
            "need both classes, got {} fraud and {} clean",
            fraud.len(),
            clean.len()
        )));
    }
    let (minority, majority) = if fraud.len() <= clean.len() {
        (fraud, clean)
    } else {
        (clean, fraud)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = index::sample(&mut rng, majority.len(), minority.len())
        .into_iter()
        .map(|j| majority[j])
        .chain(minority)
        .collect();
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}
