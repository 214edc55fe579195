//! Per-column min-max scaling, `(x - min) / (max - min)`, with the fitted
//! statistics persisted so prediction reuses the training-time ranges.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FEATURE_COLUMNS, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::math::Matrix;

const STATS_MAGIC: &str = "procaudit-normalization";
const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: [f64; NUM_FEATURES],
    pub max: [f64; NUM_FEATURES],
}

impl NormalizationStats {
    /// Exact column-wise extremes over every record.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let rows: Vec<usize> = (0..ds.len()).collect();
        Self::fit_rows(ds, &rows)
    }

    /// Fits on a subset of rows, e.g. the training folds.
    pub fn fit_rows(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let mut min = [f64::INFINITY; NUM_FEATURES];
        let mut max = [f64::NEG_INFINITY; NUM_FEATURES];
        for &i in rows {
            let f = ds.records()[i].features();
            for c in 0..NUM_FEATURES {
                min[c] = min[c].min(f[c]);
                max[c] = max[c].max(f[c]);
            }
        }
        Ok(NormalizationStats { min, max })
    }

    /// Scales one value of column `col` into `[0, 1]`. Degenerate columns
    /// map to 0; values outside the fitted range are clamped.
    pub fn scale(&self, col: usize, x: f64) -> f64 {
        let span = self.max[col] - self.min[col];
        if span <= 0.0 {
            return 0.0;
        }
        ((x - self.min[col]) / span).clamp(0.0, 1.0)
    }

    /// Inverse of [`scale`](Self::scale) for in-range values.
    pub fn unscale(&self, col: usize, n: f64) -> f64 {
        n * (self.max[col] - self.min[col]) + self.min[col]
    }

    pub fn transform_features(&self, raw: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|c| self.scale(c, raw[c]))
    }

    /// Normalized `n × 8` feature matrix.
    pub fn transform(&self, ds: &Dataset) -> Matrix {
        let mut data = Vec::with_capacity(ds.len() * NUM_FEATURES);
        for r in ds.records() {
            data.extend_from_slice(&self.transform_features(&r.features()));
        }
        Matrix::from_vec(ds.len(), NUM_FEATURES, data).expect("scaled values are finite")
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "{STATS_MAGIC} v{STATS_VERSION}")?;
        for c in 0..NUM_FEATURES {
            // Debug formatting of f64 is the shortest exact round-trip form.
            writeln!(sink, "{} {:?} {:?}", FEATURE_COLUMNS[c], self.min[c], self.max[c])?;
        }
        Ok(())
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut lines = BufReader::new(source).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format("empty normalization file".into()))?;
        let expected = format!("{STATS_MAGIC} v{STATS_VERSION}");
        if header.trim() != expected {
            return Err(Error::Format(format!(
                "expected header `{expected}`, found `{}`",
                header.trim()
            )));
        }
        let mut min = [0.0f64; NUM_FEATURES];
        let mut max = [0.0f64; NUM_FEATURES];
        for c in 0..NUM_FEATURES {
            let line = lines.next().transpose()?.ok_or_else(|| {
                Error::Format(format!("truncated: missing line for {}", FEATURE_COLUMNS[c]))
            })?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("malformed line `{line}`"));
            if parts.len() != 3 || parts[0] != FEATURE_COLUMNS[c] {
                return Err(bad());
            }
            min[c] = parts[1].parse().map_err(|_| bad())?;
            max[c] = parts[2].parse().map_err(|_| bad())?;
            if !(min[c].is_finite() && max[c].is_finite() && min[c] <= max[c]) {
                return Err(bad());
            }
        }
        Ok(NormalizationStats { min, max })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProcurementRecord;
    use proptest::prelude::*;

    fn with_np(values: &[f64]) -> Dataset {
        values
            .iter()
            .enumerate()
            .map(|(i, &np)| ProcurementRecord {
                psn: i as u64,
                pgn: 3,
                pon: 1,
                mgn: 1,
                np,
                pa: 1.0,
                ptp: np,
                ft: 0,
                ssn: 1,
            })
            .collect()
    }

    const NP: usize = 4;

    #[test]
    fn fit_examples() {
        let s = NormalizationStats::fit(&with_np(&[2.0, 4.0, 6.0, 8.0])).unwrap();
        assert_eq!((s.min[NP], s.max[NP]), (2.0, 8.0));
        // pgn is constant 3
        assert_eq!((s.min[1], s.max[1]), (3.0, 3.0));

        let single = NormalizationStats::fit(&with_np(&[5.0])).unwrap();
        assert_eq!(single.min, single.max);

        assert!(matches!(
            NormalizationStats::fit(&Dataset::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn transform_examples() {
        let mut s = NormalizationStats::fit(&with_np(&[0.0, 10.0])).unwrap();
        assert_eq!(s.scale(NP, 5.0), 0.5);
        assert_eq!(s.scale(NP, 0.0), 0.0);
        assert_eq!(s.scale(NP, 10.0), 1.0);
        assert_eq!(s.scale(NP, 15.0), 1.0);
        assert_eq!(s.scale(NP, -3.0), 0.0);

        let ds = with_np(&[2.0, 4.0, 6.0, 8.0]);
        s = NormalizationStats::fit(&ds).unwrap();
        let m = s.transform(&ds);
        // (x - 2) / 6 computed by hand
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (r, e) in expected.iter().enumerate() {
            assert!((m.get(r, NP) - e).abs() < 1e-15);
            assert_eq!(m.get(r, 1), 0.0, "degenerate column");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let s = NormalizationStats::fit(&with_np(&[0.1, 1.0 / 3.0, 123456.789])).unwrap();
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        assert_eq!(NormalizationStats::load(buf.as_slice()).unwrap(), s);

        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            NormalizationStats::load(truncated.as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(matches!(NormalizationStats::load(&b""[..]), Err(Error::Format(_))));
        let wrong_version = text.replace(" v1", " v9");
        assert!(matches!(
            NormalizationStats::load(wrong_version.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn fitted_cells_in_unit_interval_and_invertible(
            values in prop::collection::vec(0.0f64..1e7, 1..50)
        ) {
            let ds = with_np(&values);
            let s = NormalizationStats::fit(&ds).unwrap();
            let m = s.transform(&ds);
            prop_assert!(m.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
            for (r, &v) in values.iter().enumerate() {
                let n = m.get(r, NP);
                if s.max[NP] > s.min[NP] {
                    let back = s.unscale(NP, n);
                    prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(s.max[NP].abs()));
                } else {
                    prop_assert_eq!(n, 0.0);
                }
            }
        }

        #[test]
        fn ordering_preserved(values in prop::collection::vec(0.0f64..1e4, 2..40)) {
            let ds = with_np(&values);
            let s = NormalizationStats::fit(&ds).unwrap();
            for a in &values {
                for b in &values {
                    if a < b {
                        prop_assert!(s.scale(NP, *a) <= s.scale(NP, *b));
                    }
                }
            }
        }
    }
}
