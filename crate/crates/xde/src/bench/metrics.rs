//! Evaluation records and the small statistics toolbox behind them.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One evaluation row: a method on one corruption cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub method: String,
    pub target_domain: String,
    pub corruption: String,
    pub severity: u8,
    /// Mean absolute error on the `[0,1]` scale.
    pub l1_error: f64,
    /// Mean predicted sigma; absent for methods without an uncertainty.
    pub mean_sigma: Option<f64>,
    /// Correlation between per-image sigma and per-image error inside the
    /// cell; absent when degenerate (constant sigma) or undefined.
    pub spearman_rho: Option<f64>,
    pub n_images: u32,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.l1_error) {
            return Err(Error::invalid(format!(
                "l1_error {} outside [0,1]",
                self.l1_error
            )));
        }
        if let Some(rho) = self.spearman_rho {
            if !(-1.0..=1.0).contains(&rho) {
                return Err(Error::invalid(format!("spearman {rho} outside [-1,1]")));
            }
        }
        Ok(())
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    })?;
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| Error::config(format!("csv encode: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let record: MetricsRecord = row.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("csv parse: {e}"),
        })?;
        if record.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!("unsupported metrics schema {}", record.schema_version),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Average ranks with ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut out = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = shared;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either side is constant or too short.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Spearman rank correlation with tie-averaged ranks; `None` when
/// degenerate.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Standard error of the mean by seeded bootstrap resampling.
pub fn bootstrap_se(values: &[f64], resamples: usize, seed: u64) -> f64 {
    if values.len() < 2 || resamples == 0 {
        return 0.0;
    }
    let mut rng = stream(seed, "bootstrap");
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut total = 0.0f64;
        for _ in 0..n {
            total += values[rng.gen_range(0..n)];
        }
        means.push(total / n as f64);
    }
    let m = means.iter().sum::<f64>() / resamples as f64;
    let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (resamples - 1) as f64;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_is_one_for_monotone_identity() {
        let xs = [0.1, 0.4, 0.2, 0.9];
        let ys = xs; // sigma == error
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_reversals() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &ys).unwrap() + 1.0).abs() < 1e-12);
        let tied = [1.0, 1.0, 2.0, 2.0];
        let other = [1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&tied, &other).unwrap();
        assert!(rho > 0.0 && rho < 1.0);
    }

    #[test]
    fn constant_series_has_no_correlation() {
        let xs = [0.5, 0.5, 0.5];
        let ys = [0.1, 0.2, 0.3];
        assert!(spearman(&xs, &ys).is_none());
        assert!(pearson(&xs, &ys).is_none());
    }

    #[test]
    fn bootstrap_se_shrinks_with_sample_size() {
        // SE should scale roughly like 1/sqrt(n)
        let mut small = Vec::new();
        let mut rng = stream(5, "test/bootstrap");
        for _ in 0..50 {
            small.push(rng.gen_range(0.0..1.0));
        }
        let mut large = Vec::new();
        for _ in 0..200 {
            large.push(rng.gen_range(0.0..1.0));
        }
        let se_small = bootstrap_se(&small, 400, 1);
        let se_large = bootstrap_se(&large, 400, 1);
        let ratio = se_small / se_large;
        assert!(
            (ratio - 2.0).abs() < 0.4,
            "expected ~2x shrink at 4x samples, got {ratio}"
        );
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let values = [0.1, 0.5, 0.3, 0.8, 0.2];
        assert_eq!(
            bootstrap_se(&values, 100, 7).to_bits(),
            bootstrap_se(&values, 100, 7).to_bits()
        );
    }

    #[test]
    fn metrics_csv_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = vec![MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: "r1".into(),
            method: "xde/inv_var".into(),
            target_domain: "depth".into(),
            corruption: "contrast".into(),
            severity: 3,
            l1_error: 0.12,
            mean_sigma: Some(0.3),
            spearman_rho: None,
            n_images: 32,
            seed: 17,
        }];
        records[0].validate().unwrap();
        write_metrics_csv(&path, &records).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, records);

        let bad = MetricsRecord {
            l1_error: 1.5,
            ..records[0].clone()
        };
        assert!(bad.validate().is_err());
    }
}
