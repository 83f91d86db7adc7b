use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean with a 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub ci95: f64,
}

impl Aggregate {
    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }

    pub fn excludes_zero(&self) -> bool {
        self.lower() > 0.0 || self.upper() < 0.0
    }
}

/// Mean and `1.96 * sd / sqrt(n)` with the sample (n - 1) standard
/// deviation. Values are summed in sorted order so the result does not
/// depend on their order.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.len() < 2 {
        return Err(Error::Aggregation(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Aggregation("non-finite value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let sd = (dev.iter().sum::<f64>() / (n - 1.0)).sqrt();
    Ok(Aggregate {
        n: values.len(),
        mean,
        ci95: 1.96 * sd / n.sqrt(),
    })
}

/// Aggregate of `b[i] - a[i]`.
pub fn paired(a: &[f64], b: &[f64]) -> Result<Aggregate> {
    if a.len() != b.len() {
        return Err(Error::Aggregation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    aggregate(&diffs)
}

/// Mean of each column over rows of equal length; `None` entries are
/// skipped. Columns with no values come out as `None`.
pub fn column_means(rows: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..width)
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(j).copied().flatten()).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}
