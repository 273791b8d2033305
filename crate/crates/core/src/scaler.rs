//! Per-feature standardization fit on training data only.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose population std was zero and were given std 1.
    pub degenerate: Vec<bool>,
}

impl ScalerParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Column means and population standard deviations (two-pass).
pub fn fit_scaler(x: ArrayView2<'_, f64>) -> Result<ScalerParams> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(Error::EmptyDataset("cannot fit a scaler on an empty matrix".into()));
    }
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    let mut degenerate = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        mean.push(mu);
        if sd > 0.0 && sd.is_finite() {
            std.push(sd);
            degenerate.push(false);
        } else {
            std.push(1.0);
            degenerate.push(true);
        }
    }
    if degenerate.iter().any(|&d| d) {
        log::warn!(
            "{} constant feature column(s) left unscaled",
            degenerate.iter().filter(|&&d| d).count()
        );
    }
    Ok(ScalerParams {
        mean,
        std,
        degenerate,
    })
}

pub fn apply_scaler(params: &ScalerParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: x.ncols(),
        });
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&params.mean).zip(&params.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}
