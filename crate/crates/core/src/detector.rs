//! Uniform detector contract and per-family score binarization.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROBABILITY_THRESHOLD: f64 = 0.5;
/// No LOF cutoff is prescribed by the evaluation protocol; 1.5 is configurable.
pub const DEFAULT_LOF_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Mlp,
    Cnn1d,
    Ocsvm,
    Lof,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Mlp, Self::Cnn1d, Self::Ocsvm, Self::Lof];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "MLP",
            Self::Cnn1d => "CNN",
            Self::Ocsvm => "OCSVM",
            Self::Lof => "LOF",
        }
    }

    /// Lowercase identifier used in file names and config files.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Cnn1d => "cnn1d",
            Self::Ocsvm => "ocsvm",
            Self::Lof => "lof",
        }
    }

    /// Supervised families train on benign plus known attacks; the others on
    /// benign traffic only.
    pub fn is_supervised(self) -> bool {
        matches!(self, Self::Mlp | Self::Cnn1d)
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            Self::Mlp | Self::Cnn1d => DEFAULT_PROBABILITY_THRESHOLD,
            Self::Ocsvm => 0.0,
            Self::Lof => DEFAULT_LOF_THRESHOLD,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "cnn" | "cnn1d" => Ok(Self::Cnn1d),
            "ocsvm" => Ok(Self::Ocsvm),
            "lof" => Ok(Self::Lof),
            other => Err(Error::Config(format!("unknown detector kind {other:?}"))),
        }
    }
}

/// Anything that turns a feature matrix into one real score per row.
pub trait Detector {
    fn kind(&self) -> DetectorKind;

    /// Family-specific scores: probabilities for MLP/CNN, decision values
    /// for OCSVM, LOF ratios for LOF.
    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredPredictions {
    pub fn new(kind: DetectorKind, scores: Vec<f64>, threshold: f64) -> Result<Self> {
        let labels = predict_binary(kind, &scores, threshold)?;
        Ok(Self { scores, labels })
    }
}

/// Maps scores to benign (0) / malicious (1).
///
/// MLP/CNN: `p >= threshold`. OCSVM: `f(x) < 0`, `threshold` ignored.
/// LOF: `score > threshold`. Infinite LOF scores are legal; NaN is not.
pub fn predict_binary(kind: DetectorKind, scores: &[f64], threshold: f64) -> Result<Vec<u8>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {i} is NaN")));
    }
    if threshold.is_nan() {
        return Err(Error::InvalidInput("threshold is NaN".into()));
    }
    let labels = match kind {
        DetectorKind::Mlp | DetectorKind::Cnn1d => {
            scores.iter().map(|&s| u8::from(s >= threshold)).collect()
        }
        DetectorKind::Ocsvm => scores.iter().map(|&s| u8::from(s < 0.0)).collect(),
        DetectorKind::Lof => scores.iter().map(|&s| u8::from(s > threshold)).collect(),
    };
    Ok(labels)
}
