//! Seeded Gaussian-cluster flow data for dataset-free runs.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::LabeledDataset;
use crate::rng::SplitMix64;
use crate::split::DEFAULT_BENIGN_LABEL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub label: String,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variance: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    pub benign: Vec<ClusterSpec>,
    #[serde(default)]
    pub known_attacks: Vec<ClusterSpec>,
    #[serde(default)]
    pub unknown_attacks: Vec<ClusterSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

/// Class counts of the full CICIDS2017 release.
pub const TABLE1_COUNTS: [(&str, usize); 15] = [
    ("BENIGN", 2_270_397),
    ("DoS Hulk", 231_073),
    ("PortScan", 158_930),
    ("DDoS", 128_027),
    ("DoS GoldenEye", 10_293),
    ("FTP-Patator", 7_938),
    ("SSH-Patator", 5_897),
    ("DoS slowloris", 5_796),
    ("DoS Slowhttptest", 5_499),
    ("Bot", 1_966),
    ("Web Attack – Brute Force", 1_507),
    ("Web Attack – XSS", 652),
    ("Infiltration", 36),
    ("Web Attack – SQL Injection", 21),
    ("Heartbleed", 11),
];

fn cluster(label: &str, mean: Vec<f64>, variance: f64, count: usize) -> ClusterSpec {
    let d = mean.len();
    ClusterSpec {
        label: label.to_string(),
        mean,
        variance: vec![variance; d],
        count,
    }
}

fn axis_point(d: usize, coords: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for &(i, x) in coords {
        v[i] = x;
    }
    v
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("synthetic data needs d >= 1".into()));
        }
        if self.benign.is_empty() {
            return Err(Error::Config("synthetic data needs a benign cluster".into()));
        }
        for c in self.clusters() {
            if c.mean.len() != self.d || c.variance.len() != self.d {
                return Err(Error::Config(format!(
                    "cluster {:?} must have {} means and variances",
                    c.label, self.d
                )));
            }
            if c.count == 0 || c.variance.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!(
                    "cluster {:?} needs a positive count and variances",
                    c.label
                )));
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> impl Iterator<Item = &ClusterSpec> {
        self.benign
            .iter()
            .chain(&self.known_attacks)
            .chain(&self.unknown_attacks)
    }

    pub fn unknown_labels(&self) -> BTreeSet<String> {
        self.unknown_attacks.iter().map(|c| c.label.clone()).collect()
    }

    /// Benign cloud at the origin, two known attacks on the positive axes and
    /// one unknown attack on the opposite side, each 8 standard deviations
    /// from the benign center. `d` must be at least 2.
    pub fn directional(d: usize, seed: u64) -> Self {
        let far = 8.0 / 2f64.sqrt();
        Self {
            d,
            benign: vec![cluster(DEFAULT_BENIGN_LABEL, vec![0.0; d], 1.0, 3000)],
            known_attacks: vec![
                cluster("Known-A", axis_point(d, &[(0, 8.0)]), 1.0, 1500),
                cluster("Known-B", axis_point(d, &[(1, 8.0)]), 1.0, 1500),
            ],
            unknown_attacks: vec![cluster(
                "Unknown-U",
                axis_point(d, &[(0, -far), (1, -far)]),
                1.0,
                300,
            )],
            seed,
        }
    }

    /// Every class of [`TABLE1_COUNTS`] at its exact count, one random
    /// cluster per class. The three default unknown attacks are listed as
    /// unknown.
    pub fn table1_replica(d: usize, seed: u64) -> Self {
        let unknown = ["DoS slowloris", "DoS Slowhttptest", "Bot"];
        let mut rng = SplitMix64::keyed(seed, "table1-centers");
        let mut cfg = Self {
            d,
            benign: Vec::new(),
            known_attacks: Vec::new(),
            unknown_attacks: Vec::new(),
            seed,
        };
        for (label, count) in TABLE1_COUNTS {
            let mean = (0..d).map(|_| rng.next_f64() * 10.0 - 5.0).collect();
            let c = cluster(label, mean, 1.0, count);
            if label == DEFAULT_BENIGN_LABEL {
                cfg.benign.push(c);
            } else if unknown.contains(&label) {
                cfg.unknown_attacks.push(c);
            } else {
                cfg.known_attacks.push(c);
            }
        }
        cfg
    }
}

/// Samples every cluster in order (benign, known, unknown).
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let total: usize = cfg.clusters().map(|c| c.count).sum();
    let mut data = Vec::with_capacity(total * cfg.d);
    let mut labels: Vec<&str> = Vec::with_capacity(total);
    let mut rng = SplitMix64::keyed(cfg.seed, "synthetic");
    for c in cfg.clusters() {
        let sd: Vec<f64> = c.variance.iter().map(|v| v.sqrt()).collect();
        for _ in 0..c.count {
            for j in 0..cfg.d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c.mean[j] + sd[j] * z);
            }
            labels.push(&c.label);
        }
    }
    let features = Array2::from_shape_vec((total, cfg.d), data)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let names = (0..cfg.d).map(|j| format!("f{j}")).collect();
    LabeledDataset::new(names, features, &labels)
}
