//! Known/unknown-attack split protocol.
//!
//! Per class, rows (in file order) are shuffled with a Fisher–Yates pass
//! driven by `SplitMix64(seed ^ fnv1a64(class))`; the first
//! `floor(train_fraction * n_c)` go to the training side and the rest to the
//! overall test set. Unknown-attack classes never reach a training set. The
//! unknown-attack test set pairs every unknown-attack row with an equal
//! number of benign rows sampled from the benign test portion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{label_counts, LabeledDataset};
use crate::rng::SplitMix64;

pub const DEFAULT_BENIGN_LABEL: &str = "BENIGN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub unknown_labels: BTreeSet<String>,
    pub train_fraction: f64,
    pub seed: u64,
    pub benign_label: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unknown_labels: ["DoS slowloris", "DoS Slowhttptest", "Bot"]
                .into_iter()
                .map(String::from)
                .collect(),
            train_fraction: 0.8,
            seed: 42,
            benign_label: DEFAULT_BENIGN_LABEL.to_string(),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.unknown_labels.contains(&self.benign_label) {
            return Err(Error::Config(format!(
                "benign label {:?} cannot also be an unknown attack",
                self.benign_label
            )));
        }
        Ok(())
    }

    fn train_count(&self, n: usize) -> usize {
        // The epsilon keeps e.g. 0.7 * 10 from flooring to 6.
        ((self.train_fraction * n as f64) + 1e-9).floor() as usize
    }
}

/// One materialized subset with the source-row index of every record.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub data: LabeledDataset,
    pub source_rows: Vec<usize>,
}

impl Subset {
    fn from_rows(dataset: &LabeledDataset, mut rows: Vec<usize>) -> Self {
        rows.sort_unstable();
        Self {
            data: dataset.select_rows(&rows),
            source_rows: rows,
        }
    }

    pub fn len(&self) -> usize {
        self.source_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitProvenance {
    pub config: SplitConfig,
    pub classes: BTreeMap<String, ClassSplit>,
    pub subset_counts: BTreeMap<&'static str, BTreeMap<String, usize>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub supervised_train: Subset,
    pub benign_train: Subset,
    pub overall_test: Subset,
    pub unknown_test: Subset,
    pub provenance: SplitProvenance,
}

pub const SUBSET_NAMES: [&str; 4] = [
    "supervised_train",
    "benign_train",
    "overall_test",
    "unknown_test",
];

impl SplitBundle {
    pub fn subsets(&self) -> [(&'static str, &Subset); 4] {
        [
            (SUBSET_NAMES[0], &self.supervised_train),
            (SUBSET_NAMES[1], &self.benign_train),
            (SUBSET_NAMES[2], &self.overall_test),
            (SUBSET_NAMES[3], &self.unknown_test),
        ]
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, subset) in self.subsets() {
            h.update(name.as_bytes());
            h.update(subset.data.content_hash().as_bytes());
            for &r in &subset.source_rows {
                h.update((r as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Key/value provenance manifest. Subset hashes are content hashes of the
    /// records, so they match the hash of the same subset re-read from CSV.
    pub fn manifest(&self) -> String {
        let cfg = &self.provenance.config;
        let mut out = String::new();
        let unknown: Vec<&str> = cfg.unknown_labels.iter().map(String::as_str).collect();
        let _ = writeln!(out, "seed = {}", cfg.seed);
        let _ = writeln!(out, "train_fraction = {}", cfg.train_fraction);
        let _ = writeln!(out, "benign_label = {}", cfg.benign_label);
        let _ = writeln!(out, "unknown_labels = {}", unknown.join(";"));
        for (name, subset) in self.subsets() {
            let _ = writeln!(out, "{name}.rows = {}", subset.len());
            let _ = writeln!(out, "{name}.hash = {}", subset.data.content_hash());
        }
        for (class, c) in &self.provenance.classes {
            let _ = writeln!(
                out,
                "class.{class} = total:{} train:{} test:{}",
                c.total, c.train, c.test
            );
        }
        for w in &self.provenance.warnings {
            let _ = writeln!(out, "warning = {w}");
        }
        out
    }
}

/// Builds all four subsets. Deterministic for fixed `(dataset, cfg)`.
pub fn plan_and_materialize(dataset: &LabeledDataset, cfg: &SplitConfig) -> Result<SplitBundle> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in dataset.labels().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    let mut warnings = Vec::new();
    for u in &cfg.unknown_labels {
        if !by_class.contains_key(u.as_str()) {
            let msg = format!("unknown-attack label {u:?} not present in dataset");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let mut supervised = Vec::new();
    let mut benign_train = Vec::new();
    let mut benign_test = Vec::new();
    let mut overall = Vec::new();
    let mut unknown = Vec::new();
    let mut classes = BTreeMap::new();

    for (class, rows) in &by_class {
        if cfg.unknown_labels.contains(*class) {
            overall.extend_from_slice(rows);
            unknown.extend_from_slice(rows);
            classes.insert(
                class.to_string(),
                ClassSplit {
                    total: rows.len(),
                    train: 0,
                    test: rows.len(),
                },
            );
            continue;
        }
        let mut shuffled = rows.clone();
        SplitMix64::keyed(cfg.seed, class).shuffle(&mut shuffled);
        let n_train = cfg.train_count(rows.len());
        let (train, test) = shuffled.split_at(n_train);
        supervised.extend_from_slice(train);
        overall.extend_from_slice(test);
        if *class == cfg.benign_label {
            benign_train.extend_from_slice(train);
            benign_test.extend_from_slice(test);
        }
        classes.insert(
            class.to_string(),
            ClassSplit {
                total: rows.len(),
                train: train.len(),
                test: test.len(),
            },
        );
    }

    if benign_test.len() < unknown.len() {
        return Err(Error::Protocol(format!(
            "benign test pool has {} rows but {} unknown-attack rows need an equal benign count",
            benign_test.len(),
            unknown.len()
        )));
    }
    benign_test.sort_unstable();
    let key = format!("unknown-test/{}", cfg.benign_label);
    SplitMix64::keyed(cfg.seed, &key).shuffle(&mut benign_test);
    unknown.extend_from_slice(&benign_test[..unknown.len()]);

    let supervised_train = Subset::from_rows(dataset, supervised);
    let benign_train = Subset::from_rows(dataset, benign_train);
    let overall_test = Subset::from_rows(dataset, overall);
    let unknown_test = Subset::from_rows(dataset, unknown);

    let subset_counts = [
        (SUBSET_NAMES[0], &supervised_train),
        (SUBSET_NAMES[1], &benign_train),
        (SUBSET_NAMES[2], &overall_test),
        (SUBSET_NAMES[3], &unknown_test),
    ]
    .into_iter()
    .map(|(name, s)| (name, label_counts(&s.data)))
    .collect();

    Ok(SplitBundle {
        supervised_train,
        benign_train,
        overall_test,
        unknown_test,
        provenance: SplitProvenance {
            config: cfg.clone(),
            classes,
            subset_counts,
            warnings,
        },
    })
}
