//! End-to-end runs: data source, split, per-regime scaling, training,
//! evaluation and report files.
//!
//! Configuration is a TOML document whose top-level tables mirror
//! [`RunConfig`]. Everything a run writes is a pure function of the config
//! and the input dataset except the two timestamps in `manifest.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{train_cnn, CnnConfig};
use crate::detector::{predict_binary, DetectorKind, DEFAULT_LOF_THRESHOLD, DEFAULT_PROBABILITY_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, metrics_csv, per_class_accuracy, per_class_csv, render_tables, MetricsReport};
use crate::flow::{clean, parse_flow_csv, CleanReport, LabeledDataset, DEFAULT_LABEL_COLUMN};
use crate::lof::{fit_lof, LofConfig};
use crate::mlp::{train_mlp, MlpConfig};
use crate::model_io::{file_hash, ModelBundle, ModelProvenance, TrainedModel};
use crate::ocsvm::{fit_ocsvm, OcsvmConfig};
use crate::rng::SplitMix64;
use crate::scaler::{apply_scaler, fit_scaler, ScalerParams};
use crate::split::{plan_and_materialize, SplitBundle, SplitConfig};
use crate::synth::{gen_synthetic, SynthConfig};
use crate::train::TrainHistory;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_BENIGN_SUBSAMPLE: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    /// Benign at the origin, two known attacks and one unknown attack.
    Directional,
    /// Fifteen classes with the CICIDS2017 class counts.
    Table1Replica,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub name: SynthPreset,
    pub d: usize,
    pub seed: u64,
}

impl PresetConfig {
    pub fn expand(&self) -> SynthConfig {
        match self.name {
            SynthPreset::Directional => SynthConfig::directional(self.d, self.seed),
            SynthPreset::Table1Replica => SynthConfig::table1_replica(self.d, self.seed),
        }
    }
}

/// Exactly one of `path`, `synthetic` and `preset` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub synthetic: Option<SynthConfig>,
    pub preset: Option<PresetConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
            synthetic: None,
            preset: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let sources = [self.path.is_some(), self.synthetic.is_some(), self.preset.is_some()];
        match sources.iter().filter(|s| **s).count() {
            1 => Ok(()),
            0 => Err(Error::Config("no data source: set data.path, data.synthetic or data.preset".into())),
            _ => Err(Error::Config("data.path, data.synthetic and data.preset are mutually exclusive".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Probability cut for MLP and CNN.
    pub probability: f64,
    /// LOF score cut.
    pub lof: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            probability: DEFAULT_PROBABILITY_THRESHOLD,
            lof: DEFAULT_LOF_THRESHOLD,
        }
    }
}

impl Thresholds {
    pub fn for_kind(&self, kind: DetectorKind) -> f64 {
        match kind {
            DetectorKind::Mlp | DetectorKind::Cnn1d => self.probability,
            DetectorKind::Ocsvm => 0.0,
            DetectorKind::Lof => self.lof,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsampleConfig {
    /// Cap on benign training rows for OCSVM and LOF; 0 disables the cap.
    pub benign_rows: usize,
    pub seed: u64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            benign_rows: DEFAULT_BENIGN_SUBSAMPLE,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub detectors: Vec<DetectorKind>,
    /// Fit one scaler on the supervised training set for every detector
    /// instead of one per training regime.
    pub shared_scaler: bool,
    pub thresholds: Thresholds,
    pub subsample: SubsampleConfig,
    pub mlp: MlpConfig,
    pub cnn: CnnConfig,
    pub ocsvm: OcsvmConfig,
    pub lof: LofConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            detectors: DetectorKind::ALL.to_vec(),
            shared_scaler: false,
            thresholds: Thresholds::default(),
            subsample: SubsampleConfig::default(),
            mlp: MlpConfig::default(),
            cnn: CnnConfig::default(),
            ocsvm: OcsvmConfig::default(),
            lof: LofConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one seed to the split, the subsample and every detector. The
    /// synthetic data seed is left alone: it names the dataset, not the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.subsample.seed = seed;
        self.mlp.seed = seed;
        self.cnn.seed = seed;
        self.ocsvm.seed = seed;
    }

    /// Shrinks training budgets for smoke runs.
    pub fn quick(&mut self) {
        self.mlp.max_epochs = self.mlp.max_epochs.min(10);
        self.cnn.max_epochs = self.cnn.max_epochs.min(5);
        if self.subsample.benign_rows == 0 || self.subsample.benign_rows > 2_000 {
            self.subsample.benign_rows = 2_000;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        if self.detectors.is_empty() {
            return Err(Error::Config("detectors list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.thresholds.probability) {
            return Err(Error::Config("thresholds.probability must lie in [0, 1]".into()));
        }
        if !self.thresholds.lof.is_finite() {
            return Err(Error::Config("thresholds.lof must be finite".into()));
        }
        self.ocsvm.validate()?;
        Ok(())
    }
}

/// Reads and cleans a CSV source, or generates a synthetic one.
pub fn load_data(cfg: &DataConfig) -> Result<(LabeledDataset, Option<CleanReport>)> {
    cfg.validate()?;
    if let Some(path) = &cfg.path {
        let raw = parse_flow_csv(File::open(path)?, &cfg.label_column)?;
        let (cleaned, report) = clean(&raw)?;
        return Ok((cleaned, Some(report)));
    }
    let synth = match (&cfg.synthetic, &cfg.preset) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => p.expand(),
        (None, None) => unreachable!("validated above"),
    };
    Ok((gen_synthetic(&synth)?, None))
}

/// Name of the split subset a detector family trains on.
pub fn training_subset(kind: DetectorKind) -> &'static str {
    if kind.is_supervised() {
        "supervised_train"
    } else {
        "benign_train"
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Seeded row sample of at most `cap` rows, returned sorted; `cap == 0` or a
/// smaller input keeps every row.
pub fn subsample_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    if cap == 0 || n <= cap {
        return rows;
    }
    SplitMix64::keyed(seed, "benign-subsample").shuffle(&mut rows);
    rows.truncate(cap);
    rows.sort_unstable();
    rows
}

/// A freshly trained model ready to save or evaluate.
#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub bundle: ModelBundle,
    pub history: Option<TrainHistory>,
}

/// Trains `kind` on `train` (raw features). `scaler` overrides the per-regime
/// scaler fit on `train`.
pub fn train_detector(
    kind: DetectorKind,
    train: &LabeledDataset,
    subset_name: &str,
    cfg: &RunConfig,
    scaler: Option<&ScalerParams>,
) -> Result<TrainedDetector> {
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("training subset {subset_name} is empty")));
    }
    let benign = cfg.split.benign_label.as_str();
    let targets = train.binary_targets(benign);
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => fit_scaler(train.features())?,
    };
    let mut provenance = ModelProvenance {
        training_subset: subset_name.to_string(),
        training_hash: train.content_hash(),
        training_rows: train.len(),
        subsample: None,
        seed: 0,
        feature_names: train.feature_names().to_vec(),
        tool_version: TOOL_VERSION.to_string(),
        config: serde_json::Value::Null,
    };
    let (model, history) = if kind.is_supervised() {
        if !targets.contains(&0) || !targets.contains(&1) {
            return Err(Error::Protocol(format!(
                "{} needs both benign and malicious rows in {subset_name}",
                kind.name()
            )));
        }
        let x = apply_scaler(&scaler, train.features())?;
        match kind {
            DetectorKind::Mlp => {
                provenance.seed = cfg.mlp.seed;
                provenance.config = to_json(&cfg.mlp);
                let (m, h) = train_mlp(x.view(), &targets, &cfg.mlp)?;
                (TrainedModel::Mlp(m), Some(h))
            }
            _ => {
                provenance.seed = cfg.cnn.seed;
                provenance.config = to_json(&cfg.cnn);
                let (m, h) = train_cnn(x.view(), &targets, &cfg.cnn)?;
                (TrainedModel::Cnn(m), Some(h))
            }
        }
    } else {
        if targets.contains(&1) {
            return Err(Error::Protocol(format!(
                "benign-only required: {} cannot train on {subset_name}, which contains attack rows",
                kind.name()
            )));
        }
        let rows = subsample_rows(train.len(), cfg.subsample.benign_rows, cfg.subsample.seed);
        if rows.len() < train.len() {
            provenance.subsample = Some(rows.len());
        }
        provenance.training_rows = rows.len();
        let x = apply_scaler(&scaler, train.select_rows(&rows).features())?;
        match kind {
            DetectorKind::Ocsvm => {
                provenance.seed = cfg.subsample.seed;
                provenance.config = to_json(&cfg.ocsvm);
                (TrainedModel::Ocsvm(fit_ocsvm(x.view(), &cfg.ocsvm)?), None)
            }
            _ => {
                provenance.seed = cfg.subsample.seed;
                provenance.config = to_json(&cfg.lof);
                (TrainedModel::Lof(fit_lof(x.view(), &cfg.lof)?), None)
            }
        }
    };
    Ok(TrainedDetector {
        bundle: ModelBundle::new(model, scaler, provenance)?,
        history,
    })
}

/// Scores `test` with `bundle` and builds the metrics report. `model_hash`
/// identifies the model file in the report's provenance hash.
pub fn evaluate(
    bundle: &ModelBundle,
    model_hash: &str,
    test: &LabeledDataset,
    test_name: &str,
    threshold: f64,
    benign_label: &str,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("test set {test_name} is empty")));
    }
    if test.feature_names() != bundle.provenance.feature_names.as_slice() {
        return Err(Error::Provenance(format!(
            "test set {test_name} columns differ from the model's training columns"
        )));
    }
    let kind = bundle.kind();
    let scores = bundle.score_raw(test.features())?;
    let y_pred = predict_binary(kind, &scores, threshold)?;
    let y_true = test.binary_targets(benign_label);
    let labels: Vec<&str> = test.labels().collect();
    let mut report = metrics(&confusion(&y_true, &y_pred)?)?;
    report.model = kind.name().to_string();
    report.test_set = test_name.to_string();
    report.threshold = threshold;
    report.provenance_hash = hash_parts(&[
        model_hash,
        &test.content_hash(),
        &format!("{:016x}", threshold.to_bits()),
    ]);
    report.per_class_accuracy = per_class_accuracy(&labels, &y_pred, benign_label)?;
    Ok(report)
}

/// `epoch,train_loss,val_loss` rows.
pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for (i, (t, v)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
        let _ = writeln!(out, "{i},{t},{v}");
    }
    out
}

/// Ordered key/value record of a run. Two runs with the same config and
/// dataset agree on every entry except the timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn manifest_hash(&self) -> String {
        let flat: Vec<String> = self.entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let refs: Vec<&str> = flat.iter().map(String::as_str).collect();
        hash_parts(&refs)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "manifest_hash = {}", self.manifest_hash());
        let _ = writeln!(out, "started_unix = {}", self.started_unix);
        let _ = writeln!(out, "finished_unix = {}", self.finished_unix);
        out
    }
}

pub struct ModelArtifact {
    pub kind: DetectorKind,
    pub trained: TrainedDetector,
    pub bytes: Vec<u8>,
    pub hash: String,
}

pub struct RunOutcome {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub clean_report: Option<CleanReport>,
    pub split: SplitBundle,
    pub models: Vec<ModelArtifact>,
    pub reports: Vec<MetricsReport>,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.reports)
    }

    pub fn per_class_csv(&self, test_set: &str) -> String {
        let group: Vec<MetricsReport> = self
            .reports
            .iter()
            .filter(|r| r.test_set == test_set)
            .cloned()
            .collect();
        per_class_csv(&group)
    }

    pub fn tables(&self) -> String {
        render_tables(&self.reports)
    }

    pub fn report(&self, model: DetectorKind, test_set: &str) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|r| r.model == model.name() && r.test_set == test_set)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub const TEST_SETS: [&str; 2] = ["overall_test", "unknown_test"];

/// Runs the whole pipeline in memory.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started_unix = unix_now();
    let (dataset, clean_report) = load_data(&cfg.data)?;
    let dataset_hash = dataset.content_hash();
    let split = plan_and_materialize(&dataset, &cfg.split)?;
    for w in &split.provenance.warnings {
        log::warn!("{w}");
    }

    let shared = if cfg.shared_scaler {
        Some(fit_scaler(split.supervised_train.data.features())?)
    } else {
        None
    };
    let mut models = Vec::new();
    for &kind in &cfg.detectors {
        let name = training_subset(kind);
        let subset = if kind.is_supervised() {
            &split.supervised_train
        } else {
            &split.benign_train
        };
        log::info!("training {} on {name} ({} rows)", kind.name(), subset.len());
        let trained = train_detector(kind, &subset.data, name, cfg, shared.as_ref())?;
        let bytes = trained.bundle.to_bytes()?;
        let hash = file_hash(&bytes);
        models.push(ModelArtifact {
            kind,
            trained,
            bytes,
            hash,
        });
    }

    let mut reports = Vec::new();
    for test_name in TEST_SETS {
        let test = if test_name == "overall_test" {
            &split.overall_test
        } else {
            &split.unknown_test
        };
        for m in &models {
            let threshold = cfg.thresholds.for_kind(m.kind);
            reports.push(evaluate(
                &m.trained.bundle,
                &m.hash,
                &test.data,
                test_name,
                threshold,
                &cfg.split.benign_label,
            )?);
        }
    }

    let mut entries = BTreeMap::new();
    entries.insert("tool_version".to_string(), TOOL_VERSION.to_string());
    entries.insert("config_hash".to_string(), hash_parts(&[&cfg.to_toml()?]));
    entries.insert("dataset_hash".to_string(), dataset_hash.clone());
    entries.insert("split_hash".to_string(), split.content_hash());
    for (name, subset) in split.subsets() {
        entries.insert(format!("split.{name}.hash"), subset.data.content_hash());
        entries.insert(format!("split.{name}.rows"), subset.len().to_string());
    }
    for m in &models {
        entries.insert(format!("model.{}.hash", m.kind.name()), m.hash.clone());
        entries.insert(
            format!("model.{}.scaler_hash", m.kind.name()),
            m.trained.bundle.scaler.content_hash(),
        );
    }
    let metrics_text = metrics_csv(&reports);
    entries.insert("report.metrics.hash".to_string(), hash_parts(&[&metrics_text]));

    Ok(RunOutcome {
        config: cfg.clone(),
        dataset_hash,
        clean_report,
        split,
        models,
        reports,
        manifest: RunManifest {
            entries,
            started_unix,
            finished_unix: unix_now(),
        },
    })
}

/// Writes a split bundle as four CSVs plus `manifest.txt` under `dir`.
pub fn write_split(split: &SplitBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, subset) in split.subsets() {
        subset
            .data
            .write_csv(BufWriter::new(File::create(dir.join(format!("{name}.csv")))?))?;
    }
    fs::write(dir.join("manifest.txt"), split.manifest())?;
    Ok(())
}

/// Output layout: `config.toml`, `manifest.txt`, `split/`, `models/`,
/// `reports/`.
pub fn write_outcome(outcome: &RunOutcome, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    fs::create_dir_all(out)?;
    let split_dir = out.join("split");
    write_split(&outcome.split, &split_dir)?;
    written.push(split_dir);

    let model_dir = out.join("models");
    fs::create_dir_all(&model_dir)?;
    for m in &outcome.models {
        let stem = m.kind.slug();
        let path = model_dir.join(format!("{stem}.model"));
        fs::write(&path, &m.bytes)?;
        written.push(path);
        if let Some(h) = &m.trained.history {
            let path = model_dir.join(format!("{stem}_history.csv"));
            fs::write(&path, history_csv(h))?;
            written.push(path);
        }
    }

    let report_dir = out.join("reports");
    fs::create_dir_all(&report_dir)?;
    let mut files = vec![
        ("metrics.csv".to_string(), outcome.metrics_csv()),
        ("tables.txt".to_string(), outcome.tables()),
    ];
    for t in TEST_SETS {
        files.push((format!("per_class_{t}.csv"), outcome.per_class_csv(t)));
    }
    if let Some(r) = &outcome.clean_report {
        files.push(("clean_report.txt".to_string(), r.to_string()));
    }
    for (name, text) in files {
        let path = report_dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
    }

    let config_path = out.join("config.toml");
    fs::write(&config_path, outcome.config.to_toml()?)?;
    written.push(config_path);
    let manifest_path = out.join("manifest.txt");
    fs::write(&manifest_path, outcome.manifest.render())?;
    written.push(manifest_path);
    Ok(written)
}
