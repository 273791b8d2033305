use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowgate::bench;
use flowgate::detector::DetectorKind;
use flowgate::eval::{
    metrics_csv, parse_metrics_csv, parse_per_class_csv, per_class_csv, render_metric_rows, render_per_class_rows,
    render_tables, MetricsRow, PerClassRow,
};
use flowgate::flow::{clean, parse_flow_csv, LabeledDataset, DEFAULT_LABEL_COLUMN};
use flowgate::model_io::{file_hash, ModelBundle};
use flowgate::pipeline::{
    self, evaluate, history_csv, train_detector, training_subset, write_outcome, write_split,
    PresetConfig, RunConfig, SynthPreset, TEST_SETS,
};
use flowgate::scaler::fit_scaler;
use flowgate::split::plan_and_materialize;
use flowgate::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;
const EXIT_BENCH_FAILED: u8 = 4;

/// Flow-record anomaly detection: ingest, split, train, evaluate, report.
#[derive(Debug, Parser)]
#[command(name = "flowgate", version)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed for the split, subsampling and every detector.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and clean a flow CSV into a canonical cleaned CSV.
    Ingest {
        input: PathBuf,
        #[arg(long, default_value = DEFAULT_LABEL_COLUMN)]
        label_column: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a cleaned CSV into the four protocol subsets plus a manifest.
    Split {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector on its subset from a split directory.
    Train {
        /// mlp, cnn1d, ocsvm or lof.
        kind: String,
        #[arg(long)]
        split_dir: PathBuf,
        /// Train on this CSV instead of the kind's subset in --split-dir.
        #[arg(long)]
        train_file: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Cap on benign rows for OCSVM and LOF (0 = no cap).
        #[arg(long)]
        subsample: Option<usize>,
        /// Smaller epoch budgets and subsample for smoke runs.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model file on the test subsets of a split directory.
    Eval {
        model: PathBuf,
        #[arg(long)]
        split_dir: PathBuf,
        /// Decision threshold; defaults to the model family's default.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "BENIGN")]
        benign_label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics and per-class CSVs into combined tables.
    Report {
        /// Metrics CSVs (model,test_set,...) and per-class CSVs (class,model,accuracy).
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, gradient, nu-property and determinism suites.
    Bench {
        /// Smaller problem sizes; the pass bars are unchanged.
        #[arg(long)]
        quick: bool,
    },
    /// Full pipeline from one config: split, train, evaluate, report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use a synthetic preset instead of the config's data source.
        #[arg(long, value_parser = ["directional", "table1-replica"])]
        preset: Option<String>,
        /// Feature count for --preset.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Cap on benign rows for OCSVM and LOF (0 = no cap).
        #[arg(long)]
        subsample: Option<usize>,
        /// Smaller epoch budgets and subsample for smoke runs.
        #[arg(long)]
        quick: bool,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Convergence { .. } => EXIT_CONVERGENCE,
        _ => EXIT_DATA,
    }
}

fn read_csv(path: &Path, label_column: &str) -> Result<LabeledDataset, Error> {
    parse_flow_csv(File::open(path)?, label_column)
}

fn ingest(input: &Path, label_column: &str, out: &Path) -> Result<(), Error> {
    let raw = read_csv(input, label_column)?;
    let (cleaned, report) = clean(&raw)?;
    fs::create_dir_all(out)?;
    cleaned.write_csv(BufWriter::new(File::create(out.join("cleaned.csv"))?))?;
    fs::write(out.join("clean_report.txt"), report.to_string())?;
    print!("{report}");
    Ok(())
}

fn split(input: &Path, common: &Common, out: &Path) -> Result<(), Error> {
    let cfg = common.load()?;
    let data = read_csv(input, &cfg.data.label_column)?;
    let bundle = plan_and_materialize(&data, &cfg.split)?;
    for w in &bundle.provenance.warnings {
        log::warn!("{w}");
    }
    write_split(&bundle, out)?;
    print!("{}", bundle.manifest());
    Ok(())
}

/// `key = value` lines of a split manifest.
fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn train(
    kind: &str,
    split_dir: &Path,
    train_file: Option<&Path>,
    common: &Common,
    subsample: Option<usize>,
    quick: bool,
    out: &Path,
) -> Result<(), Error> {
    let kind: DetectorKind = kind.parse()?;
    let mut cfg = common.load()?;
    if quick {
        cfg.quick();
    }
    if let Some(n) = subsample {
        cfg.subsample.benign_rows = n;
    }
    let label = cfg.data.label_column.clone();
    let subset_name = training_subset(kind);
    let (train, name) = match train_file {
        Some(p) => (read_csv(p, &label)?, p.file_stem().map_or("custom".into(), |s| s.to_string_lossy().into_owned())),
        None => (read_csv(&split_dir.join(format!("{subset_name}.csv")), &label)?, subset_name.to_string()),
    };
    let shared = if cfg.shared_scaler {
        let sup = read_csv(&split_dir.join("supervised_train.csv"), &label)?;
        Some(fit_scaler(sup.features())?)
    } else {
        None
    };
    let trained = train_detector(kind, &train, &name, &cfg, shared.as_ref())?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("{}.model", kind.slug()));
    let hash = trained.bundle.save(&path)?;
    if let Some(h) = &trained.history {
        fs::write(out.join(format!("{}_history.csv", kind.slug())), history_csv(h))?;
        log::info!("{} epochs, best epoch {}", h.epochs(), h.best_epoch);
    }
    println!("{} {hash}", path.display());
    Ok(())
}

fn eval(
    model_path: &Path,
    split_dir: &Path,
    threshold: Option<f64>,
    benign_label: &str,
    out: &Path,
) -> Result<(), Error> {
    let bytes = fs::read(model_path)?;
    let bundle = ModelBundle::from_bytes(&bytes)?;
    let model_hash = file_hash(&bytes);
    let manifest = read_manifest(split_dir)?;
    let key = format!("{}.hash", bundle.provenance.training_subset);
    match manifest.get(&key) {
        Some(h) if *h == bundle.provenance.training_hash => {}
        Some(_) => {
            return Err(Error::Provenance(format!(
                "model was trained on a different {} than this split; refusing cross-split evaluation",
                bundle.provenance.training_subset
            )))
        }
        None => {
            return Err(Error::Provenance(format!(
                "split manifest has no {key}; cannot confirm the model's training provenance"
            )))
        }
    }
    let kind = bundle.kind();
    let threshold = threshold.unwrap_or(kind.default_threshold());
    let mut reports = Vec::new();
    for name in TEST_SETS {
        let test = read_csv(&split_dir.join(format!("{name}.csv")), DEFAULT_LABEL_COLUMN)?;
        reports.push(evaluate(&bundle, &model_hash, &test, name, threshold, benign_label)?);
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("metrics_{}.csv", kind.slug())), metrics_csv(&reports))?;
    for r in &reports {
        fs::write(
            out.join(format!("per_class_{}_{}.csv", r.test_set, kind.slug())),
            per_class_csv(std::slice::from_ref(r)),
        )?;
    }
    print!("{}", render_tables(&reports));
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<(), Error> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one CSV".into()));
    }
    let mut metric_rows: Vec<MetricsRow> = Vec::new();
    let mut per_class: BTreeMap<String, Vec<PerClassRow>> = BTreeMap::new();
    for p in inputs {
        let text = fs::read_to_string(p)?;
        if text.starts_with("model,") {
            metric_rows.extend(parse_metrics_csv(&text)?);
        } else {
            let stem = p.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
            let group = TEST_SETS
                .iter()
                .find(|t| stem.contains(*t))
                .map_or(stem.clone(), |t| t.to_string());
            per_class.entry(group).or_default().extend(parse_per_class_csv(&text)?);
        }
    }
    let mut tables = String::new();
    let mut sets: Vec<&str> = Vec::new();
    for r in &metric_rows {
        if !sets.contains(&r.test_set.as_str()) {
            sets.push(&r.test_set);
        }
    }
    for set in sets {
        let group: Vec<MetricsRow> = metric_rows.iter().filter(|r| r.test_set == set).cloned().collect();
        tables.push_str(&render_metric_rows(&format!("Performance on {set}"), &group));
        tables.push('\n');
    }
    for (set, rows) in &per_class {
        tables.push_str(&render_per_class_rows(&format!("Per-class accuracy on {set}"), rows));
        tables.push('\n');
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("tables.txt"), &tables)?;
    print!("{tables}");
    Ok(())
}

fn run_bench(quick: bool) -> Result<bool, Error> {
    let results = bench::run_all(quick);
    for r in &results {
        println!("{r}");
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(
    common: &Common,
    preset: Option<&str>,
    dim: usize,
    subsample: Option<usize>,
    quick: bool,
    out: Option<&Path>,
) -> Result<(), Error> {
    let mut cfg = common.load()?;
    if let Some(p) = preset {
        let name = if p == "directional" {
            SynthPreset::Directional
        } else {
            SynthPreset::Table1Replica
        };
        let preset = PresetConfig {
            name,
            d: dim,
            seed: common.seed.unwrap_or(42),
        };
        if name == SynthPreset::Directional {
            cfg.split.unknown_labels = preset.expand().unknown_labels();
        }
        cfg.data.path = None;
        cfg.data.synthetic = None;
        cfg.data.preset = Some(preset);
    }
    if quick {
        cfg.quick();
    }
    if let Some(n) = subsample {
        cfg.subsample.benign_rows = n;
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out in the config".into()))?;
    let outcome = pipeline::run(&cfg)?;
    write_outcome(&outcome, &out)?;
    print!("{}", outcome.tables());
    println!("manifest_hash = {}", outcome.manifest.manifest_hash());
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("FLOWGATE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("FLOWGATE_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("FLOWGATE_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();

    let result = init_threads().and_then(|()| match &cli.command {
        Command::Ingest {
            input,
            label_column,
            out,
        } => ingest(input, label_column, out).map(|()| true),
        Command::Split { input, common, out } => split(input, common, out).map(|()| true),
        Command::Train {
            kind,
            split_dir,
            train_file,
            common,
            subsample,
            quick,
            out,
        } => train(kind, split_dir, train_file.as_deref(), common, *subsample, *quick, out).map(|()| true),
        Command::Eval {
            model,
            split_dir,
            threshold,
            benign_label,
            out,
        } => eval(model, split_dir, *threshold, benign_label, out).map(|()| true),
        Command::Report { inputs, out } => report(inputs, out).map(|()| true),
        Command::Bench { quick } => run_bench(*quick),
        Command::Run {
            common,
            preset,
            dim,
            subsample,
            quick,
            out,
        } => run(common, preset.as_deref(), *dim, *subsample, *quick, out.as_deref()).map(|()| true),
    });

    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_BENCH_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
