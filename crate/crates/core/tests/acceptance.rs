//! Acceptance criteria, one verdict line each.
//!
//! Runs without the libtest harness so every verdict is printed whether it
//! passes or not. A positional argument filters criteria by number.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use flowgate::cnn::{Cnn1DModel, CnnArchitecture, ConvBlockSpec};
use flowgate::detector::DetectorKind;
use flowgate::eval::{metrics, round4, ConfusionMatrix};
use flowgate::lof::{fit_lof, LofConfig};
use flowgate::loss::{bce_grad_logits, bce_loss, focal_grad_logits, focal_loss, FocalLossConfig};
use flowgate::mlp::MlpModel;
use flowgate::ocsvm::{fit_ocsvm, gamma_scale, solve_dual, OcsvmConfig};
use flowgate::oracle::{finite_diff_grad, lof_bruteforce, ocsvm_qp_oracle, qp_decision, rbf_matrix, relative_error};
use flowgate::pipeline::{run, write_outcome, PresetConfig, RunConfig, RunOutcome, SynthPreset};
use flowgate::rng::SplitMix64;
use flowgate::split::{plan_and_materialize, SplitConfig};
use flowgate::synth::{gen_synthetic, SynthConfig};
use flowgate::train::Trainable;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(n: usize, d: usize, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

fn criterion_1() -> Verdict {
    let rows: [(&str, [u64; 4], [&str; 4]); 6] = [
        ("MLP-overall", [110367, 1187, 453433, 11771], ["0.9775", "0.9894", "0.9036", "0.9446"]),
        ("CNN-overall", [110044, 8083, 446537, 12094], ["0.9650", "0.9316", "0.9010", "0.9160"]),
        ("OCSVM-overall", [58427, 31113, 423507, 63711], ["0.8356", "0.6525", "0.4784", "0.5520"]),
        ("MLP-unknown", [2321, 33, 13228, 10940], ["0.5863", "0.9860", "0.1750", "0.2973"]),
        ("CNN-unknown", [2591, 253, 13008, 10670], ["0.5882", "0.9110", "0.1954", "0.3218"]),
        ("OCSVM-unknown", [8623, 882, 12379, 4638], ["0.7919", "0.9072", "0.6503", "0.7575"]),
    ];
    let mut bad = Vec::new();
    for (name, [tp, fp, tn, fn_], want) in rows {
        let m = metrics(&ConfusionMatrix::new(tp, fp, tn, fn_)).map_err(|e| e.to_string())?;
        let got = [round4(m.accuracy), round4(m.precision), round4(m.recall), round4(m.f1)];
        if got != want.map(String::from) {
            bad.push(format!("{name}: got {got:?}, want {want:?}"));
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "6/6 rows exact at 4 d.p.".into() } else { bad.join("; ") })
}

fn criterion_2() -> Verdict {
    let data = gen_synthetic(&SynthConfig::table1_replica(2, 42)).map_err(|e| e.to_string())?;
    let cfg = SplitConfig::default();
    let a = plan_and_materialize(&data, &cfg).map_err(|e| e.to_string())?;
    let b = plan_and_materialize(&data, &cfg).map_err(|e| e.to_string())?;
    let unknown_labels: BTreeSet<&str> = cfg.unknown_labels.iter().map(String::as_str).collect();
    let u = &a.unknown_test.data;
    let malicious = u.labels().filter(|l| *l != cfg.benign_label).count();
    let benign = u.len() - malicious;
    let leaked = a
        .supervised_train
        .data
        .labels()
        .chain(a.benign_train.data.labels())
        .filter(|l| unknown_labels.contains(l))
        .count();
    let same = a.content_hash() == b.content_hash() && a.manifest() == b.manifest();
    check(
        malicious == 13_261 && benign == 13_261 && leaked == 0 && same,
        format!(
            "unknown_test {malicious} malicious + {benign} benign; {leaked} unknown rows in training; repeat hashes identical: {same}"
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = SplitMix64::new(2024);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let n = 20 + rng.below(281) as usize;
        let d = 1 + rng.below(8) as usize;
        let train = gaussian(n, d, &mut rng);
        let query = gaussian(30, d, &mut rng) * 1.5;
        for k in [2, 5, 80.min(n - 1)] {
            let model = fit_lof(train.view(), &LofConfig { k, ..LofConfig::default() }).map_err(|e| e.to_string())?;
            let ours = model.score_samples(query.view()).map_err(|e| e.to_string())?;
            let oracle = lof_bruteforce(train.view(), query.view(), k).map_err(|e| e.to_string())?;
            for (a, b) in ours.iter().zip(&oracle) {
                let gap = if a == b { 0.0 } else { (a - b).abs() };
                if gap.is_nan() || gap >= 1e-9 {
                    return Err(format!("instance {instance} (n={n}, d={d}, k={k}): gap {gap:e}"));
                }
                worst = worst.max(gap);
            }
        }
    }
    Ok(format!("20 instances x 3 k values, max |delta| = {worst:e}"))
}

fn criterion_4() -> Verdict {
    let nu = 0.05;
    let defaults = OcsvmConfig::default();
    // One decade below the default tol so the solution itself is resolved
    // to the 1e-3 agreement bar; the KKT bar is checked at the default.
    let precise = OcsvmConfig { tol: 1e-4, ..defaults.clone() };
    let (mut worst_gap, mut worst_kkt, mut worst_sum) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut rng = SplitMix64::keyed(seed, "blob");
        let x = gaussian(50, 3, &mut rng);
        let probes = gaussian(20, 3, &mut rng) * 1.5;
        let gamma = gamma_scale(x.view()).map_err(|e| e.to_string())?;

        let sol = solve_dual(x.view(), nu, gamma, &defaults).map_err(|e| e.to_string())?;
        worst_kkt = worst_kkt.max(sol.kkt_residual);
        worst_sum = worst_sum.max((sol.alphas.iter().sum::<f64>() - 1.0).abs());
        if sol.alphas.iter().any(|a| *a < 0.0 || *a > sol.upper_bound + 1e-12) {
            return Err(format!("blob {seed}: alpha outside [0, 1/(nu n)]"));
        }

        let model = fit_ocsvm(x.view(), &precise).map_err(|e| e.to_string())?;
        let oracle = ocsvm_qp_oracle(&rbf_matrix(x.view(), gamma), nu).map_err(|e| e.to_string())?;
        let ours = model.decision_function(probes.view()).map_err(|e| e.to_string())?;
        let theirs = qp_decision(x.view(), &oracle, gamma, probes.view());
        for (a, b) in ours.iter().zip(&theirs) {
            worst_gap = worst_gap.max((a - b).abs());
        }
    }

    let mut rng = SplitMix64::keyed(7, "nu-property");
    let big = gaussian(1000, 3, &mut rng);
    let model = fit_ocsvm(big.view(), &defaults).map_err(|e| e.to_string())?;
    let f = model.decision_function(big.view()).map_err(|e| e.to_string())?;
    let frac = f.iter().filter(|v| **v < 0.0).count() as f64 / f.len() as f64;

    check(
        worst_gap < 1e-3 && worst_kkt <= 1e-3 && worst_sum < 1e-9 && (0.02..=0.08).contains(&frac),
        format!(
            "max |delta f| {worst_gap:.3e}, max KKT {worst_kkt:.3e}, max |sum a - 1| {worst_sum:.1e}, outlier fraction {frac:.3}"
        ),
    )
}

fn randomized<M: Trainable>(mut model: M, seed: u64) -> M {
    let mut rng = SplitMix64::keyed(seed, "params");
    let theta: Vec<f64> = model
        .flat_params()
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        })
        .collect();
    model.set_flat_params(&theta);
    model
}

fn max_rel_error<M: Trainable>(model: &M, analytic: &[f64], loss: impl Fn(&M) -> f64) -> f64 {
    let numeric = finite_diff_grad(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p);
            loss(&m)
        },
        &model.flat_params(),
        1e-5,
    )
    .expect("finite loss");
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, 1e-6))
        .fold(0.0, f64::max)
}

fn criterion_5() -> Verdict {
    let arch = CnnArchitecture {
        blocks: vec![ConvBlockSpec {
            filters: 4,
            kernel: 3,
            pool: 2,
            stride: 2,
        }],
        dense_units: 6,
        dropout: 0.0,
    };
    let (mut mlp_worst, mut cnn_worst) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let mut rng = SplitMix64::keyed(seed, "batch");
        let y: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();

        let x = gaussian(12, 4, &mut rng);
        let mlp = randomized(MlpModel::new(4, &[5, 3], seed), seed);
        let (_, g) = mlp.loss_and_grad(x.view(), &y).map_err(|e| e.to_string())?;
        mlp_worst = mlp_worst.max(max_rel_error(&mlp, &g, |m| m.loss_and_grad(x.view(), &y).unwrap().0));

        let x = gaussian(12, 16, &mut rng);
        let cnn = randomized(
            Cnn1DModel::new(16, &arch, FocalLossConfig::default(), seed).map_err(|e| e.to_string())?,
            seed,
        );
        let (_, g) = cnn.loss_and_grad(x.view(), &y, None).map_err(|e| e.to_string())?;
        cnn_worst = cnn_worst.max(max_rel_error(&cnn, &g, |m| m.loss_and_grad(x.view(), &y, None).unwrap().0));
    }
    check(
        mlp_worst < 1e-4 && cnn_worst < 1e-4,
        format!("5 seeds: MLP 4-5-3-1 max rel err {mlp_worst:.2e}, CNN L=16 max rel err {cnn_worst:.2e}"),
    )
}

fn criterion_6() -> Verdict {
    let focal = FocalLossConfig {
        gamma: 0.0,
        alpha: 0.5,
        benign_weight: 1.0,
        malicious_weight: 1.0,
    };
    let mut rng = SplitMix64::new(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(64) as usize;
        let y: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        let p: Vec<f64> = (0..n).map(|_| 0.001 + 0.998 * rng.next_f64()).collect();
        let fl = focal_loss(&y, &p, &focal).map_err(|e| e.to_string())?;
        let bce = bce_loss(&y, &p).map_err(|e| e.to_string())?;
        worst = worst.max((fl - 0.5 * bce).abs());
        let gf = focal_grad_logits(&y, &p, &focal);
        let gb = bce_grad_logits(&y, &p);
        for (a, b) in gf.iter().zip(&gb) {
            worst = worst.max((a - 0.5 * b).abs());
        }
    }
    let ln2 = (bce_loss(&[1], &[0.5]).map_err(|e| e.to_string())? - std::f64::consts::LN_2).abs();
    check(
        worst < 1e-12 && ln2 < 1e-12,
        format!("focal(0, 0.5) vs BCE/2 max gap {worst:.1e} over 100 batches; |BCE(1, 0.5) - ln 2| = {ln2:.1e}"),
    )
}

fn directional_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.preset = Some(PresetConfig {
        name: SynthPreset::Directional,
        d: 16,
        seed: 42,
    });
    cfg.split.unknown_labels = SynthConfig::directional(16, 42).unknown_labels();
    cfg.set_seed(42);
    cfg
}

fn run_with_threads(threads: usize) -> Result<RunOutcome, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| run(&directional_config())).map_err(|e| e.to_string())
}

fn recall(outcome: &RunOutcome, kind: DetectorKind, set: &str) -> f64 {
    outcome.report(kind, set).map_or(f64::NAN, |r| r.recall)
}

fn criterion_7(outcome: &RunOutcome) -> Verdict {
    let overall = "overall_test";
    let unknown = "unknown_test";
    let mlp = (recall(outcome, DetectorKind::Mlp, overall), recall(outcome, DetectorKind::Mlp, unknown));
    let cnn = (recall(outcome, DetectorKind::Cnn1d, overall), recall(outcome, DetectorKind::Cnn1d, unknown));
    let oc = recall(outcome, DetectorKind::Ocsvm, unknown);
    let a = mlp.1 <= mlp.0 - 0.30 && cnn.1 <= cnn.0 - 0.30;
    let b = oc > mlp.1 && oc > cnn.1;
    check(
        a && b,
        format!(
            "recall overall->unknown: MLP {:.4}->{:.4}, CNN {:.4}->{:.4}; OCSVM unknown {:.4}",
            mlp.0, mlp.1, cnn.0, cnn.1, oc
        ),
    )
}

fn report_files(outcome: &RunOutcome) -> Result<Vec<(String, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_outcome(outcome, dir.path()).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for sub in ["reports", "models", "split"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.path().join(sub))
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        entries.sort();
        for p in entries {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), bytes));
        }
    }
    Ok(files)
}

fn criterion_8(first: &RunOutcome, second: &RunOutcome) -> Verdict {
    let a = report_files(first)?;
    let b = report_files(second)?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let manifests = first.manifest.manifest_hash() == second.manifest.manifest_hash();
    check(
        a.len() == b.len() && differing.is_empty() && manifests,
        format!(
            "{} output files compared (1 vs 4 threads), differing: {:?}; manifest hashes equal: {manifests}",
            a.len(),
            differing
        ),
    )
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |n: u32| filter.as_deref().is_none_or(|f| f == n.to_string() || f == format!("criterion_{n}"));
    let mut failures = 0;
    let mut report = |n: u32, title: &str, started: Instant, v: Verdict| {
        let secs = started.elapsed().as_secs_f64();
        match v {
            Ok(d) => println!("criterion {n} PASS [{secs:.1}s] {title}: {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} FAIL [{secs:.1}s] {title}: {d}");
            }
        }
    };

    let simple: [(u32, &str, fn() -> Verdict); 6] = [
        (1, "metric arithmetic anchors", criterion_1),
        (2, "split protocol arithmetic", criterion_2),
        (3, "LOF oracle equivalence", criterion_3),
        (4, "OCSVM correctness", criterion_4),
        (5, "gradient checks", criterion_5),
        (6, "loss identities", criterion_6),
    ];
    for (n, title, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, title, t, f());
        }
    }

    if wanted(7) || wanted(8) {
        let t = Instant::now();
        let runs = run_with_threads(1).and_then(|a| run_with_threads(4).map(|b| (a, b)));
        match runs {
            Ok((single, multi)) => {
                if wanted(7) {
                    report(7, "directional paradigm reproduction", t, criterion_7(&single));
                }
                if wanted(8) {
                    let t8 = Instant::now();
                    report(8, "determinism", t8, criterion_8(&single, &multi));
                }
            }
            Err(e) => {
                for n in [7, 8] {
                    if wanted(n) {
                        report(n, "end-to-end run", t, Err(e.clone()));
                    }
                }
            }
        }
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
