//! Oracle, gradient, ν-property and determinism suites behind `flowgate bench`.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::cnn::{Cnn1DModel, CnnArchitecture, ConvBlockSpec};
use crate::error::Result;
use crate::lof::{fit_lof, LofConfig};
use crate::loss::{bce_grad_logits, bce_loss, focal_grad_logits, focal_loss, FocalLossConfig};
use crate::mlp::MlpModel;
use crate::model_io::ModelBundle;
use crate::ocsvm::{fit_ocsvm, gamma_scale, OcsvmConfig};
use crate::oracle::{finite_diff_grad, lof_bruteforce, ocsvm_qp_oracle, qp_decision, rbf_matrix, relative_error};
use crate::pipeline::{run, PresetConfig, RunConfig, SynthPreset};
use crate::rng::SplitMix64;
use crate::synth::SynthConfig;
use crate::train::Trainable;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {} [{:.1}s] {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

/// Problem sizes; `quick` shrinks them without loosening any bar.
#[derive(Debug, Clone, Copy)]
pub struct BenchSizes {
    pub lof_instances: usize,
    pub ocsvm_blobs: u64,
    pub nu_rows: usize,
    pub gradient_seeds: u64,
    pub loss_batches: usize,
    pub directional_dim: usize,
}

impl BenchSizes {
    pub fn full() -> Self {
        Self {
            lof_instances: 20,
            ocsvm_blobs: 10,
            nu_rows: 1000,
            gradient_seeds: 5,
            loss_batches: 100,
            directional_dim: 16,
        }
    }

    pub fn quick() -> Self {
        Self {
            lof_instances: 4,
            ocsvm_blobs: 3,
            nu_rows: 400,
            gradient_seeds: 2,
            loss_batches: 20,
            directional_dim: 16,
        }
    }
}

fn gaussian(n: usize, d: usize, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn lof_oracle(instances: usize) -> SuiteResult {
    timed("lof-oracle", || {
        let mut rng = SplitMix64::keyed(1, "bench-lof");
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = 20 + rng.below(281) as usize;
            let d = 1 + rng.below(8) as usize;
            let train = gaussian(n, d, &mut rng);
            let query = gaussian(30, d, &mut rng);
            for k in [2, 5, 80.min(n - 1)] {
                let model = fit_lof(train.view(), &LofConfig { k, ..LofConfig::default() })?;
                let ours = model.score_samples(query.view())?;
                let oracle = lof_bruteforce(train.view(), query.view(), k)?;
                for (a, b) in ours.iter().zip(&oracle) {
                    let gap = if a == b { 0.0 } else { (a - b).abs() };
                    worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
                }
            }
        }
        Ok((worst < 1e-9, format!("{instances} instances, max |delta| {worst:.2e}")))
    })
}

pub fn ocsvm_oracle(blobs: u64) -> SuiteResult {
    timed("ocsvm-oracle", || {
        let cfg = OcsvmConfig {
            tol: 1e-4,
            ..OcsvmConfig::default()
        };
        let mut worst = 0.0f64;
        for seed in 0..blobs {
            let mut rng = SplitMix64::keyed(seed, "bench-ocsvm");
            let x = gaussian(50, 3, &mut rng);
            let probes = gaussian(20, 3, &mut rng) * 1.5;
            let gamma = gamma_scale(x.view())?;
            let model = fit_ocsvm(x.view(), &cfg)?;
            let oracle = ocsvm_qp_oracle(&rbf_matrix(x.view(), gamma), cfg.nu)?;
            let ours = model.decision_function(probes.view())?;
            for (a, b) in ours.iter().zip(qp_decision(x.view(), &oracle, gamma, probes.view())) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst < 1e-3, format!("{blobs} blobs, max |delta f| {worst:.2e}")))
    })
}

pub fn nu_property(rows: usize) -> SuiteResult {
    timed("nu-property", || {
        let mut rng = SplitMix64::keyed(7, "bench-nu");
        let x = gaussian(rows, 3, &mut rng);
        let cfg = OcsvmConfig::default();
        let model = fit_ocsvm(x.view(), &cfg)?;
        let f = model.decision_function(x.view())?;
        let frac = f.iter().filter(|v| **v < 0.0).count() as f64 / rows as f64;
        let sum: f64 = model.alphas.iter().sum();
        let ok = frac <= cfg.nu + 2.0 / (rows as f64).sqrt()
            && model.kkt_residual <= cfg.tol
            && (sum - 1.0).abs() < 1e-9;
        Ok((
            ok,
            format!(
                "n={rows}: outlier fraction {frac:.3}, KKT {:.2e}, |sum a - 1| {:.1e}",
                model.kkt_residual,
                (sum - 1.0).abs()
            ),
        ))
    })
}

fn randomized<M: Trainable>(mut model: M, rng: &mut SplitMix64) -> M {
    let theta: Vec<f64> = model
        .flat_params()
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.5 * z
        })
        .collect();
    model.set_flat_params(&theta);
    model
}

fn worst_relative<M: Trainable>(model: &M, analytic: &[f64], loss: impl Fn(&M) -> Result<f64>) -> Result<f64> {
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p);
            loss(&m).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        &model.flat_params(),
        1e-5,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(analytic
        .iter()
        .zip(&numeric?)
        .map(|(a, n)| relative_error(*a, *n, 1e-6))
        .fold(0.0, f64::max))
}

pub fn gradients(seeds: u64) -> SuiteResult {
    timed("gradients", || {
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
        let y: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
        let (mut mlp_worst, mut cnn_worst) = (0.0f64, 0.0f64);
        for seed in 0..seeds {
            let mut rng = SplitMix64::keyed(seed, "bench-gradients");
            let x = gaussian(12, 4, &mut rng);
            let mlp = randomized(MlpModel::new(4, &[5, 3], seed), &mut rng);
            let (_, g) = mlp.loss_and_grad(x.view(), &y)?;
            mlp_worst = mlp_worst.max(worst_relative(&mlp, &g, |m| Ok(m.loss_and_grad(x.view(), &y)?.0))?);

            let x = gaussian(12, 16, &mut rng);
            let cnn = randomized(Cnn1DModel::new(16, &arch, FocalLossConfig::default(), seed)?, &mut rng);
            let (_, g) = cnn.loss_and_grad(x.view(), &y, None)?;
            cnn_worst = cnn_worst.max(worst_relative(&cnn, &g, |m| Ok(m.loss_and_grad(x.view(), &y, None)?.0))?);
        }
        Ok((
            mlp_worst < 1e-4 && cnn_worst < 1e-4,
            format!("{seeds} seeds, MLP max rel err {mlp_worst:.2e}, CNN max rel err {cnn_worst:.2e}"),
        ))
    })
}

pub fn loss_identities(batches: usize) -> SuiteResult {
    timed("loss-identities", || {
        let focal = FocalLossConfig {
            gamma: 0.0,
            alpha: 0.5,
            benign_weight: 1.0,
            malicious_weight: 1.0,
        };
        let mut rng = SplitMix64::keyed(6, "bench-loss");
        let mut worst = 0.0f64;
        for _ in 0..batches {
            let n = 1 + rng.below(64) as usize;
            let y: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            let p: Vec<f64> = (0..n).map(|_| 0.001 + 0.998 * rng.next_f64()).collect();
            worst = worst.max((focal_loss(&y, &p, &focal)? - 0.5 * bce_loss(&y, &p)?).abs());
            for (a, b) in focal_grad_logits(&y, &p, &focal).iter().zip(bce_grad_logits(&y, &p)) {
                worst = worst.max((a - 0.5 * b).abs());
            }
        }
        let ln2 = (bce_loss(&[1], &[0.5])? - std::f64::consts::LN_2).abs();
        Ok((
            worst < 1e-12 && ln2 < 1e-12,
            format!("{batches} batches, max gap {worst:.1e}, |BCE(1, 0.5) - ln 2| {ln2:.1e}"),
        ))
    })
}

/// Two seeded synthetic runs must agree on every report and model byte, and
/// every written model must load back to identical scores.
pub fn determinism(dim: usize, quick: bool) -> SuiteResult {
    timed("determinism", || {
        let mut cfg = RunConfig::default();
        cfg.data.preset = Some(PresetConfig {
            name: SynthPreset::Directional,
            d: dim,
            seed: 42,
        });
        cfg.split.unknown_labels = SynthConfig::directional(dim, 42).unknown_labels();
        if quick {
            cfg.quick();
        }
        let a = run(&cfg)?;
        let b = run(&cfg)?;
        let same_reports = a.metrics_csv() == b.metrics_csv() && a.tables() == b.tables();
        let same_models = a.models.iter().zip(&b.models).all(|(x, y)| x.bytes == y.bytes);
        let mut reload_ok = true;
        let probe = a.split.overall_test.data.features();
        for m in &a.models {
            let back = ModelBundle::from_bytes(&m.bytes)?;
            reload_ok &= back.score_raw(probe)? == m.trained.bundle.score_raw(probe)?;
        }
        Ok((
            same_reports && same_models && reload_ok,
            format!("reports equal: {same_reports}, models equal: {same_models}, reloaded scores equal: {reload_ok}"),
        ))
    })
}

pub fn run_all(quick: bool) -> Vec<SuiteResult> {
    let s = if quick { BenchSizes::quick() } else { BenchSizes::full() };
    vec![
        lof_oracle(s.lof_instances),
        ocsvm_oracle(s.ocsvm_blobs),
        nu_property(s.nu_rows),
        gradients(s.gradient_seeds),
        loss_identities(s.loss_batches),
        determinism(s.directional_dim, quick),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        let s = BenchSizes::quick();
        for r in [
            lof_oracle(s.lof_instances),
            ocsvm_oracle(s.ocsvm_blobs),
            nu_property(s.nu_rows),
            gradients(s.gradient_seeds),
            loss_identities(s.loss_batches),
        ] {
            assert!(r.passed, "{r}");
        }
    }
}
