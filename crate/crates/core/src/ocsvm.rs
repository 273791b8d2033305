//! ν-parameterized one-class SVM with an RBF kernel.
//!
//! The dual is solved in the `sum(alpha) = 1` scaling:
//!
//! ```text
//! min 1/2 a'Qa   s.t.  0 <= a_i <= 1/(nu n),  sum_i a_i = 1,   Q_ij = K(x_i, x_j)
//! ```
//!
//! by SMO on the maximal violating pair. With gradient `G = Qa` the decision
//! value of a training point is `G_i - rho`; optimality means every `G_i` of
//! a point that can still grow is at least every `G_j` of a point that can
//! still shrink.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Value(f64),
    Named(GammaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRule {
    Scale,
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::Named(GammaRule::Scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcsvmConfig {
    pub nu: f64,
    pub gamma: Gamma,
    pub tol: f64,
    pub max_iter: usize,
    /// Kernel cache budget in bytes; the full matrix is cached when it fits.
    pub cache_bytes: usize,
    pub seed: u64,
}

impl Default for OcsvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.05,
            gamma: Gamma::default(),
            tol: 1e-3,
            max_iter: 10_000_000,
            cache_bytes: 1 << 30,
            seed: 42,
        }
    }
}

impl OcsvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("tol and max_iter must be positive".into()));
        }
        Ok(())
    }
}

pub fn squared_distance(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-gamma * ||x - y||^2)`.
pub fn rbf_kernel(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    Ok((-gamma * squared_distance(x, y)).exp())
}

/// `1 / (d * var(X))` with the variance pooled over every entry.
/// A zero variance falls back to `1 / d`.
pub fn gamma_scale(x: ArrayView2<'_, f64>) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyDataset("gamma needs a non-empty matrix".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let d = x.ncols() as f64;
    if var > 0.0 {
        Ok(1.0 / (d * var))
    } else {
        log::warn!("constant training matrix; using gamma = 1/d");
        Ok(1.0 / d)
    }
}

/// Kernel rows on demand, fully cached when the budget allows.
struct KernelRows<'a> {
    x: ArrayView2<'a, f64>,
    gamma: f64,
    full: Option<Array2<f64>>,
    cache: HashMap<usize, (u64, Vec<f64>)>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelRows<'a> {
    fn new(x: ArrayView2<'a, f64>, gamma: f64, cache_bytes: usize) -> Self {
        let n = x.nrows();
        let row_bytes = n * std::mem::size_of::<f64>();
        let full = (n.saturating_mul(row_bytes) <= cache_bytes).then(|| {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| Self::compute(x, gamma, i))
                .collect();
            Array2::from_shape_vec((n, n), rows.concat()).expect("square kernel")
        });
        Self {
            x,
            gamma,
            full,
            cache: HashMap::new(),
            capacity: (cache_bytes / row_bytes.max(1)).max(2),
            clock: 0,
        }
    }

    fn compute(x: ArrayView2<'_, f64>, gamma: f64, i: usize) -> Vec<f64> {
        let xi = x.row(i);
        (0..x.nrows())
            .into_par_iter()
            .map(|j| (-gamma * squared_distance(xi, x.row(j))).exp())
            .collect()
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if let Some(full) = &self.full {
            return full.row(i).to_slice().expect("standard layout");
        }
        self.clock += 1;
        let clock = self.clock;
        if !self.cache.contains_key(&i) && self.cache.len() >= self.capacity {
            let oldest = *self
                .cache
                .iter()
                .min_by_key(|(_, (t, _))| *t)
                .map(|(k, _)| k)
                .expect("non-empty cache");
            self.cache.remove(&oldest);
        }
        let (x, gamma) = (self.x, self.gamma);
        let entry = self
            .cache
            .entry(i)
            .or_insert_with(|| (0, Self::compute(x, gamma, i)));
        entry.0 = clock;
        &entry.1
    }

    fn pair(&mut self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let ri = self.row(i).to_vec();
        let rj = self.row(j).to_vec();
        (ri, rj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcsvmModel {
    /// Training rows with `alpha > 0`.
    pub support_vectors: Array2<f64>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub n_train: usize,
    pub iterations: usize,
    /// Maximal KKT violation at return.
    pub kkt_residual: f64,
}

/// Full dual solution, before support-vector extraction.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub gradient: Vec<f64>,
    pub rho: f64,
    pub upper_bound: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Largest `G_low - G_up` over the feasible directions, with the indices
/// achieving it.
fn max_violation(alphas: &[f64], grad: &[f64], c: f64) -> (f64, Option<usize>, Option<usize>) {
    let mut up: Option<usize> = None;
    let mut low: Option<usize> = None;
    for t in 0..alphas.len() {
        if alphas[t] < c && up.is_none_or(|u| grad[t] < grad[u]) {
            up = Some(t);
        }
        if alphas[t] > 0.0 && low.is_none_or(|l| grad[t] > grad[l]) {
            low = Some(t);
        }
    }
    match (up, low) {
        (Some(i), Some(j)) => (grad[j] - grad[i], up, low),
        _ => (0.0, up, low),
    }
}

/// `rho` as the mean gradient over free alphas; without any, the midpoint of
/// the feasible interval.
pub(crate) fn recover_rho(alphas: &[f64], grad: &[f64], c: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..alphas.len() {
        if alphas[t] > 0.0 && alphas[t] < c {
            sum += grad[t];
            count += 1;
        } else if alphas[t] == 0.0 {
            ub = ub.min(grad[t]);
        } else {
            lb = lb.max(grad[t]);
        }
    }
    if count > 0 {
        sum / count as f64
    } else if ub.is_finite() && lb.is_finite() {
        0.5 * (ub + lb)
    } else if ub.is_finite() {
        ub
    } else {
        lb
    }
}

/// Solves the one-class dual on `x` for a fixed `gamma`.
pub fn solve_dual(x: ArrayView2<'_, f64>, nu: f64, gamma: f64, cfg: &OcsvmConfig) -> Result<DualSolution> {
    let n = x.nrows();
    let c = 1.0 / (nu * n as f64);
    let mut kernel = KernelRows::new(x, gamma, cfg.cache_bytes);

    // Feasible start: the first floor(nu n) alphas at the bound, the
    // remainder of the unit mass on the next one.
    let mut alphas = vec![0.0; n];
    let mut mass = 1.0;
    for a in alphas.iter_mut() {
        if mass <= 0.0 {
            break;
        }
        *a = c.min(mass);
        mass -= *a;
    }
    let mut grad = vec![0.0; n];
    for t in 0..n {
        if alphas[t] > 0.0 {
            let row = kernel.row(t);
            for (g, k) in grad.iter_mut().zip(row) {
                *g += alphas[t] * k;
            }
        }
    }

    let mut iterations = 0;
    let residual = loop {
        let (violation, up, low) = max_violation(&alphas, &grad, c);
        if violation <= cfg.tol {
            break violation;
        }
        if iterations >= cfg.max_iter {
            return Err(Error::Convergence {
                iterations,
                residual: violation,
            });
        }
        iterations += 1;
        let (i, j) = (up.unwrap(), low.unwrap());
        let (ki, kj) = kernel.pair(i, j);
        let eta = (ki[i] + kj[j] - 2.0 * ki[j]).max(1e-12);
        let step = ((grad[j] - grad[i]) / eta).min(c - alphas[i]).min(alphas[j]);
        alphas[i] += step;
        alphas[j] -= step;
        // Snap to the bounds so the active sets stay exact.
        if c - alphas[i] <= 1e-15 * c {
            alphas[i] = c;
        }
        if alphas[j] <= 1e-15 * c {
            alphas[j] = 0.0;
        }
        for ((g, a), b) in grad.iter_mut().zip(&ki).zip(&kj) {
            *g += step * (a - b);
        }
    };

    let rho = recover_rho(&alphas, &grad, c);
    Ok(DualSolution {
        alphas,
        gradient: grad,
        rho,
        upper_bound: c,
        iterations,
        kkt_residual: residual,
    })
}

/// Fits on benign-only, already-scaled training rows.
pub fn fit_ocsvm(x: ArrayView2<'_, f64>, cfg: &OcsvmConfig) -> Result<OcsvmModel> {
    cfg.validate()?;
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("one-class SVM needs at least two rows".into()));
    }
    let gamma = match cfg.gamma {
        Gamma::Value(g) => g,
        Gamma::Named(GammaRule::Scale) => gamma_scale(x)?,
    };
    let sol = solve_dual(x, cfg.nu, gamma, cfg)?;
    let support: Vec<usize> = (0..x.nrows()).filter(|&i| sol.alphas[i] > 0.0).collect();
    Ok(OcsvmModel {
        support_vectors: x.select(Axis(0), &support),
        alphas: support.iter().map(|&i| sol.alphas[i]).collect(),
        rho: sol.rho,
        gamma,
        nu: cfg.nu,
        n_train: x.nrows(),
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
    })
}

impl OcsvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.ncols()
    }

    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.n_train as f64)
    }

    /// `sum_i alpha_i K(sv_i, x) - rho` per row; negative means anomalous.
    pub fn decision_function(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|r| {
                let row = x.row(r);
                self.support_vectors
                    .outer_iter()
                    .zip(&self.alphas)
                    .map(|(sv, a)| a * (-self.gamma * squared_distance(sv, row)).exp())
                    .sum::<f64>()
                    - self.rho
            })
            .collect())
    }
}

impl Detector for OcsvmModel {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Ocsvm
    }

    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.decision_function(x)
    }
}
