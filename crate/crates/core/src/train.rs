//! Shared mini-batch training loop: Adam, seeded batching, stratified
//! validation hold-out and early stopping on validation loss.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub tol: f64,
    pub seed: u64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "learning rate, batch size, epochs and patience must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

/// A model trainable by [`fit`]: exposes its parameters as one flat vector.
pub trait Trainable: Clone {
    fn flat_params(&self) -> Vec<f64>;

    fn set_flat_params(&mut self, params: &[f64]);

    /// Mean loss and its gradient over one mini-batch in training mode.
    /// `rng` drives any stochastic layers.
    fn batch_loss_grad(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        rng: &mut SplitMix64,
    ) -> Result<(f64, Vec<f64>)>;

    /// Mean loss in inference mode.
    fn eval_loss(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64>;
}

/// Seeded hold-out that keeps the benign/malicious ratio. Returns
/// `(train_rows, validation_rows)`, each sorted.
pub fn stratified_holdout(y: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        SplitMix64::keyed(seed, &format!("validation/{class}")).shuffle(&mut rows);
        let mut n_val = (fraction * rows.len() as f64).floor() as usize;
        if n_val == 0 && rows.len() >= 2 {
            n_val = 1;
        }
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn require_both_classes(y: &[u8]) -> Result<()> {
    let pos = y.iter().filter(|&&v| v == 1).count();
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidInput("targets must be 0 or 1".into()));
    }
    if pos == 0 || pos == y.len() {
        return Err(Error::InvalidInput(
            "supervised training needs both benign and malicious rows".into(),
        ));
    }
    Ok(())
}

/// Trains `model` in place and restores the weights of the best validation epoch.
pub fn fit<M: Trainable>(
    model: &mut M,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    cfg: &LoopConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    require_both_classes(y)?;

    let (train_rows, val_rows) = stratified_holdout(y, cfg.validation_fraction, cfg.seed);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::InvalidInput(
            "too few rows for a training/validation split".into(),
        ));
    }
    let x_val = x.select(Axis(0), &val_rows);
    let y_val: Vec<u8> = val_rows.iter().map(|&i| y[i]).collect();

    let mut params = model.flat_params();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut order_rng = SplitMix64::keyed(cfg.seed, "batches");
    let mut noise_rng = SplitMix64::keyed(cfg.seed, "dropout");

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best = f64::INFINITY;
    let mut best_params = params.clone();
    let mut wait = 0;
    let mut order = train_rows;
    let mut y_batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            y_batch.clear();
            y_batch.extend(batch.iter().map(|&i| y[i]));
            let (loss, grad) = model.batch_loss_grad(xb.view(), &y_batch, &mut noise_rng)?;
            epoch_loss += loss * batch.len() as f64;
            adam.update(&mut params, &grad);
            model.set_flat_params(&params);
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = model.eval_loss(x_val.view(), &y_val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Convergence {
                iterations: epoch + 1,
                residual: val_loss,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        if val_loss < best - cfg.tol {
            best = val_loss;
            best_params.copy_from_slice(&params);
            history.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                history.stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    model.set_flat_params(&best_params);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(0.1, 2);
        for _ in 0..500 {
            let g = p.clone();
            adam.update(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![0.0];
        Adam::new(0.001, 1).update(&mut p, &[123.0]);
        assert!((p[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let y: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let (train, val) = stratified_holdout(&y, 0.2, 42);
        assert_eq!(train.len() + val.len(), 100);
        assert_eq!(val.iter().filter(|&&i| y[i] == 1).count(), 5);
        assert_eq!(val.iter().filter(|&&i| y[i] == 0).count(), 15);
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(stratified_holdout(&y, 0.2, 42), (train, val));
    }

    #[test]
    fn single_class_rejected() {
        assert!(require_both_classes(&[1, 1, 1]).is_err());
        assert!(require_both_classes(&[0, 1]).is_ok());
    }
}
