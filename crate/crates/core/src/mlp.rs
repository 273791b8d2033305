//! Fully connected binary classifier: ReLU hidden layers, sigmoid output,
//! binary cross-entropy, trained with Adam and early stopping.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorKind};
use crate::error::{Error, Result};
use crate::loss::{bce_grad_logits, bce_loss, sigmoid};
use crate::rng::SplitMix64;
use crate::train::{self, LoopConfig, TrainHistory, Trainable};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// He-style uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform(input: usize, output: usize, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / input as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self {
            weights: Array2::from_shape_simple_fn((output, input), || dist.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    pub(crate) fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weights.len();
        for (w, s) in self.weights.iter_mut().zip(&src[..nw]) {
            *w = *s;
        }
        for (b, s) in self.bias.iter_mut().zip(&src[nw..]) {
            *b = *s;
        }
        self.n_params()
    }
}

/// Gradients of a dense layer given the upstream gradient `dz` (`batch x out`)
/// and the layer input `a` (`batch x in`). Returns `(dW, db, da)`.
pub(crate) fn dense_backward(
    layer: &DenseLayer,
    a: ArrayView2<'_, f64>,
    dz: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let dw = dz.t().dot(&a);
    let db = dz.sum_axis(Axis(0));
    let da = dz.dot(&layer.weights);
    (dw, db, da)
}

pub(crate) fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![100, 50],
            learning_rate: 0.001,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            validation_fraction: 0.1,
            tol: 1e-4,
            seed: 42,
        }
    }
}

impl MlpConfig {
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            tol: self.tol,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Randomly initialized network `input -> hidden... -> 1`.
    pub fn new(input: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = SplitMix64::keyed(seed, "mlp-init");
        let sizes = Self::chain(input, hidden);
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let sizes = Self::chain(input, hidden);
        Self {
            layers: sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect(),
        }
    }

    fn chain(input: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    /// Layer widths from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(DenseLayer::output_dim));
        sizes
    }

    pub fn from_flat(sizes: &[usize], params: &[f64]) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != 1 {
            return Err(Error::ModelFormat("MLP must end in a single output".into()));
        }
        let mut model = Self::zeros(sizes[0], &sizes[1..sizes.len() - 1]);
        if model.n_params() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.n_params(),
                got: params.len(),
            });
        }
        model.set_flat_params(params);
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Activations of every layer input plus the final logits.
    fn forward_cache(&self, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(a.view());
            if l < last {
                relu_inplace(&mut z);
            }
            inputs.push(a);
            a = z;
        }
        (inputs, a.column(0).to_vec())
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cache(x).1)
    }

    /// Malicious-class probabilities.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Mean BCE and its flat gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let (inputs, logits) = self.forward_cache(x);
        let p: Vec<f64> = logits.iter().copied().map(sigmoid).collect();
        let loss = bce_loss(y, &p)?;
        let dlogits = bce_grad_logits(y, &p);
        Ok((loss, self.backward(&inputs, dlogits)))
    }

    fn backward(&self, inputs: &[Array2<f64>], dlogits: Vec<f64>) -> Vec<f64> {
        let n = dlogits.len();
        let mut dz = Array2::from_shape_vec((n, 1), dlogits).expect("column vector");
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &inputs[l];
            let (dw, db, mut da) = dense_backward(layer, a.view(), dz.view());
            grads.push((dw, db));
            if l > 0 {
                // `a` is a ReLU output, so a > 0 exactly where the unit was active.
                ndarray::Zip::from(&mut da)
                    .and(a)
                    .for_each(|g, &act| {
                        if act <= 0.0 {
                            *g = 0.0;
                        }
                    });
                dz = da;
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat
    }
}

impl Trainable for MlpModel {
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            layer.write_params(&mut out);
        }
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            offset += layer.read_params(&params[offset..]);
        }
    }

    fn batch_loss_grad(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        _rng: &mut SplitMix64,
    ) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad(x, y)
    }

    fn eval_loss(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64> {
        bce_loss(y, &self.forward(x)?)
    }
}

impl Detector for MlpModel {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Mlp
    }

    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Trains an MLP on already-scaled features with binary targets.
pub fn train_mlp(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    cfg: &MlpConfig,
) -> Result<(MlpModel, TrainHistory)> {
    train::require_both_classes(y)?;
    let mut model = MlpModel::new(x.ncols(), &cfg.hidden_sizes, cfg.seed);
    let history = train::fit(&mut model, x, y, &cfg.loop_config())?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_half() {
        let m = MlpModel::zeros(3, &[4]);
        let p = m.forward(array![[1.0, -2.0, 3.0], [0.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn single_unit_sigmoid_limits() {
        let m = MlpModel::from_flat(&[1, 1], &[1.0, 0.0]).unwrap();
        assert_eq!(m.forward(array![[0.0]].view()).unwrap(), vec![0.5]);
        assert!(m.forward(array![[50.0]].view()).unwrap()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let m = MlpModel::zeros(3, &[2]);
        assert!(matches!(
            m.forward(array![[1.0, 2.0]].view()),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn flat_round_trip() {
        let m = MlpModel::new(4, &[5, 3], 9);
        let again = MlpModel::from_flat(&m.layer_sizes(), &m.flat_params()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.layer_sizes(), vec![4, 5, 3, 1]);
    }

    #[test]
    fn single_class_training_rejected() {
        let x = Array2::zeros((10, 2));
        assert!(train_mlp(x.view(), &[1; 10], &MlpConfig::default()).is_err());
    }
}
