//! One-dimensional convolutional classifier over the feature vector read as a
//! length-`d` single-channel sequence.
//!
//! Activations are kept channels-last (`batch x length x channels`) so that a
//! convolution window over one sample is a contiguous slice; convolutions run
//! as an im2col product.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorKind};
use crate::error::{Error, Result};
use crate::loss::{focal_grad_logits, focal_loss, sigmoid, FocalLossConfig};
use crate::mlp::{dense_backward, relu_inplace, DenseLayer};
use crate::rng::SplitMix64;
use crate::train::{self, LoopConfig, TrainHistory, Trainable};

/// Valid (unpadded) 1-D cross-correlation: `out[t] = sum_k x[t+k] w[k] + b`.
pub fn conv1d(x: &[f64], w: &[f64], b: f64) -> Result<Vec<f64>> {
    if w.is_empty() || w.len() > x.len() {
        return Err(Error::InvalidInput(format!(
            "kernel length {} must be in 1..={}",
            w.len(),
            x.len()
        )));
    }
    Ok(x
        .windows(w.len())
        .map(|win| win.iter().zip(w).map(|(a, k)| a * k).sum::<f64>() + b)
        .collect())
}

/// `out[t] = max_{0<=k<P} z[t*S + k]`.
pub fn maxpool1d(z: &[f64], size: usize, stride: usize) -> Result<Vec<f64>> {
    let n = pooled_len(z.len(), size, stride)?;
    Ok((0..n)
        .map(|t| {
            z[t * stride..t * stride + size]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

pub fn pooled_len(len: usize, size: usize, stride: usize) -> Result<usize> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidInput("pool size and stride must be positive".into()));
    }
    if len < size {
        return Err(Error::InvalidInput(format!(
            "sequence of length {len} is shorter than pool size {size}"
        )));
    }
    Ok((len - size) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub stride: usize,
}

impl ConvBlockSpec {
    /// Sequence length after conv (valid) and pooling.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.kernel > len {
            return Err(Error::InvalidInput(format!(
                "kernel {} does not fit a sequence of length {len}",
                self.kernel
            )));
        }
        pooled_len(len - self.kernel + 1, self.pool, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnArchitecture {
    pub blocks: Vec<ConvBlockSpec>,
    /// Width of the ReLU dense layer before the output; 0 omits it.
    pub dense_units: usize,
    pub dropout: f64,
}

impl Default for CnnArchitecture {
    fn default() -> Self {
        Self {
            blocks: vec![
                ConvBlockSpec {
                    filters: 32,
                    kernel: 3,
                    pool: 2,
                    stride: 2,
                },
                ConvBlockSpec {
                    filters: 64,
                    kernel: 3,
                    pool: 2,
                    stride: 2,
                },
            ],
            dense_units: 64,
            dropout: 0.3,
        }
    }
}

impl CnnArchitecture {
    /// `(length, channels)` entering each block, then the final pair.
    pub fn shapes(&self, input_len: usize) -> Result<Vec<(usize, usize)>> {
        let mut shapes = vec![(input_len, 1)];
        let mut len = input_len;
        for b in &self.blocks {
            if b.filters == 0 {
                return Err(Error::Config("conv blocks need at least one filter".into()));
            }
            len = b.output_len(len)?;
            shapes.push((len, b.filters));
        }
        Ok(shapes)
    }

    pub fn validate(&self, input_len: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        self.shapes(input_len).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub architecture: CnnArchitecture,
    pub focal: FocalLossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            architecture: CnnArchitecture::default(),
            focal: FocalLossConfig::default(),
            learning_rate: 0.001,
            batch_size: 512,
            max_epochs: 50,
            patience: 3,
            validation_fraction: 0.2,
            tol: 1e-4,
            seed: 42,
        }
    }
}

impl CnnConfig {
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
pub struct ConvLayer {
    pub spec: ConvBlockSpec,
    pub in_channels: usize,
    /// `filters x (kernel * in_channels)`, inner index `k * in_channels + c`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

struct ConvCache {
    cols: Array2<f64>,
    /// Post-ReLU activations, `batch x conv_len x filters`.
    act: Array3<f64>,
    /// Argmax position (within `act`'s length axis) of every pooled output.
    argmax: Vec<usize>,
}

/// Matrix products with a unit inner or outer dimension may come back in
/// column-major order; the flat-slice code below needs row-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl ConvLayer {
    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (batch, len, ch) = x.dim();
        let k = self.spec.kernel;
        let out_len = len - k + 1;
        let width = k * ch;
        let src = x.as_slice().expect("standard layout");
        let mut cols = Vec::with_capacity(batch * out_len * width);
        for b in 0..batch {
            let base = b * len * ch;
            for t in 0..out_len {
                cols.extend_from_slice(&src[base + t * ch..base + t * ch + width]);
            }
        }
        Array2::from_shape_vec((batch * out_len, width), cols).expect("im2col shape")
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (batch, len, _) = x.dim();
        let conv_len = len - self.spec.kernel + 1;
        let f = self.spec.filters;
        let cols = self.im2col(x);
        let mut z = standard(cols.dot(&self.weights.t()) + &self.bias);
        relu_inplace(&mut z);
        let act = z
            .into_shape_with_order((batch, conv_len, f))
            .expect("conv output shape");

        let (p, st) = (self.spec.pool, self.spec.stride);
        let pooled_len = (conv_len - p) / st + 1;
        let mut pooled = Array3::zeros((batch, pooled_len, f));
        let mut argmax = Vec::with_capacity(batch * pooled_len * f);
        for b in 0..batch {
            for t in 0..pooled_len {
                for c in 0..f {
                    let mut best = t * st;
                    let mut val = act[[b, best, c]];
                    for k in 1..p {
                        let v = act[[b, t * st + k, c]];
                        // strict comparison keeps the first maximal index on ties
                        if v > val {
                            val = v;
                            best = t * st + k;
                        }
                    }
                    pooled[[b, t, c]] = val;
                    argmax.push(best);
                }
            }
        }
        (pooled, ConvCache { cols, act, argmax })
    }

    /// Returns `(dW, db, dx)` given the gradient of the pooled output.
    fn backward(
        &self,
        cache: &ConvCache,
        dpooled: &Array3<f64>,
        input_len: usize,
    ) -> (Array2<f64>, Array1<f64>, Array3<f64>) {
        let (batch, conv_len, f) = cache.act.dim();
        let pooled_len = dpooled.dim().1;
        let mut dact = Array3::<f64>::zeros((batch, conv_len, f));
        let mut idx = 0;
        for b in 0..batch {
            for t in 0..pooled_len {
                for c in 0..f {
                    let pos = cache.argmax[idx];
                    idx += 1;
                    if cache.act[[b, pos, c]] > 0.0 {
                        dact[[b, pos, c]] += dpooled[[b, t, c]];
                    }
                }
            }
        }
        let dz = dact
            .into_shape_with_order((batch * conv_len, f))
            .expect("conv grad shape");
        let dw = dz.t().dot(&cache.cols);
        let db = dz.sum_axis(Axis(0));
        let dcols = standard(dz.dot(&self.weights));

        let ch = self.in_channels;
        let width = self.spec.kernel * ch;
        let mut dx = Array3::<f64>::zeros((batch, input_len, ch));
        {
            let dst = dx.as_slice_mut().expect("standard layout");
            let src = dcols.as_slice().expect("standard layout");
            for b in 0..batch {
                let base = b * input_len * ch;
                for t in 0..conv_len {
                    let row = &src[(b * conv_len + t) * width..(b * conv_len + t + 1) * width];
                    for (d, g) in dst[base + t * ch..base + t * ch + width].iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn1DModel {
    pub architecture: CnnArchitecture,
    pub input_len: usize,
    pub convs: Vec<ConvLayer>,
    /// Dense hidden layer (if any) followed by the single-unit output layer.
    pub dense: Vec<DenseLayer>,
    pub focal: FocalLossConfig,
}

struct ForwardCache {
    convs: Vec<ConvCache>,
    dense_inputs: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers applied to each dense input.
    masks: Vec<Option<Array2<f64>>>,
}

impl Cnn1DModel {
    pub fn new(input_len: usize, arch: &CnnArchitecture, focal: FocalLossConfig, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::keyed(seed, "cnn-init");
        Self::build(input_len, arch, focal, |fan_in, rows, cols| {
            DenseLayer::he_uniform(fan_in, rows, &mut rng)
                .weights
                .into_shape_with_order((rows, cols))
                .expect("init shape")
        })
    }

    fn build(
        input_len: usize,
        arch: &CnnArchitecture,
        focal: FocalLossConfig,
        mut init: impl FnMut(usize, usize, usize) -> Array2<f64>,
    ) -> Result<Self> {
        arch.validate(input_len)?;
        focal.validate()?;
        let shapes = arch.shapes(input_len)?;
        let mut convs = Vec::new();
        for (spec, &(_, in_ch)) in arch.blocks.iter().zip(&shapes) {
            let width = spec.kernel * in_ch;
            convs.push(ConvLayer {
                spec: *spec,
                in_channels: in_ch,
                weights: init(width, spec.filters, width),
                bias: Array1::zeros(spec.filters),
            });
        }
        let (len, ch) = *shapes.last().unwrap();
        let mut sizes = vec![len * ch];
        if arch.dense_units > 0 {
            sizes.push(arch.dense_units);
        }
        sizes.push(1);
        let dense = sizes
            .windows(2)
            .map(|w| DenseLayer {
                weights: init(w[0], w[1], w[0]),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            architecture: arch.clone(),
            input_len,
            convs,
            dense,
            focal,
        })
    }

    pub fn from_flat(
        input_len: usize,
        arch: &CnnArchitecture,
        focal: FocalLossConfig,
        params: &[f64],
    ) -> Result<Self> {
        let mut model = Self::build(input_len, arch, focal, |_, r, c| Array2::zeros((r, c)))?;
        if model.n_params() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.n_params(),
                got: params.len(),
            });
        }
        model.set_flat_params(params);
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.weights.len() + c.bias.len())
            .sum::<usize>()
            + self.dense.iter().map(DenseLayer::n_params).sum::<usize>()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_len {
            return Err(Error::DimensionMismatch {
                expected: self.input_len,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn forward_cache(
        &self,
        x: ArrayView2<'_, f64>,
        mut dropout: Option<&mut SplitMix64>,
    ) -> (Vec<f64>, ForwardCache) {
        let batch = x.nrows();
        let mut a = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch, self.input_len, 1))
            .expect("sequence view");
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (out, cache) = conv.forward(&a);
            conv_caches.push(cache);
            a = out;
        }
        let flat_len = a.dim().1 * a.dim().2;
        let mut h = a.into_shape_with_order((batch, flat_len)).expect("flatten");

        let rate = self.architecture.dropout;
        let last = self.dense.len() - 1;
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        let mut masks = Vec::with_capacity(self.dense.len());
        for (l, layer) in self.dense.iter().enumerate() {
            let mask = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let m = Array2::from_shape_simple_fn(h.dim(), || {
                        if rng.next_f64() < rate {
                            0.0
                        } else {
                            keep
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            let mut z = layer.forward(h.view());
            if l < last {
                relu_inplace(&mut z);
            }
            dense_inputs.push(h);
            h = z;
        }
        (
            h.column(0).to_vec(),
            ForwardCache {
                convs: conv_caches,
                dense_inputs,
                masks,
            },
        )
    }

    fn backward(&self, x_len: usize, cache: &ForwardCache, dlogits: Vec<f64>) -> Vec<f64> {
        let batch = dlogits.len();
        let mut dz = Array2::from_shape_vec((batch, 1), dlogits).expect("column vector");
        let mut dense_grads = Vec::with_capacity(self.dense.len());
        let mut dflat = None;
        for (l, layer) in self.dense.iter().enumerate().rev() {
            let a = &cache.dense_inputs[l];
            let (dw, db, mut da) = dense_backward(layer, a.view(), dz.view());
            dense_grads.push((dw, db));
            if let Some(m) = &cache.masks[l] {
                da *= m;
            }
            if l > 0 {
                ndarray::Zip::from(&mut da).and(a).for_each(|g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = da;
            } else {
                dflat = Some(da);
            }
        }
        dense_grads.reverse();

        let shapes = self
            .architecture
            .shapes(x_len)
            .expect("architecture validated at construction");
        let (out_len, out_ch) = *shapes.last().unwrap();
        let mut dout = standard(dflat.expect("at least one dense layer"))
            .into_shape_with_order((batch, out_len, out_ch))
            .expect("unflatten");
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let (dw, db, dx) = conv.backward(&cache.convs[i], &dout, shapes[i].0);
            conv_grads.push((dw, db));
            dout = dx;
        }
        conv_grads.reverse();

        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in conv_grads.into_iter().chain(dense_grads) {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), 4096) {
            out.extend(self.forward_cache(chunk, None).0);
        }
        Ok(out)
    }

    /// Malicious-class probabilities with dropout disabled.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Mean focal loss and flat gradient. With `dropout` set, masks are drawn
    /// from it; otherwise the network runs in inference mode.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        dropout: Option<&mut SplitMix64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let (logits, cache) = self.forward_cache(x, dropout);
        let p: Vec<f64> = logits.into_iter().map(sigmoid).collect();
        let loss = focal_loss(y, &p, &self.focal)?;
        let dlogits = focal_grad_logits(y, &p, &self.focal);
        Ok((loss, self.backward(self.input_len, &cache, dlogits)))
    }
}

impl Trainable for Cnn1DModel {
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in &self.convs {
            out.extend(c.weights.iter());
            out.extend(c.bias.iter());
        }
        for d in &self.dense {
            d.write_params(&mut out);
        }
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for c in &mut self.convs {
            let nw = c.weights.len();
            c.weights
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = c.bias.len();
            c.bias
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        for d in &mut self.dense {
            offset += d.read_params(&params[offset..]);
        }
    }

    fn batch_loss_grad(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        rng: &mut SplitMix64,
    ) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad(x, y, Some(rng))
    }

    fn eval_loss(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64> {
        focal_loss(y, &self.forward(x)?, &self.focal)
    }
}

impl Detector for Cnn1DModel {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Cnn1d
    }

    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Trains the 1-D CNN on already-scaled features with binary targets.
pub fn train_cnn(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    cfg: &CnnConfig,
) -> Result<(Cnn1DModel, TrainHistory)> {
    train::require_both_classes(y)?;
    let mut model = Cnn1DModel::new(x.ncols(), &cfg.architecture, cfg.focal, cfg.seed)?;
    let history = train::fit(&mut model, x, y, &cfg.loop_config())?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_examples() {
        assert_eq!(
            conv1d(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, -1.0], 0.0).unwrap(),
            vec![-2.0, -2.0]
        );
        assert_eq!(conv1d(&[1.0, 5.0], &[1.0], 0.0).unwrap(), vec![1.0, 5.0]);
        assert!(conv1d(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn pool_examples() {
        assert_eq!(maxpool1d(&[1.0, 3.0, 2.0, 5.0], 2, 2).unwrap(), vec![3.0, 5.0]);
        assert_eq!(maxpool1d(&[1.0, 3.0], 1, 1).unwrap(), vec![1.0, 3.0]);
        assert!(maxpool1d(&[1.0], 0, 1).is_err());
        assert!(maxpool1d(&[1.0], 1, 0).is_err());
        assert!(maxpool1d(&[1.0], 2, 1).is_err());
    }

    #[test]
    fn default_architecture_shapes() {
        let arch = CnnArchitecture::default();
        // 16 -> conv 14 -> pool 7 -> conv 5 -> pool 2
        assert_eq!(arch.shapes(16).unwrap(), vec![(16, 1), (7, 32), (2, 64)]);
        assert!(arch.shapes(8).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let arch = CnnArchitecture::default();
        let m = Cnn1DModel::new(16, &arch, FocalLossConfig::default(), 3).unwrap();
        let again = Cnn1DModel::from_flat(16, &arch, m.focal, &m.flat_params()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn single_sample_matches_reference_ops() {
        // One block with one filter, no dense hidden layer.
        let arch = CnnArchitecture {
            blocks: vec![ConvBlockSpec {
                filters: 1,
                kernel: 3,
                pool: 2,
                stride: 2,
            }],
            dense_units: 0,
            dropout: 0.0,
        };
        let m = Cnn1DModel::new(8, &arch, FocalLossConfig::default(), 11).unwrap();
        let x = array![[0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 0.0, 1.0]];
        let w: Vec<f64> = m.convs[0].weights.iter().copied().collect();
        let conv: Vec<f64> = conv1d(x.row(0).as_slice().unwrap(), &w, m.convs[0].bias[0])
            .unwrap()
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let pooled = maxpool1d(&conv, 2, 2).unwrap();
        let head = &m.dense[0];
        let z: f64 = pooled
            .iter()
            .zip(head.weights.row(0))
            .map(|(a, w)| a * w)
            .sum::<f64>()
            + head.bias[0];
        let logit = m.logits(x.view()).unwrap()[0];
        assert!((logit - z).abs() < 1e-12);
    }

    #[test]
    fn unit_kernel_and_column_major_input() {
        let arch = CnnArchitecture {
            blocks: vec![ConvBlockSpec {
                filters: 3,
                kernel: 1,
                pool: 1,
                stride: 1,
            }],
            dense_units: 2,
            dropout: 0.0,
        };
        let m = Cnn1DModel::new(4, &arch, FocalLossConfig::default(), 3).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 / 7.0 - 1.0);
        let fortran = x.t().as_standard_layout().into_owned();
        let fortran = fortran.t();
        assert!(!fortran.is_standard_layout());
        assert_eq!(m.logits(x.view()).unwrap(), m.logits(fortran).unwrap());
        let y = [0, 1, 0, 1, 1];
        let (_, g) = m.loss_and_grad(fortran, &y, None).unwrap();
        assert_eq!(g.len(), m.n_params());
    }
}
