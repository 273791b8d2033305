use flowgate::cnn::{CnnArchitecture, ConvBlockSpec, Cnn1DModel};
use flowgate::loss::FocalLossConfig;
use flowgate::mlp::MlpModel;
use flowgate::oracle::{finite_diff_grad, relative_error};
use flowgate::rng::SplitMix64;
use flowgate::train::Trainable;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn batch(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = SplitMix64::keyed(seed, "batch");
    let x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
    let y = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    (x, y)
}

// Fresh models carry zero biases, which can park a ReLU exactly on its kink
// where the subgradient and central differences legitimately disagree.
// Random parameters keep the check on differentiable points.
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

fn worst<M: Trainable>(model: &M, analytic: &[f64], loss: impl Fn(&M) -> f64) -> f64 {
    let theta = model.flat_params();
    let numeric = finite_diff_grad(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p);
            loss(&m)
        },
        &theta,
        STEP,
    )
    .unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn mlp_4_5_3_1_matches_central_differences() {
    for seed in 0..5 {
        let model = randomized(MlpModel::new(4, &[5, 3], seed), seed);
        let (x, y) = batch(16, 4, seed);
        let (_, analytic) = model.loss_and_grad(x.view(), &y).unwrap();
        assert_eq!(analytic.len(), 4 * 5 + 5 + 5 * 3 + 3 + 3 + 1);
        let err = worst(&model, &analytic, |m| m.loss_and_grad(x.view(), &y).unwrap().0);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

fn toy_architecture() -> CnnArchitecture {
    CnnArchitecture {
        blocks: vec![ConvBlockSpec {
            filters: 4,
            kernel: 3,
            pool: 2,
            stride: 2,
        }],
        dense_units: 6,
        dropout: 0.0,
    }
}

#[test]
fn toy_cnn_matches_central_differences() {
    for seed in 0..5 {
        let model = randomized(
            Cnn1DModel::new(16, &toy_architecture(), FocalLossConfig::default(), seed).unwrap(),
            seed,
        );
        let (x, y) = batch(12, 16, 100 + seed);
        let (_, analytic) = model.loss_and_grad(x.view(), &y, None).unwrap();
        let err = worst(&model, &analytic, |m| m.loss_and_grad(x.view(), &y, None).unwrap().0);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn cnn_without_dense_layer_matches_central_differences() {
    let arch = CnnArchitecture {
        dense_units: 0,
        ..toy_architecture()
    };
    let model = randomized(Cnn1DModel::new(16, &arch, FocalLossConfig::default(), 9).unwrap(), 9);
    let (x, y) = batch(8, 16, 9);
    let (_, analytic) = model.loss_and_grad(x.view(), &y, None).unwrap();
    let err = worst(&model, &analytic, |m| m.loss_and_grad(x.view(), &y, None).unwrap().0);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn two_block_cnn_matches_central_differences() {
    let arch = CnnArchitecture {
        blocks: vec![
            ConvBlockSpec {
                filters: 3,
                kernel: 3,
                pool: 2,
                stride: 2,
            },
            ConvBlockSpec {
                filters: 2,
                kernel: 2,
                pool: 2,
                stride: 1,
            },
        ],
        dense_units: 4,
        dropout: 0.0,
    };
    let model = randomized(Cnn1DModel::new(20, &arch, FocalLossConfig::default(), 4).unwrap(), 4);
    let (x, y) = batch(6, 20, 4);
    let (_, analytic) = model.loss_and_grad(x.view(), &y, None).unwrap();
    let err = worst(&model, &analytic, |m| m.loss_and_grad(x.view(), &y, None).unwrap().0);
    assert!(err < 1e-4, "relative error {err:e}");
}
