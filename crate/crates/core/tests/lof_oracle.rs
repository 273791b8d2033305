use flowgate::lof::{fit_lof, LofConfig};
use flowgate::oracle::lof_bruteforce;
use flowgate::rng::SplitMix64;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

fn max_gap(train: &Array2<f64>, query: &Array2<f64>, k: usize, leaf_size: usize) -> f64 {
    let model = fit_lof(train.view(), &LofConfig { k, leaf_size, ..LofConfig::default() }).unwrap();
    let ours = model.score_samples(query.view()).unwrap();
    let oracle = lof_bruteforce(train.view(), query.view(), k).unwrap();
    ours.iter()
        .zip(&oracle)
        .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
        .fold(0.0, f64::max)
}

#[test]
fn indexed_matches_bruteforce_on_random_sets() {
    let mut rng = SplitMix64::new(5);
    let train = gaussian(200, 3, &mut rng);
    let query = gaussian(50, 3, &mut rng) * 2.0;
    for k in [1, 2, 5, 20, 80, 199] {
        assert!(max_gap(&train, &query, k, 80) < 1e-9, "k = {k}");
    }
}

#[test]
fn leaf_size_never_changes_scores() {
    let mut rng = SplitMix64::new(6);
    let train = gaussian(150, 4, &mut rng);
    let query = gaussian(30, 4, &mut rng);
    let a = fit_lof(train.view(), &LofConfig { k: 7, leaf_size: 1, ..LofConfig::default() }).unwrap();
    let b = fit_lof(train.view(), &LofConfig { k: 7, leaf_size: 500, ..LofConfig::default() }).unwrap();
    assert_eq!(a.score_samples(query.view()).unwrap(), b.score_samples(query.view()).unwrap());
}

#[test]
fn integer_grid_with_ties_matches_bruteforce() {
    let train = Array2::from_shape_fn((100, 2), |(i, j)| if j == 0 { (i % 10) as f64 } else { (i / 10) as f64 });
    let query = ndarray::array![[4.0, 4.0], [4.5, 4.5], [12.0, 3.0], [0.0, 0.0]];
    for k in [2, 3, 4, 8] {
        assert!(max_gap(&train, &query, k, 4) < 1e-9, "k = {k}");
    }
}

#[test]
fn duplicated_training_rows_match_bruteforce() {
    let mut rng = SplitMix64::new(8);
    let base = gaussian(40, 2, &mut rng);
    let train = ndarray::concatenate(Axis(0), &[base.view(), base.view(), base.slice(ndarray::s![..10, ..])]).unwrap();
    let query = ndarray::concatenate(Axis(0), &[base.slice(ndarray::s![..5, ..]), gaussian(10, 2, &mut rng).view()]).unwrap();
    for k in [1, 2, 3, 6] {
        assert!(max_gap(&train, &query, k, 8) < 1e-9, "k = {k}");
    }
}

#[test]
fn distant_query_is_outlier() {
    let mut rng = SplitMix64::new(1);
    let train = gaussian(100, 2, &mut rng) * 0.1;
    let query = ndarray::array![[1.0, 0.0]];
    let model = fit_lof(train.view(), &LofConfig { k: 10, ..LofConfig::default() }).unwrap();
    let score = model.score_samples(query.view()).unwrap()[0];
    let oracle = lof_bruteforce(train.view(), query.view(), 10).unwrap()[0];
    assert!(score > 2.0);
    assert!((score - oracle).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_equivalence_holds(n in 10usize..120, d in 1usize..8, k_pick in 0usize..3, seed in 0u64..1000, leaf in 1usize..40) {
        let mut rng = SplitMix64::new(seed);
        let train = gaussian(n, d, &mut rng);
        let query = gaussian(10, d, &mut rng);
        let k = [2, 5, 80.min(n - 1)][k_pick].min(n - 1);
        prop_assert!(max_gap(&train, &query, k, leaf) < 1e-9);
    }
}
