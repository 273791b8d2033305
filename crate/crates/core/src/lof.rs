//! Local Outlier Factor in novelty mode.
//!
//! Neighborhoods are tie-inclusive: `N_k(x)` holds every training point at
//! distance at most the `k`-th smallest. A training point never counts as
//! its own neighbor; a query is never inserted into the model.
//!
//! When all reachability distances of a point are zero (duplicates) its lrd
//! is `+inf`; in the LOF ratio `inf/inf` counts as 1, `finite/inf` as 0.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorKind, DEFAULT_LOF_THRESHOLD};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofConfig {
    pub k: usize,
    pub threshold: f64,
    pub leaf_size: usize,
}

impl Default for LofConfig {
    fn default() -> Self {
        Self {
            k: 80,
            threshold: DEFAULT_LOF_THRESHOLD,
            leaf_size: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LofModel {
    k: usize,
    tree: KdTree,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

/// `1 / mean(reach-dist)`, `+inf` when the mean is zero.
fn lrd_from(neighbors: &[Neighbor], k_distance: &[f64]) -> f64 {
    let total: f64 = neighbors
        .iter()
        .map(|n| n.distance.max(k_distance[n.index]))
        .sum();
    let mean = total / neighbors.len() as f64;
    if mean > 0.0 {
        1.0 / mean
    } else {
        f64::INFINITY
    }
}

fn lrd_ratio(neighbor: f64, own: f64) -> f64 {
    match (neighbor.is_infinite(), own.is_infinite()) {
        (true, true) => 1.0,
        _ => neighbor / own,
    }
}

pub fn fit_lof(x: ArrayView2<'_, f64>, cfg: &LofConfig) -> Result<LofModel> {
    let n = x.nrows();
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n <= cfg.k {
        return Err(Error::InvalidInput(format!(
            "LOF with k = {} needs more than {} training rows, got {n}",
            cfg.k, cfg.k
        )));
    }
    let tree = KdTree::build(x.to_owned(), cfg.leaf_size)?;
    let neighborhoods: Vec<Vec<Neighbor>> = (0..n)
        .into_par_iter()
        .map(|i| {
            tree.k_nearest_with_ties(tree.points().row(i), cfg.k, Some(i))
                .map(to_neighbors)
        })
        .collect::<Result<_>>()?;
    let k_distance: Vec<f64> = neighborhoods
        .iter()
        .map(|nb| nb.last().expect("k >= 1").distance)
        .collect();
    let lrd = neighborhoods
        .par_iter()
        .map(|nb| lrd_from(nb, &k_distance))
        .collect();
    Ok(LofModel {
        k: cfg.k,
        tree,
        k_distance,
        lrd,
    })
}

fn to_neighbors(found: Vec<(usize, f64)>) -> Vec<Neighbor> {
    found
        .into_iter()
        .map(|(index, d2)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect()
}

impl LofModel {
    /// Rebuilds a model from stored parts; the index is reconstructed.
    pub fn from_parts(
        train: Array2<f64>,
        k: usize,
        leaf_size: usize,
        k_distance: Vec<f64>,
        lrd: Vec<f64>,
    ) -> Result<Self> {
        let n = train.nrows();
        if k_distance.len() != n || lrd.len() != n {
            return Err(Error::ModelFormat(
                "per-point arrays do not match the training rows".into(),
            ));
        }
        if k == 0 || k >= n {
            return Err(Error::ModelFormat(format!("k = {k} invalid for {n} rows")));
        }
        Ok(Self {
            k,
            tree: KdTree::build(train, leaf_size)?,
            k_distance,
            lrd,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn leaf_size(&self) -> usize {
        self.tree.leaf_size()
    }

    pub fn n_train(&self) -> usize {
        self.tree.len()
    }

    pub fn dim(&self) -> usize {
        self.tree.points().ncols()
    }

    pub fn train(&self) -> &Array2<f64> {
        self.tree.points()
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distance
    }

    pub fn training_lrd(&self) -> &[f64] {
        &self.lrd
    }

    fn check_dim(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Tie-inclusive `k` nearest training points of a query, sorted by distance.
    pub fn kneighbors(&self, x: ArrayView1<'_, f64>, k: usize) -> Result<Vec<Neighbor>> {
        self.check_dim(x)?;
        if k == 0 || k >= self.n_train() {
            return Err(Error::InvalidInput(format!(
                "k = {k} must lie in 1..{}",
                self.n_train()
            )));
        }
        Ok(to_neighbors(self.tree.k_nearest_with_ties(x, k, None)?))
    }

    /// Local reachability density of a query.
    pub fn lrd(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let nb = self.kneighbors(x, self.k)?;
        Ok(lrd_from(&nb, &self.k_distance))
    }

    pub fn lof_score(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let nb = self.kneighbors(x, self.k)?;
        let own = lrd_from(&nb, &self.k_distance);
        let total: f64 = nb.iter().map(|n| lrd_ratio(self.lrd[n.index], own)).sum();
        Ok(total / nb.len() as f64)
    }

    pub fn score_samples(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        (0..x.nrows())
            .into_par_iter()
            .map(|i| self.lof_score(x.row(i)))
            .collect()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for v in self
            .train()
            .iter()
            .chain(&self.k_distance)
            .chain(&self.lrd)
        {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Detector for LofModel {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Lof
    }

    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.score_samples(x)
    }
}
