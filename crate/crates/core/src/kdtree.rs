//! Exact k-d tree for Euclidean neighbor queries.
//!
//! Every candidate distance is the plain left-to-right sum of squared
//! coordinate differences, so results (including ties) are bit-identical to
//! an exhaustive scan. `leaf_size` only changes speed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::ocsvm::squared_distance;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdTree {
    points: Array2<f64>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

#[derive(PartialEq)]
struct HeapItem(f64);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl KdTree {
    pub fn build(points: Array2<f64>, leaf_size: usize) -> Result<Self> {
        if leaf_size == 0 {
            return Err(Error::Config("leaf_size must be positive".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("k-d tree points must be finite".into()));
        }
        let mut tree = Self {
            perm: (0..points.nrows()).collect(),
            points,
            nodes: Vec::new(),
            leaf_size,
        };
        if !tree.is_empty() {
            tree.build_node(0, tree.len());
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= self.leaf_size {
            return id;
        }
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for dim in 0..self.points.ncols() {
            let (lo, hi) = self.perm[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &i| {
                    let v = self.points[[i, dim]];
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = dim;
            }
        }
        if best_spread <= 0.0 {
            return id;
        }
        let mid = (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[[a, best_dim]]
                .total_cmp(&points[[b, best_dim]])
                .then(a.cmp(&b))
        });
        let value = self.points[[self.perm[start + mid], best_dim]];
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            dim: best_dim,
            value,
            left,
            right,
        };
        id
    }

    /// Squared distance to the `k`-th nearest point, skipping `exclude`.
    pub fn kth_sq_distance(&self, q: ArrayView1<'_, f64>, k: usize, exclude: Option<usize>) -> Result<f64> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k == 0 || k > available {
            return Err(Error::InvalidInput(format!(
                "k = {k} needs between 1 and {available} candidate points"
            )));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, q, k, exclude, &mut heap);
        Ok(heap.peek().expect("k >= 1").0)
    }

    fn knn_node(
        &self,
        node: usize,
        q: ArrayView1<'_, f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d2 = squared_distance(q, self.points.row(i));
                    if heap.len() < k {
                        heap.push(HeapItem(d2));
                    } else if d2 < heap.peek().unwrap().0 {
                        heap.pop();
                        heap.push(HeapItem(d2));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, exclude, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_node(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Every point with squared distance `<= radius_sq`, sorted by
    /// `(distance, index)`.
    pub fn within_sq(&self, q: ArrayView1<'_, f64>, radius_sq: f64, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.range_node(0, q, radius_sq, exclude, &mut out);
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn range_node(
        &self,
        node: usize,
        q: ArrayView1<'_, f64>,
        radius_sq: f64,
        exclude: Option<usize>,
        out: &mut Vec<(usize, f64)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d2 = squared_distance(q, self.points.row(i));
                    if d2 <= radius_sq {
                        out.push((i, d2));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.range_node(near, q, radius_sq, exclude, out);
                if diff * diff <= radius_sq {
                    self.range_node(far, q, radius_sq, exclude, out);
                }
            }
        }
    }

    /// The `k` nearest points plus every point tied with the `k`-th.
    pub fn k_nearest_with_ties(
        &self,
        q: ArrayView1<'_, f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<(usize, f64)>> {
        let kth = self.kth_sq_distance(q, k, exclude)?;
        Ok(self.within_sq(q, kth, exclude))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn brute(points: &Array2<f64>, q: ArrayView1<'_, f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .outer_iter()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(q, p)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let kth = all[k - 1].1;
        all.into_iter().filter(|(_, d)| *d <= kth).collect()
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = SplitMix64::new(5);
        let pts = Array2::from_shape_simple_fn((300, 3), || (rng.next_f64() * 10.0).round() / 2.0);
        for leaf in [1, 4, 80] {
            let tree = KdTree::build(pts.clone(), leaf).unwrap();
            for qi in 0..40 {
                let q = pts.row(qi * 7);
                for k in [1, 3, 10] {
                    assert_eq!(tree.k_nearest_with_ties(q, k, None).unwrap(), brute(&pts, q, k));
                }
            }
        }
    }

    #[test]
    fn k_out_of_range() {
        let tree = KdTree::build(Array2::zeros((3, 2)), 2).unwrap();
        let q = ndarray::array![0.0, 0.0];
        assert!(tree.kth_sq_distance(q.view(), 3, Some(0)).is_err());
        assert!(tree.kth_sq_distance(q.view(), 0, None).is_err());
        assert_eq!(tree.kth_sq_distance(q.view(), 3, None).unwrap(), 0.0);
    }
}
