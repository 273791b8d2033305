//! Brute-force reference computations used to verify the detectors.
//!
//! Nothing here touches the k-d tree, the SMO solver or the network
//! backward passes; each oracle re-derives its result from the defining
//! formulas with plain loops.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Largest training set [`lof_bruteforce`] accepts.
pub const LOF_ORACLE_MAX_ROWS: usize = 1000;
/// Largest problem [`ocsvm_qp_oracle`] accepts.
pub const QP_ORACLE_MAX_ROWS: usize = 200;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

fn rows(x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}

/// Tie-inclusive neighborhood from a list of distances, skipping `skip`.
fn neighborhood(dist: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut sorted: Vec<f64> = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, &d)| d)
        .collect();
    sorted.sort_by(f64::total_cmp);
    let kth = sorted[k - 1];
    (0..dist.len())
        .filter(|&j| Some(j) != skip && dist[j] <= kth)
        .collect()
}

fn lrd_of(nb: &[usize], dist: &[f64], kdist: &[f64]) -> f64 {
    let mut sum = 0.0;
    for &o in nb {
        sum += if dist[o] > kdist[o] { dist[o] } else { kdist[o] };
    }
    let mean = sum / nb.len() as f64;
    if mean == 0.0 {
        f64::INFINITY
    } else {
        1.0 / mean
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a.is_infinite() && b.is_infinite() {
        1.0
    } else {
        a / b
    }
}

/// Novelty-mode LOF scores of `x_query` against `x_train` from the full
/// pairwise distance matrix.
pub fn lof_bruteforce(x_train: ArrayView2<'_, f64>, x_query: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    let n = x_train.nrows();
    if n > LOF_ORACLE_MAX_ROWS {
        return Err(Error::InvalidInput(format!(
            "brute-force LOF limited to {LOF_ORACLE_MAX_ROWS} rows, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..{n}")));
    }
    let train = rows(x_train);
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = euclid(&train[i], &train[j]);
        }
    }
    let hoods: Vec<Vec<usize>> = (0..n).map(|i| neighborhood(&d[i], k, Some(i))).collect();
    let kdist: Vec<f64> = (0..n)
        .map(|i| hoods[i].iter().map(|&j| d[i][j]).fold(0.0, f64::max))
        .collect();
    let lrd: Vec<f64> = (0..n).map(|i| lrd_of(&hoods[i], &d[i], &kdist)).collect();

    let mut scores = Vec::with_capacity(x_query.nrows());
    for q in x_query.outer_iter() {
        let q = q.to_vec();
        let dq: Vec<f64> = train.iter().map(|t| euclid(&q, t)).collect();
        let nb = neighborhood(&dq, k, None);
        let own = lrd_of(&nb, &dq, &kdist);
        let mut s = 0.0;
        for &o in &nb {
            s += ratio(lrd[o], own);
        }
        scores.push(s / nb.len() as f64);
    }
    Ok(scores)
}

/// Dense RBF kernel matrix.
pub fn rbf_matrix(x: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let r = rows(x);
    Array2::from_shape_fn((r.len(), r.len()), |(i, j)| {
        let d = euclid(&r[i], &r[j]);
        (-gamma * d * d).exp()
    })
}

/// Euclidean projection onto `{0 <= a_i <= c, sum a = 1}`.
fn project(v: &[f64], c: f64) -> Vec<f64> {
    let mass = |tau: f64| -> f64 { v.iter().map(|&x| (x - tau).clamp(0.0, c)).sum() };
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - c;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Solve exactly on the linear piece containing the root.
    let tau0 = 0.5 * (lo + hi);
    let (mut free_sum, mut free, mut upper) = (0.0, 0usize, 0usize);
    for &x in v {
        let a = x - tau0;
        if a >= c {
            upper += 1;
        } else if a > 0.0 {
            free_sum += x;
            free += 1;
        }
    }
    let tau = if free > 0 {
        (free_sum + c * upper as f64 - 1.0) / free as f64
    } else {
        tau0
    };
    v.iter().map(|&x| (x - tau).clamp(0.0, c)).collect()
}

fn matvec(k: &Array2<f64>, a: &[f64]) -> Vec<f64> {
    k.outer_iter()
        .map(|row| row.iter().zip(a).map(|(x, y)| x * y).sum())
        .collect()
}

/// Reference dual solution: `(alphas, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

/// Solves `min 1/2 a'Ka` over `{0 <= a <= 1/(nu n), sum a = 1}` by accelerated
/// projected gradient with adaptive restart, until the gradient-mapping norm
/// drops below `1e-8`.
pub fn ocsvm_qp_oracle(k: &Array2<f64>, nu: f64) -> Result<QpSolution> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 5_000_000;
    let n = k.nrows();
    if n == 0 || n > QP_ORACLE_MAX_ROWS || k.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "QP oracle needs a square kernel with 1..={QP_ORACLE_MAX_ROWS} rows"
        )));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidInput(format!("nu must lie in (0, 1], got {nu}")));
    }
    let c = 1.0 / (nu * n as f64);
    // Lipschitz bound from the largest absolute row sum.
    let lip = k
        .outer_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    let objective = |a: &[f64]| -> f64 {
        let g = matvec(k, a);
        0.5 * a.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>()
    };

    let mut a = project(&vec![1.0 / n as f64; n], c);
    let mut y = a.clone();
    let mut t = 1.0f64;
    let mut f_prev = objective(&a);
    for it in 0..MAX_ITER {
        let gy = matvec(k, &y);
        let step: Vec<f64> = y.iter().zip(&gy).map(|(v, g)| v - g / lip).collect();
        let a_next = project(&step, c);

        let ga = matvec(k, &a_next);
        let probe: Vec<f64> = a_next.iter().zip(&ga).map(|(v, g)| v - g / lip).collect();
        let mapped = project(&probe, c);
        let gm = lip
            * a_next
                .iter()
                .zip(&mapped)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        if gm < TOL {
            let rho = rho_from(&a_next, &ga, c);
            return Ok(QpSolution {
                alphas: a_next,
                rho,
                iterations: it + 1,
            });
        }

        let f_next = objective(&a_next);
        if f_next > f_prev {
            // restart momentum
            t = 1.0;
            y = a_next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = a_next
                .iter()
                .zip(&a)
                .map(|(p, q)| p + beta * (p - q))
                .collect();
            t = t_next;
        }
        f_prev = f_next;
        a = a_next;
    }
    Err(Error::Convergence {
        iterations: MAX_ITER,
        residual: f64::NAN,
    })
}

fn rho_from(a: &[f64], g: &[f64], c: f64) -> f64 {
    let free: Vec<f64> = (0..a.len())
        .filter(|&i| a[i] > 0.0 && a[i] < c)
        .map(|i| g[i])
        .collect();
    if !free.is_empty() {
        return free.iter().sum::<f64>() / free.len() as f64;
    }
    let ub = (0..a.len())
        .filter(|&i| a[i] == 0.0)
        .map(|i| g[i])
        .fold(f64::INFINITY, f64::min);
    let lb = (0..a.len())
        .filter(|&i| a[i] >= c)
        .map(|i| g[i])
        .fold(f64::NEG_INFINITY, f64::max);
    match (ub.is_finite(), lb.is_finite()) {
        (true, true) => 0.5 * (ub + lb),
        (true, false) => ub,
        _ => lb,
    }
}

/// Decision values `sum_i a_i K(x_i, q) - rho` from a reference solution.
pub fn qp_decision(
    x_train: ArrayView2<'_, f64>,
    sol: &QpSolution,
    gamma: f64,
    x_query: ArrayView2<'_, f64>,
) -> Vec<f64> {
    let train = rows(x_train);
    x_query
        .outer_iter()
        .map(|q| {
            let q = q.to_vec();
            let mut s = 0.0;
            for (t, a) in train.iter().zip(&sol.alphas) {
                let d = euclid(t, &q);
                s += a * (-gamma * d * d).exp();
            }
            s - sol.rho
        })
        .collect()
}

/// Central-difference gradient `(f(t + e_i h) - f(t - e_i h)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut loss: F, theta: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = loss(&probe);
        probe[i] = theta[i] - step;
        let down = loss(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
