//! K-means on embeddings, agreement scores between labelings, and PCA.
//!
//! Entropies use natural logarithms.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ndgrad::Matrix;
use crate::seeding::{indexed_rng, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("k = {k} is invalid for {points} points")]
    BadK { k: usize, points: usize },
    #[error("labelings differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot project {dims} components from {available}-dimensional points")]
    BadDims { dims: usize, available: usize },
    #[error("need at least {0} points")]
    TooFewPoints(usize),
    #[error("points contain non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    /// `k × d`
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each assignment pass of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids = vec![points.row_slice(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row_slice(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row_slice(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row_slice(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &Matrix, mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KmeansResult {
    let (n, d, k) = (points.rows(), points.cols(), centroids.len());
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (j, dd) = nearest(points.row_slice(i), &centroids);
            dist[i] = dd;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        history.push(dist.iter().sum());
        if !changed || iterations == max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(points.row_slice(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed at the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row_slice(a), &centroids[labels[a]]);
                        let db = sq_dist(points.row_slice(b), &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n > 0");
                counts[labels[far]] -= 1;
                centroids[j] = points.row_slice(far).to_vec();
                labels[far] = j;
                counts[j] = 1;
            }
        }
    }
    let centroids = Matrix::from_fn([k, d], |r, c| centroids[r][c]);
    KmeansResult {
        inertia: *history.last().expect("at least one pass"),
        labels,
        centroids,
        history,
        iterations,
    }
}

/// Best of `restarts` k-means++ / Lloyd runs by inertia. Restart `r` draws
/// from its own generator derived from `seed`, so the result does not
/// depend on how restarts are scheduled across threads.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, cfg: &KmeansConfig) -> Result<KmeansResult, EvalError> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(EvalError::BadK { k, points: n });
    }
    if !points.all_finite() {
        return Err(EvalError::NonFinite);
    }
    let runs: Vec<KmeansResult> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = indexed_rng(seed, Stream::Kmeans, r as u64);
            lloyd(points, plus_plus(points, k, &mut rng), cfg.max_iter)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, next| if next.inertia < best.inertia { next } else { best })
        .expect("at least one restart"))
}

/// Counts `n_ij` of true class `i` against predicted cluster `j`, with
/// labels renumbered densely in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub total: u64,
}

fn dense_labels(y: &[usize]) -> (Vec<usize>, usize) {
    let mut uniq: Vec<usize> = y.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    (y.iter().map(|v| uniq.binary_search(v).expect("present")).collect(), uniq.len())
}

impl Contingency {
    pub fn new(y_true: &[usize], y_pred: &[usize]) -> Result<Self, EvalError> {
        if y_true.len() != y_pred.len() {
            return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
        }
        let (t, nt) = dense_labels(y_true);
        let (p, np) = dense_labels(y_pred);
        let mut table = vec![vec![0u64; np]; nt];
        for (&i, &j) in t.iter().zip(&p) {
            table[i][j] += 1;
        }
        let rows = table.iter().map(|r| r.iter().sum()).collect();
        let cols = (0..np).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            table,
            rows,
            cols,
            total: y_true.len() as u64,
        })
    }
}

fn entropy(marginal: &[u64], total: u64) -> f64 {
    let n = total as f64;
    -marginal
        .iter()
        .filter(|&&a| a > 0)
        .map(|&a| (a as f64 / n) * (a as f64 / n).ln())
        .sum::<f64>()
}

pub fn mutual_info(c: &Contingency) -> f64 {
    let n = c.total as f64;
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    mi
}

/// `MI / √(H_true · H_pred)`.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64, EvalError> {
    let c = Contingency::new(y_true, y_pred)?;
    let (ht, hp) = (entropy(&c.rows, c.total), entropy(&c.cols, c.total));
    Ok(match (ht == 0.0, hp == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (mutual_info(&c) / (ht * hp).sqrt()).min(1.0),
    })
}

/// `ln k!` for `k = 0..=n`.
fn log_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information under random permutations of one labeling
/// with both marginals fixed, by exact summation over the hypergeometric
/// distribution of each cell count.
pub fn expected_mutual_info(c: &Contingency) -> f64 {
    let n = c.total;
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &c.rows {
        for &b in &c.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let log_p = lf[a as usize] + lf[b as usize] + lf[(n - a) as usize] + lf[(n - b) as usize]
                    - lf[n as usize]
                    - lf[nij as usize]
                    - lf[(a - nij) as usize]
                    - lf[(b - nij) as usize]
                    - lf[(n + nij - a - b) as usize];
                let x = nij as f64;
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// `(MI − E[MI]) / (½(H_true + H_pred) − E[MI])`.
pub fn ami(y_true: &[usize], y_pred: &[usize]) -> Result<f64, EvalError> {
    let c = Contingency::new(y_true, y_pred)?;
    let (ht, hp) = (entropy(&c.rows, c.total), entropy(&c.cols, c.total));
    match (ht == 0.0, hp == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mi = mutual_info(&c);
    let emi = expected_mutual_info(&c);
    let denom = 0.5 * (ht + hp) - emi;
    if denom.abs() <= 1e-15 * (ht + hp) {
        // Only reachable when both labelings are all-distinct, which makes
        // them identical up to relabeling.
        return Ok(1.0);
    }
    Ok(((mi - emi) / denom).min(1.0))
}

/// `(1 − H(true|pred)/H(true), 1 − H(pred|true)/H(pred))`, with 0/0 read
/// as a perfect score.
pub fn homogeneity_completeness(y_true: &[usize], y_pred: &[usize]) -> Result<(f64, f64), EvalError> {
    let c = Contingency::new(y_true, y_pred)?;
    let (ht, hp) = (entropy(&c.rows, c.total), entropy(&c.cols, c.total));
    let mi = mutual_info(&c);
    // H(true|pred) = H(true) − MI, so 1 − H(true|pred)/H(true) = MI/H(true).
    let h = if ht == 0.0 { 1.0 } else { (mi / ht).clamp(0.0, 1.0) };
    let comp = if hp == 0.0 { 1.0 } else { (mi / hp).clamp(0.0, 1.0) };
    Ok((h, comp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub nmi: f64,
    pub ami: f64,
    pub homogeneity: f64,
    pub completeness: f64,
}

pub fn score_all(y_true: &[usize], y_pred: &[usize]) -> Result<Scores, EvalError> {
    let (homogeneity, completeness) = homogeneity_completeness(y_true, y_pred)?;
    Ok(Scores {
        nmi: nmi(y_true, y_pred)?,
        ami: ami(y_true, y_pred)?,
        homogeneity,
        completeness,
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in decreasing order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row_slice(r).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| f64::from(u8::from(r == c))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|p| (p + 1..n).map(move |q| (p, q))).map(|(p, q)| m[p][q] * m[p][q]).sum();
        let scale: f64 = (0..n).map(|p| m[p][p] * m[p][p]).sum::<f64>();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = Matrix::from_fn([n, n], |r, c| v[r][order[c]]);
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `n × dims`
    pub projected: Matrix,
    /// `d × dims`, orthonormal columns.
    pub components: Matrix,
    /// All covariance eigenvalues, decreasing.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projects mean-centred points onto the top `dims` covariance eigenvectors.
/// Each component is signed so that its largest-magnitude loading is
/// positive.
pub fn pca_project(points: &Matrix, dims: usize) -> Result<Pca, EvalError> {
    let [n, d] = points.shape();
    if dims == 0 || dims > d {
        return Err(EvalError::BadDims { dims, available: d });
    }
    if n < 2 {
        return Err(EvalError::TooFewPoints(2));
    }
    if !points.all_finite() {
        return Err(EvalError::NonFinite);
    }
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| points.get(r, c)).sum::<f64>() / n as f64).collect();
    let centred = Matrix::from_fn([n, d], |r, c| points.get(r, c) - mean[c]);
    let cov = centred
        .transpose()
        .matmul(&centred)
        .expect("conformable")
        .map(|v| v / (n - 1) as f64);
    let (eigenvalues, vectors) = symmetric_eigen(&cov);
    let mut comp = vec![vec![0.0; dims]; d];
    for k in 0..dims {
        let col: Vec<f64> = (0..d).map(|r| vectors.get(r, k)).collect();
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, v)| *v)
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            comp[r][k] = sign * col[r];
        }
    }
    let components = Matrix::from_fn([d, dims], |r, c| comp[r][c]);
    let projected = centred.matmul(&components).expect("conformable");
    Ok(Pca {
        projected,
        components,
        eigenvalues,
        mean,
    })
}
