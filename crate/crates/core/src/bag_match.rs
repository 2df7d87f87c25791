//! Bag-to-bag matching scores over unit-length descriptors.
//!
//! For descriptor matrices `E1`, `E2` (one row per keypoint) the squared
//! distances follow from the Gram matrix `S = E1 E2^T` as `d2 = 2 - 2 S`.
//! A keypoint of the first bag counts as matched when its nearest neighbour
//! in the second bag lies within squared distance `tau`. The hard score is
//! the matched fraction; the soft score swaps the indicator `[x <= tau]` for
//! the logistic `1 / (1 + exp(beta (x - tau)))` and stays differentiable.
//! The per-row minimum is kept exact, so its gradient flows only through
//! the argmin entry of each row.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, matmul_transposed, Tensor};

/// Exponent clamp for the logistic relaxation.
const MAX_EXPONENT: f64 = 500.0;

/// Threshold and relaxation constants of the matching score and loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Threshold on squared descriptor distance.
    pub tau: f64,
    /// Sharpness of the logistic relaxation.
    pub beta: f64,
    /// Stabilizer in the denominator of the ratio loss.
    pub epsilon: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            beta: 20.0,
            epsilon: 1e-6,
        }
    }
}

impl MatchConfig {
    pub fn new(tau: f64, beta: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { tau, beta, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 4.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 4), got {}",
                self.tau
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Two equally sized descriptor matrices and their Gram matrix.
#[derive(Debug, Clone)]
pub struct GramPair {
    e1: Tensor,
    e2: Tensor,
    gram: Tensor,
}

impl GramPair {
    /// Both matrices must be `n x d` with the same `n` and `d`.
    pub fn new(e1: Tensor, e2: Tensor) -> Result<Self> {
        e1.expect_rank(2, "first descriptor matrix")?;
        e2.expect_rank(2, "second descriptor matrix")?;
        if e1.shape() != e2.shape() {
            return shape_err(format!(
                "bags must have equal size and descriptor length: {:?} vs {:?}",
                e1.shape(),
                e2.shape()
            ));
        }
        let gram = matmul_transposed(&e1, &e2)?;
        Ok(Self { e1, e2, gram })
    }

    pub fn e1(&self) -> &Tensor {
        &self.e1
    }

    pub fn e2(&self) -> &Tensor {
        &self.e2
    }

    pub fn gram(&self) -> &Tensor {
        &self.gram
    }

    /// Bag size.
    pub fn n(&self) -> usize {
        self.e1.rows()
    }

    /// `(min_j d2_ij, argmin_j)` for row `i`; first index on ties.
    fn row_min(&self, i: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (j, &s) in self.gram.row(i).iter().enumerate() {
            let d2 = 2.0 - 2.0 * s;
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        best
    }
}

/// Logistic stand-in for the indicator `[x <= tau]`.
pub fn soft_indicator(x: f64, cfg: &MatchConfig) -> f64 {
    let z = (cfg.beta * (x - cfg.tau)).clamp(-MAX_EXPONENT, MAX_EXPONENT);
    1.0 / (1.0 + z.exp())
}

/// Derivative of [`soft_indicator`] with respect to `x`.
pub fn soft_indicator_derivative(x: f64, cfg: &MatchConfig) -> f64 {
    let s = soft_indicator(x, cfg);
    -cfg.beta * s * (1.0 - s)
}

/// Squared distances `2 - 2 S` between every row pair.
pub fn sqdist_matrix(pair: &GramPair) -> Tensor {
    let data = pair.gram.data().iter().map(|s| 2.0 - 2.0 * s).collect();
    Tensor::new(pair.gram.shape(), data).expect("square gram")
}

/// Squared distance from each row of `E1` to its nearest row of `E2`.
pub fn row_min_sqdist(pair: &GramPair) -> Vec<f64> {
    (0..pair.n()).map(|i| pair.row_min(i).0).collect()
}

/// Fraction of rows of `E1` whose nearest row of `E2` is within `tau`.
pub fn hard_match_score(pair: &GramPair, tau: f64) -> f64 {
    let n = pair.n();
    let matched = (0..n).filter(|&i| pair.row_min(i).0 <= tau).count();
    matched as f64 / n as f64
}

/// Forward state of the relaxed score, reused by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatch {
    pub score: f64,
    /// Column of the nearest `E2` row for each `E1` row.
    pub argmin: Vec<usize>,
    /// Relaxed indicator value for each row.
    pub sigma: Vec<f64>,
    /// Row minima of the squared distances.
    pub min_sqdist: Vec<f64>,
}

pub fn soft_match_score(pair: &GramPair, cfg: &MatchConfig) -> SoftMatch {
    let n = pair.n();
    let mut argmin = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut min_sqdist = Vec::with_capacity(n);
    for i in 0..n {
        let (d2, j) = pair.row_min(i);
        argmin.push(j);
        min_sqdist.push(d2);
        sigma.push(soft_indicator(d2, cfg));
    }
    let score = sigma.iter().sum::<f64>() / n as f64;
    SoftMatch {
        score,
        argmin,
        sigma,
        min_sqdist,
    }
}

/// Gradient of the relaxed score with respect to the Gram matrix. Only each
/// row's argmin entry is non-zero: `(2 beta / n) sigma (1 - sigma)`.
pub fn soft_match_gram_gradient(fwd: &SoftMatch, cfg: &MatchConfig) -> Tensor {
    let n = fwd.argmin.len();
    let mut g = Tensor::zeros(&[n, n]);
    let data = g.data_mut();
    for (i, (&j, &s)) in fwd.argmin.iter().zip(&fwd.sigma).enumerate() {
        // d(score)/d(d2) = -(beta/n) s (1-s); d(d2)/dS = -2
        data[i * n + j] = 2.0 * cfg.beta * s * (1.0 - s) / n as f64;
    }
    g
}

/// Gradients of `upstream * score` with respect to `E1` and `E2`:
/// `dE1 = G E2` and `dE2 = G^T E1` where `G` is the Gram-matrix gradient.
pub fn soft_match_backward(pair: &GramPair, fwd: &SoftMatch, cfg: &MatchConfig, upstream: f64) -> (Tensor, Tensor) {
    let n = pair.n();
    let d = pair.e1.cols();
    let g = soft_match_gram_gradient(fwd, cfg);
    let mut de1 = vec![0.0; n * d];
    let mut de2 = vec![0.0; n * d];
    gemm(n, n, d, upstream, g.data(), false, pair.e2.data(), false, 0.0, &mut de1);
    gemm(n, n, d, upstream, g.data(), true, pair.e1.data(), false, 0.0, &mut de2);
    (
        Tensor::new(&[n, d], de1).expect("n x d"),
        Tensor::new(&[n, d], de2).expect("n x d"),
    )
}

/// Size of a maximum one-to-one matching between rows of `E1` and `E2`
/// using only pairs with `d2 <= tau`. Exact, via augmenting paths.
pub fn hungarian_match_count(pair: &GramPair, tau: f64) -> usize {
    let n = pair.n();
    let d2 = sqdist_matrix(pair);
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d2.data()[i * n + j] <= tau).collect())
        .collect();

    fn augment(u: usize, adj: &[Vec<usize>], visited: &mut [bool], match_right: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            if match_right[v].is_none_or(|w| augment(w, adj, visited, match_right)) {
                match_right[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut match_right = vec![None; n];
    let mut count = 0;
    for u in 0..n {
        let mut visited = vec![false; n];
        if augment(u, &adj, &mut visited, &mut match_right) {
            count += 1;
        }
    }
    count
}
