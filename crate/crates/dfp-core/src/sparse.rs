//! Desk-scale verification of the sparse-approximation backbone: the
//! nonnegative soft-thresholding prox, the layered-thresholding forward
//! pass, a proximal-gradient solver for the global reconstruction
//! objective, and the uniqueness/stability thresholds tied to coherence.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::dict::{Block, BlockDictionary, DictError};
use crate::mat::Mat;
use crate::math;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SparseError {
    Materialize(DictError),
    BadInput { expected: usize, got: usize },
    BadLambda,
    NonFinite { iteration: usize },
}

impl fmt::Display for SparseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparseError::Materialize(e) => write!(f, "{e}"),
            SparseError::BadInput { expected, got } => {
                write!(f, "input has length {got}, expected {expected}")
            }
            SparseError::BadLambda => write!(f, "per-layer weights must be nonnegative"),
            SparseError::NonFinite { iteration } => {
                write!(f, "objective became non-finite at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for SparseError {}

impl From<DictError> for SparseError {
    fn from(e: DictError) -> Self {
        SparseError::Materialize(e)
    }
}

/// `max(v - lambda, 0)` elementwise: ReLU of the shifted input.
pub fn nonneg_soft_threshold(v: &[f64], lambda: f64) -> Vec<f64> {
    v.iter().map(|&x| (x - lambda).max(0.0)).collect()
}

fn apply_block(b: &Block, v: &[f64]) -> Vec<f64> {
    match b {
        Block::LearnedDense(m) => m.mul_vec(v),
        Block::LearnedConv(c) => c.apply(v),
        Block::Identity => v.to_vec(),
        Block::NegIdentity => v.iter().map(|x| -x).collect(),
    }
}

fn apply_block_transpose(b: &Block, v: &[f64]) -> Vec<f64> {
    match b {
        Block::LearnedDense(m) => m.tr_mul_vec(v),
        Block::LearnedConv(c) => c.apply_transpose(v),
        Block::Identity => v.to_vec(),
        Block::NegIdentity => v.iter().map(|x| -x).collect(),
    }
}

/// Layered-thresholding forward pass. The unified update
/// `w_j = prox(-D_jj^T sum_{k<j} D_jk w_k)` reproduces the chain rule
/// (through the negative-identity couplings), the residual update (the
/// skip contributes `+w_{j-2}` inside the prox), and the general skip
/// form. Layer 1 sees the input directly: `w_1 = prox(D_11^T x)`.
pub fn forward_pass_with(
    dict: &BlockDictionary,
    x: &[f64],
    lambdas: &[f64],
) -> Result<Vec<Vec<f64>>, SparseError> {
    let l = dict.levels();
    if x.len() != dict.row_dims()[0] {
        return Err(SparseError::BadInput {
            expected: dict.row_dims()[0],
            got: x.len(),
        });
    }
    if lambdas.len() != l || lambdas.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(SparseError::BadLambda);
    }
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(l);
    let d00 = dict.block_at(0, 0).expect("diagonal block present");
    acts.push(nonneg_soft_threshold(&apply_block_transpose(d00, x), lambdas[0]));
    for j in 1..l {
        let mut s = vec![0.0; dict.row_dims()[j]];
        for k in 0..j {
            if let Some(b) = dict.block_at(j, k) {
                for (acc, v) in s.iter_mut().zip(apply_block(b, &acts[k]).iter()) {
                    *acc += v;
                }
            }
        }
        let djj = dict.block_at(j, j).expect("diagonal block present");
        let mut pre = apply_block_transpose(djj, &s);
        for v in &mut pre {
            *v = -*v;
        }
        acts.push(nonneg_soft_threshold(&pre, lambdas[j]));
    }
    Ok(acts)
}

/// Forward pass with the dictionary's scalar weight on every layer.
pub fn forward_pass(dict: &BlockDictionary, x: &[f64]) -> Result<Vec<Vec<f64>>, SparseError> {
    let lambdas = vec![dict.lambda(); dict.levels()];
    forward_pass_with(dict, x, &lambdas)
}

/// An instance of the global nonnegative sparse coding objective
/// `1/2 |B w - x~|^2 + sum_j lambda_j |w_j|_1` over `w >= 0`, with the
/// input zero-padded to the full row space. Reconstruction terms are
/// unweighted by default; per-level weights are an optional extension.
#[derive(Clone, Debug)]
pub struct SparseProblem {
    dict: BlockDictionary,
    x: Vec<f64>,
    lambdas: Vec<f64>,
    term_weights: Option<Vec<f64>>,
}

impl SparseProblem {
    pub fn new(dict: BlockDictionary, x: Vec<f64>) -> Result<Self, SparseError> {
        let lambdas = vec![dict.lambda(); dict.levels()];
        Self::with_lambdas(dict, x, lambdas)
    }

    pub fn with_lambdas(
        dict: BlockDictionary,
        x: Vec<f64>,
        lambdas: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if x.len() != dict.row_dims()[0] {
            return Err(SparseError::BadInput {
                expected: dict.row_dims()[0],
                got: x.len(),
            });
        }
        if lambdas.len() != dict.levels() || lambdas.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(SparseError::BadLambda);
        }
        Ok(SparseProblem {
            dict,
            x,
            lambdas,
            term_weights: None,
        })
    }

    /// Weights the squared reconstruction error of each level: term `r`
    /// becomes `w_r/2 |(B w - x~)_r|^2`. Scaling the system rows by
    /// `sqrt(w_r)` reduces this to the unweighted problem, which is how
    /// the solver handles it.
    pub fn with_term_weights(mut self, weights: Vec<f64>) -> Result<Self, SparseError> {
        if weights.len() != self.dict.levels() || weights.iter().any(|&v| v <= 0.0 || !v.is_finite())
        {
            return Err(SparseError::BadLambda);
        }
        self.term_weights = Some(weights);
        Ok(self)
    }

    pub fn dict(&self) -> &BlockDictionary {
        &self.dict
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `(x, 0, ..., 0)` over the total row space.
    pub fn padded_target(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.dict.total_rows()];
        t[..self.x.len()].copy_from_slice(&self.x);
        t
    }

    /// Materialized system with term weights folded into the rows.
    fn scaled_system(&self) -> Result<(Mat, Vec<f64>), SparseError> {
        let mut b = self.dict.materialize()?;
        let mut target = self.padded_target();
        if let Some(weights) = &self.term_weights {
            let mut row_scale = Vec::with_capacity(self.dict.total_rows());
            for (r, &d) in self.dict.row_dims().iter().enumerate() {
                let s = math::sqrt(weights[r]);
                for _ in 0..d {
                    row_scale.push(s);
                }
            }
            b.scale_rows(&row_scale);
            for (t, s) in target.iter_mut().zip(row_scale.iter()) {
                *t *= s;
            }
        }
        Ok((b, target))
    }

    fn objective_inner(&self, b: &Mat, target: &[f64], w: &[f64]) -> f64 {
        let r = b.mul_vec(w);
        let mut quad = 0.0;
        for (ri, ti) in r.iter().zip(target.iter()) {
            let d = ri - ti;
            quad += d * d;
        }
        let mut pen = 0.0;
        let mut at = 0;
        for (j, &k) in self.dict.col_dims().iter().enumerate() {
            let l1: f64 = w[at..at + k].iter().map(|v| math::abs(*v)).sum();
            pen += self.lambdas[j] * l1;
            at += k;
        }
        0.5 * quad + pen
    }

    /// Objective value at stacked coefficients `w`.
    pub fn objective(&self, w: &[f64]) -> Result<f64, SparseError> {
        let (b, target) = self.scaled_system()?;
        Ok(self.objective_inner(&b, &target, w))
    }

    /// Flattens per-layer activations into the stacked coefficient vector.
    pub fn stack(&self, acts: &[Vec<f64>]) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.dict.total_cols());
        for a in acts {
            w.extend_from_slice(a);
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcaSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Step size used (reciprocal of the squared spectral norm).
    pub step: f64,
    /// Objective value after each iteration, starting at the zero vector.
    pub trace: Vec<f64>,
}

/// Largest eigenvalue of `B^T B` by power iteration (deterministic start,
/// relative tolerance 1e-8).
fn squared_spectral_norm(b: &Mat) -> f64 {
    let n = b.cols();
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / math::sqrt(n as f64); n];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let u = b.tr_mul_vec(&b.mul_vec(&v));
        let norm = math::sqrt(u.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, ui) in v.iter_mut().zip(u.iter()) {
            *vi = ui / norm;
        }
        if math::abs(norm - lambda) <= 1e-8 * norm {
            return norm;
        }
        lambda = norm;
    }
    lambda
}

/// Proximal gradient on the global objective from `w = 0`, with the safe
/// step `1/L`. Iterates never increase the objective.
pub fn solve_dca(
    problem: &SparseProblem,
    max_iters: usize,
    tol: f64,
) -> Result<DcaSolution, SparseError> {
    solve(problem, max_iters, tol, false)
}

/// Momentum-accelerated variant. Faster on ill-conditioned systems but not
/// monotone; the plain solver remains the verification baseline.
pub fn solve_dca_accelerated(
    problem: &SparseProblem,
    max_iters: usize,
    tol: f64,
) -> Result<DcaSolution, SparseError> {
    solve(problem, max_iters, tol, true)
}

fn solve(
    problem: &SparseProblem,
    max_iters: usize,
    tol: f64,
    accelerated: bool,
) -> Result<DcaSolution, SparseError> {
    let (b, target) = problem.scaled_system()?;
    let lmax = squared_spectral_norm(&b);
    let step = if lmax > 0.0 { 1.0 / lmax } else { 1.0 };

    let k = problem.dict.total_cols();
    let mut w = vec![0.0; k];
    let mut w_prev = vec![0.0; k];
    let mut t_momentum = 1.0f64;
    let mut obj = problem.objective_inner(&b, &target, &w);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=max_iters {
        iterations = iter;
        let point: Vec<f64> = if accelerated {
            let t_next = 0.5 * (1.0 + math::sqrt(1.0 + 4.0 * t_momentum * t_momentum));
            let beta = (t_momentum - 1.0) / t_next;
            t_momentum = t_next;
            w.iter()
                .zip(w_prev.iter())
                .map(|(a, p)| a + beta * (a - p))
                .collect()
        } else {
            w.clone()
        };
        let mut r = b.mul_vec(&point);
        for (ri, ti) in r.iter_mut().zip(target.iter()) {
            *ri -= ti;
        }
        let g = b.tr_mul_vec(&r);
        let mut w_next = vec![0.0; k];
        let mut at = 0;
        for (j, &kj) in problem.dict.col_dims().iter().enumerate() {
            let thr = step * problem.lambdas[j];
            for i in at..at + kj {
                w_next[i] = (point[i] - step * g[i] - thr).max(0.0);
            }
            at += kj;
        }
        let obj_next = problem.objective_inner(&b, &target, &w_next);
        if !obj_next.is_finite() {
            return Err(SparseError::NonFinite { iteration: iter });
        }
        trace.push(obj_next);
        let settled = if accelerated {
            // Momentum can overshoot; stop on small relative change.
            math::abs(obj - obj_next) <= tol * obj.abs().max(1e-300)
        } else {
            obj - obj_next <= tol * obj.abs().max(1e-300)
        };
        w_prev = w;
        w = w_next;
        obj = obj_next;
        if settled {
            converged = true;
            break;
        }
    }

    Ok(DcaSolution {
        w,
        objective: obj,
        iterations,
        converged,
        step,
        trace,
    })
}

/// Sparsity level below which a representation is the unique sparsest one:
/// `(1 + 1/mu) / 2`. Unbounded at `mu = 0`.
pub fn uniqueness_threshold(mu: f64) -> f64 {
    if mu <= 0.0 {
        f64::INFINITY
    } else {
        0.5 * (1.0 + 1.0 / mu)
    }
}

/// Sparsity cap for stable recovery under bounded noise: `(1 + 1/mu) / 4`.
pub fn stability_cap(mu: f64) -> f64 {
    if mu <= 0.0 {
        f64::INFINITY
    } else {
        0.25 * (1.0 + 1.0 / mu)
    }
}

/// Denominator `1 - mu (4 s - 1)` of the stability error bound; a
/// non-positive value signals the bound is vacuous at this sparsity.
pub fn robustness_denominator(mu: f64, s: usize) -> f64 {
    1.0 - mu * (4.0 * s as f64 - 1.0)
}
