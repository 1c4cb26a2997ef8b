//! Forward and backward kernels for attention-guided propagation.
//!
//! For node `i` the logits over `j ∈ N(i) ∪ {i}` are `β · cos(h_i, h_j)`, the weights
//! `P_i·` are their softmax and the output row is `Σ_j P_ij h_j`. The cosine uses
//! `x·y / (‖x‖‖y‖ + ε)` so an all-zero row has cosine 0 with everything.

use ndarray::{Array2, ArrayView2};

use crate::graph::{CsrMatrix, SparseGraph};

pub const COSINE_EPS: f64 = 1e-12;

/// Everything the backward pass needs, all of size `O(|E| + n)`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub norms: Vec<f64>,
    pub dots: Vec<f64>,
    pub cosines: Vec<f64>,
    pub probs: Vec<f64>,
    pub beta: f64,
}

impl AttentionCache {
    pub fn propagation_matrix(&self) -> CsrMatrix {
        let n = self.norms.len();
        CsrMatrix::from_parts(
            n,
            n,
            self.offsets.clone(),
            self.cols.clone(),
            self.probs.clone(),
        )
    }

    pub fn storage_len(&self) -> usize {
        self.offsets.len()
            + self.cols.len()
            + self.norms.len()
            + self.dots.len()
            + self.cosines.len()
            + self.probs.len()
    }
}

pub(crate) fn forward(
    h: &ArrayView2<f64>,
    beta: f64,
    graph: &SparseGraph,
) -> (Array2<f64>, AttentionCache) {
    let n = h.nrows();
    let (offsets, cols) = graph.self_loop_pattern();
    let norms: Vec<f64> = h
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();

    let nnz = cols.len();
    let mut dots = Vec::with_capacity(nnz);
    let mut cosines = Vec::with_capacity(nnz);
    let mut probs = vec![0.0; nnz];
    let mut out = Array2::zeros(h.raw_dim());

    for i in 0..n {
        let span = offsets[i]..offsets[i + 1];
        let hi = h.row(i);
        for &j in &cols[span.clone()] {
            let d = hi.dot(&h.row(j));
            dots.push(d);
            cosines.push(d / (norms[i] * norms[j] + COSINE_EPS));
        }
        let row_probs = &mut probs[span.clone()];
        let max = cosines[span.clone()]
            .iter()
            .map(|&c| beta * c)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, &c) in row_probs.iter_mut().zip(&cosines[span.clone()]) {
            *p = (beta * c - max).exp();
            total += *p;
        }
        let mut out_row = out.row_mut(i);
        for (p, &j) in row_probs.iter_mut().zip(&cols[span]) {
            *p /= total;
            out_row.scaled_add(*p, &h.row(j));
        }
    }

    let cache = AttentionCache {
        offsets,
        cols,
        norms,
        dots,
        cosines,
        probs,
        beta,
    };
    (out, cache)
}

/// Returns `(∂L/∂H, ∂L/∂β)` given `∂L/∂out`.
pub(crate) fn backward(
    h: &ArrayView2<f64>,
    grad_out: &ArrayView2<f64>,
    cache: &AttentionCache,
) -> (Array2<f64>, f64) {
    let n = h.nrows();
    let mut grad_h = Array2::zeros(h.raw_dim());
    let mut grad_beta = 0.0;
    let beta = cache.beta;
    let mut grad_p = Vec::new();

    for i in 0..n {
        let span = cache.offsets[i]..cache.offsets[i + 1];
        let cols = &cache.cols[span.clone()];
        let probs = &cache.probs[span.clone()];
        let gi = grad_out.row(i);

        // out_i = Σ_j P_ij h_j
        grad_p.clear();
        for (&j, &p) in cols.iter().zip(probs) {
            grad_p.push(gi.dot(&h.row(j)));
            grad_h.row_mut(j).scaled_add(p, &gi);
        }

        // softmax backward: ∂L/∂s_ij = P_ij (∂L/∂P_ij − Σ_k P_ik ∂L/∂P_ik)
        let mean: f64 = grad_p.iter().zip(probs).map(|(g, p)| g * p).sum();
        let a = cache.norms[i];
        for (k, (&j, &p)) in cols.iter().zip(probs).enumerate() {
            let idx = span.start + k;
            let grad_logit = p * (grad_p[k] - mean);
            grad_beta += grad_logit * cache.cosines[idx];
            let grad_cos = beta * grad_logit;
            if grad_cos == 0.0 {
                continue;
            }
            // c = x·y / D with D = ‖x‖‖y‖ + ε
            let b = cache.norms[j];
            let denom = a * b + COSINE_EPS;
            let dot = cache.dots[idx];
            let xi = h.row(i);
            let yj = h.row(j);
            grad_h.row_mut(i).scaled_add(grad_cos / denom, &yj);
            grad_h.row_mut(j).scaled_add(grad_cos / denom, &xi);
            let shared = grad_cos * dot / (denom * denom);
            if a > 0.0 {
                grad_h.row_mut(i).scaled_add(-shared * b / a, &xi);
            }
            if b > 0.0 {
                grad_h.row_mut(j).scaled_add(-shared * a / b, &yj);
            }
        }
    }
    (grad_h, grad_beta)
}
