//! Define-by-run reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`] walks the
//! records in exact reverse order and accumulates gradients into every node that
//! requires one. The tape is rebuilt for each forward pass.

mod attention;

use std::borrow::Cow;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, SparseGraph};

pub use attention::COSINE_EPS;
use attention::AttentionCache;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    /// `x · W[..k]`, plus `W[k]` when `bias` is set.
    Linear {
        input: Var,
        weight: Var,
        bias: bool,
    },
    SparseLinear {
        input: Cow<'a, CsrMatrix>,
        weight: Var,
        bias: bool,
    },
    /// `x + 1 · W[last]ᵀ`.
    AddBias {
        input: Var,
        weight: Var,
    },
    Spmm {
        matrix: &'a CsrMatrix,
        input: Var,
    },
    Relu(Var),
    Dropout {
        input: Var,
        mask: Array2<f64>,
    },
    RowSoftmax(Var),
    Attention {
        input: Var,
        beta: Var,
        cache: Box<AttentionCache>,
    },
    CrossEntropy {
        logits: Var,
        mask: Vec<usize>,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op<'a>,
}

/// Shape and storage of one recorded node, for memory audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFootprint {
    pub op: &'static str,
    pub shape: (usize, usize),
    /// Auxiliary storage (masks, cached sparse structures) in element slots.
    pub aux_len: usize,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_param(&mut self, value: f64) -> Var {
        self.param(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(shape(value), (1, 1));
        value[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op<'a>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", shape(av), shape(bv)),
            ));
        }
        let value = av.dot(bv);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Linear map by a bias-augmented weight: the last row of `weight` is the bias, as
    /// if the input carried an extra constant-one column. With `bias == false` only
    /// the leading rows are applied and the bias can be added later by
    /// [`Tape::add_bias`].
    pub fn linear(&mut self, input: Var, weight: Var, bias: bool) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if w.nrows() != x.ncols() + 1 {
            return Err(Error::dim(
                "linear",
                format!("input {:?} with bias-augmented weight {:?}", shape(x), shape(w)),
            ));
        }
        let k = x.ncols();
        let mut value = x.dot(&w.slice(ndarray::s![..k, ..]));
        if bias {
            value += &w.row(k);
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// [`Tape::linear`] with a constant sparse input (e.g. bag-of-words features).
    pub fn sparse_linear(
        &mut self,
        input: Cow<'a, CsrMatrix>,
        weight: Var,
        bias: bool,
    ) -> Result<Var> {
        let w = self.value(weight);
        if w.nrows() != input.ncols() + 1 {
            return Err(Error::dim(
                "sparse_linear",
                format!(
                    "input {}x{} with bias-augmented weight {:?}",
                    input.nrows(),
                    input.ncols(),
                    shape(w)
                ),
            ));
        }
        let k = input.ncols();
        let mut value = input.spmm(&w.slice(ndarray::s![..k, ..]))?;
        if bias {
            value += &w.row(k);
        }
        let rg = self.requires_grad(weight);
        Ok(self.push(
            value,
            rg,
            Op::SparseLinear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Adds the bias row (last row) of a bias-augmented `weight` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (xv, w) = (self.value(x), self.value(weight));
        if w.nrows() == 0 || w.ncols() != xv.ncols() {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} plus bias row of {:?}", shape(xv), shape(w)),
            ));
        }
        let value = xv + &w.row(w.nrows() - 1);
        let rg = self.requires_grad(x) || self.requires_grad(weight);
        Ok(self.push(value, rg, Op::AddBias { input: x, weight }))
    }

    /// Constant sparse matrix times a dense node.
    pub fn spmm(&mut self, matrix: &'a CsrMatrix, input: Var) -> Result<Var> {
        let value = matrix.spmm(&self.value(input).view())?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::Spmm { matrix, input }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu(x))
    }

    /// Inverted dropout: in training mode each entry is zeroed with probability `rate`
    /// and survivors are scaled by `1 / (1 - rate)`; otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { scale });
        let value = self.value(x) * &mask;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Dropout { input: x, mask }))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let value = row_softmax(&self.value(x).view());
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::RowSoftmax(x))
    }

    /// Attention-guided propagation over `N(i) ∪ {i}`. Returns the propagated states
    /// and the row-stochastic attention matrix (pattern `Ã`).
    pub fn attention_propagate(
        &mut self,
        h: Var,
        beta: Var,
        graph: &SparseGraph,
    ) -> Result<(Var, CsrMatrix)> {
        if self.value(h).nrows() != graph.num_nodes() {
            return Err(Error::dim(
                "attention_propagate",
                format!(
                    "{} state rows for a {}-node graph",
                    self.value(h).nrows(),
                    graph.num_nodes()
                ),
            ));
        }
        if shape(self.value(beta)) != (1, 1) {
            return Err(Error::dim("attention_propagate", "beta must be 1x1"));
        }
        let b = self.scalar(beta);
        let (value, cache) = attention::forward(&self.value(h).view(), b, graph);
        let matrix = cache.propagation_matrix();
        let rg = self.requires_grad(h) || self.requires_grad(beta);
        let out = self.push(
            value,
            rg,
            Op::Attention {
                input: h,
                beta,
                cache: Box::new(cache),
            },
        );
        Ok((out, matrix))
    }

    /// Summed negative log-likelihood `−Σ_{i∈mask} ln softmax(z_i)[y_i]`, with the
    /// softmax fused in via log-sum-exp. `labels[i]` is the class of node `i`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[usize],
    ) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::Input("cross-entropy over an empty index set".into()));
        }
        let z = self.value(logits);
        if labels.len() != z.nrows() {
            return Err(Error::dim(
                "cross_entropy_masked",
                format!("{} labels for {} rows", labels.len(), z.nrows()),
            ));
        }
        let mut loss = 0.0;
        let mut probs = Array2::zeros((mask.len(), z.ncols()));
        let mut mask_labels = Vec::with_capacity(mask.len());
        for (r, &i) in mask.iter().enumerate() {
            if i >= z.nrows() {
                return Err(Error::Input(format!("mask index {i} out of range")));
            }
            let y = labels[i];
            if y >= z.ncols() {
                return Err(Error::Input(format!("label {y} out of range for node {i}")));
            }
            let row = z.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            probs
                .row_mut(r)
                .assign(&row.mapv(|v| (v - lse).exp()));
            mask_labels.push(y);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            rg,
            Op::CrossEntropy {
                logits,
                mask: mask.to_vec(),
                labels: mask_labels,
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.value(a) + self.value(b);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.value(a) * self.value(b);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).iter().map(|v| v * v).sum());
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::SumSquares(x))
    }

    /// Populates gradients of every node that requires one by a reverse sweep from
    /// `loss`. Previously stored gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (target, contribution) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[target.0].grad {
                    Some(acc) => *acc += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.dot(&self.value(*b).t())));
                }
                if rg(*b) {
                    out.push((*b, self.value(*a).t().dot(g)));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let k = x.ncols();
                if rg(*input) {
                    out.push((*input, g.dot(&w.slice(ndarray::s![..k, ..]).t())));
                }
                if rg(*weight) {
                    let mut gw = Array2::zeros(w.raw_dim());
                    gw.slice_mut(ndarray::s![..k, ..]).assign(&x.t().dot(g));
                    if *bias {
                        gw.row_mut(k).assign(&g.sum_axis(Axis(0)));
                    }
                    out.push((*weight, gw));
                }
            }
            Op::SparseLinear {
                input,
                weight,
                bias,
            } => {
                if rg(*weight) {
                    let w = self.value(*weight);
                    let k = input.ncols();
                    let mut gw = Array2::zeros(w.raw_dim());
                    let gx = input
                        .spmm_transposed(&g.view())
                        .expect("shapes checked in forward");
                    gw.slice_mut(ndarray::s![..k, ..]).assign(&gx);
                    if *bias {
                        gw.row_mut(k).assign(&g.sum_axis(Axis(0)));
                    }
                    out.push((*weight, gw));
                }
            }
            Op::AddBias { input, weight } => {
                if rg(*input) {
                    out.push((*input, g.clone()));
                }
                if rg(*weight) {
                    let w = self.value(*weight);
                    let mut gw = Array2::zeros(w.raw_dim());
                    gw.row_mut(w.nrows() - 1).assign(&g.sum_axis(Axis(0)));
                    out.push((*weight, gw));
                }
            }
            Op::Spmm { matrix, input } => {
                if rg(*input) {
                    let gx = matrix
                        .spmm_transposed(&g.view())
                        .expect("shapes checked in forward");
                    out.push((*input, gx));
                }
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(*x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                out.push((*x, gx));
            }
            Op::Dropout { input, mask } => out.push((*input, g * mask)),
            Op::RowSoftmax(x) => {
                let s = &node.value;
                let mut gx = g * s;
                let dots = gx.sum_axis(Axis(1));
                for (mut row, (srow, d)) in gx
                    .rows_mut()
                    .into_iter()
                    .zip(s.rows().into_iter().zip(dots.iter()))
                {
                    row.scaled_add(-d, &srow);
                }
                out.push((*x, gx));
            }
            Op::Attention { input, beta, cache } => {
                let (gh, gb) = attention::backward(&self.value(*input).view(), &g.view(), cache);
                if rg(*input) {
                    out.push((*input, gh));
                }
                if rg(*beta) {
                    out.push((*beta, Array2::from_elem((1, 1), gb)));
                }
            }
            Op::CrossEntropy {
                logits,
                mask,
                labels,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut gz = Array2::zeros(self.value(*logits).raw_dim());
                for (r, (&i, &y)) in mask.iter().zip(labels).enumerate() {
                    let mut row = gz.row_mut(i);
                    row.scaled_add(scale, &probs.row(r));
                    row[y] -= scale;
                }
                out.push((*logits, gz));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g * self.value(*b)));
                }
                if rg(*b) {
                    out.push((*b, g * self.value(*a)));
                }
            }
            Op::Scale(x, f) => out.push((*x, g * *f)),
            Op::Sum(x) => out.push((*x, Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]))),
            Op::SumSquares(x) => out.push((*x, self.value(*x) * (2.0 * g[[0, 0]]))),
        }
        out
    }

    /// Per-node shapes and auxiliary storage, in recording order.
    pub fn footprint(&self) -> Vec<NodeFootprint> {
        self.nodes
            .iter()
            .map(|node| {
                let (op, aux_len) = match &node.op {
                    Op::Leaf => ("leaf", 0),
                    Op::MatMul(..) => ("matmul", 0),
                    Op::Linear { .. } => ("linear", 0),
                    Op::AddBias { .. } => ("add_bias", 0),
                    Op::SparseLinear { input, .. } => ("sparse_linear", input.storage_len()),
                    Op::Spmm { matrix, .. } => ("spmm", matrix.storage_len()),
                    Op::Relu(_) => ("relu", 0),
                    Op::Dropout { mask, .. } => ("dropout", mask.len()),
                    Op::RowSoftmax(_) => ("row_softmax", 0),
                    Op::Attention { cache, .. } => ("attention_propagate", cache.storage_len()),
                    Op::CrossEntropy { probs, mask, .. } => {
                        ("cross_entropy", probs.len() + 2 * mask.len())
                    }
                    Op::Add(..) => ("add", 0),
                    Op::Mul(..) => ("mul", 0),
                    Op::Scale(..) => ("scale", 0),
                    Op::Sum(_) => ("sum", 0),
                    Op::SumSquares(_) => ("sum_squares", 0),
                };
                NodeFootprint {
                    op,
                    shape: shape(&node.value),
                    aux_len,
                }
            })
            .collect()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Inverted dropout over the stored entries of a constant sparse matrix. Implicit
/// zeros stay zero, so this matches dense dropout on the same matrix.
pub fn dropout_sparse<'m, R: Rng + ?Sized>(
    x: &'m CsrMatrix,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Cow<'m, CsrMatrix>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(Cow::Borrowed(x));
    }
    let scale = 1.0 / (1.0 - rate);
    Ok(Cow::Owned(x.map_values(|v| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            v * scale
        }
    })))
}
