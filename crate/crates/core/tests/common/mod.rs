//! Independent reference implementations shared by the integration tests: central
//! finite differences and dense brute-force evaluations of every model.

#![allow(dead_code)]

use agnn::graph::{CsrMatrix, SparseGraph};
use agnn::model::ModelParams;
use agnn::tensor::{Tape, Var};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Erdős–Rényi graph with edge probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> SparseGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    SparseGraph::from_edges(n, &edges).unwrap()
}

/// Nonnegative sparse-ish bag-of-words style features.
pub fn random_features(rng: &mut impl Rng, n: usize, d: usize, density: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| {
        if rng.random::<f64>() < density {
            rng.random_range(0.1..1.0)
        } else {
            0.0
        }
    })
}

/// Elementwise relative error with a small absolute floor on the denominator.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut g = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Compares analytic and central-difference gradients of the scalar
/// `Σ (build(inputs) ⊙ C)` for a fixed random `C`, with respect to every input.
/// Returns the worst relative error over all inputs.
pub fn gradient_check<'g>(
    inputs: &[Array2<f64>],
    weight_seed: u64,
    build: impl Fn(&mut Tape<'g>, &[Var]) -> Var,
) -> f64 {
    let scalar = |tape: &mut Tape<'g>, vars: &[Var], weights: &mut Option<Array2<f64>>| -> Var {
        let out = build(tape, vars);
        let (r, c) = tape.shape(out);
        let w = weights.get_or_insert_with(|| uniform(&mut rng(weight_seed), r, c, 1.0)).clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let mut weights = None;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = scalar(&mut tape, &vars, &mut weights);
    tape.backward(loss).unwrap();
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim())))
        .collect();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let numeric = numeric_grad(x, |probe| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(m, other)| tape.param(if m == k { probe.clone() } else { other.clone() }))
                .collect();
            let loss = scalar(&mut tape, &vars, &mut weights);
            tape.scalar(loss)
        });
        worst = worst.max(max_rel_err(&analytic[k], &numeric));
    }
    worst
}

/// `A + I` as a dense 0/1 matrix.
pub fn dense_adjacency_with_loops(g: &SparseGraph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = Array2::eye(n);
    for (i, j) in g.edges() {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    a
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn dense_sym_norm(g: &SparseGraph) -> Array2<f64> {
    let a = dense_adjacency_with_loops(g);
    let d: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
}

/// Softmax over `N(i) ∪ {i}` of `β cos(h_i, h_j)`, computed entry by entry.
pub fn dense_attention(h: &Array2<f64>, beta: f64, g: &SparseGraph) -> Array2<f64> {
    let a = dense_adjacency_with_loops(g);
    let n = h.nrows();
    let norm = |i: usize| h.row(i).dot(&h.row(i)).sqrt();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                let cos = h.row(i).dot(&h.row(j)) / (norm(i) * norm(j) + 1e-12);
                p[[i, j]] = (beta * cos).exp();
                z += p[[i, j]];
            }
        }
        for j in 0..n {
            p[[i, j]] /= z;
        }
    }
    p
}

/// `[x, 1] · W` for a bias-augmented weight.
pub fn affine(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let k = x.ncols();
    x.dot(&w.slice(s![..k, ..])) + w.row(k)
}

pub fn relu(x: Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `[P² X, 1] W0` then `[·, 1] W1`.
pub fn gln_dense(params: &ModelParams, x: &Array2<f64>, g: &SparseGraph) -> Array2<f64> {
    let p = dense_sym_norm(g);
    let px = p.dot(&p.dot(x));
    affine(&affine(&px, &params.w0), &params.w1)
}

/// `H = ReLU([P X, 1] W0)`, logits `[P H, 1] W1`.
pub fn gcn_dense(params: &ModelParams, x: &Array2<f64>, g: &SparseGraph) -> Array2<f64> {
    let p = dense_sym_norm(g);
    let h = relu(affine(&p.dot(x), &params.w0));
    affine(&p.dot(&h), &params.w1)
}

/// `H = ReLU([X, 1] W0)`, then `H ← P(β_t, H) H` per layer, logits `[H, 1] W1`.
/// Also returns every layer's attention matrix.
pub fn agnn_dense(params: &ModelParams, x: &Array2<f64>, g: &SparseGraph) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mut h = relu(affine(x, &params.w0));
    let mut ps = Vec::new();
    for &beta in &params.betas {
        let p = dense_attention(&h, beta, g);
        h = p.dot(&h);
        ps.push(p);
    }
    (affine(&h, &params.w1), ps)
}

pub fn csr(x: &Array2<f64>) -> CsrMatrix {
    CsrMatrix::from_dense(&x.view())
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Rows moved so that row `i` of the input becomes row `perm[i]`.
pub fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, &pi) in perm.iter().enumerate() {
        out.row_mut(pi).assign(&x.row(i));
    }
    out
}

/// Every differentiable tape operation, by name.
pub const OPS: &[&str] = &[
    "matmul",
    "linear",
    "linear_no_bias",
    "sparse_linear",
    "add_bias",
    "spmm",
    "relu",
    "dropout",
    "row_softmax",
    "attention_propagate",
    "cross_entropy_masked",
    "add",
    "mul",
    "scale",
    "sum",
    "sum_squares",
];

/// Values bounded away from zero so that ReLU kinks are never straddled.
fn signed_away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Worst relative error between analytic and central-difference gradients of one
/// operation on a random instance drawn from `seed`.
pub fn op_gradient_error(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..9);
    let d = r.random_range(1..5);
    let k = r.random_range(1..4);
    let w_seed = seed ^ 0xA5A5;
    match op {
        "matmul" => {
            let ins = [uniform(&mut r, n, d, 1.0), uniform(&mut r, d, k, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.matmul(v[0], v[1]).unwrap())
        }
        "linear" | "linear_no_bias" => {
            let bias = op == "linear";
            let ins = [uniform(&mut r, n, d, 1.0), uniform(&mut r, d + 1, k, 1.0)];
            gradient_check(&ins, w_seed, move |t, v| t.linear(v[0], v[1], bias).unwrap())
        }
        "sparse_linear" => {
            let x = csr(&random_features(&mut r, n, d, 0.5));
            let bias = r.random::<bool>();
            let ins = [uniform(&mut r, d + 1, k, 1.0)];
            gradient_check(&ins, w_seed, |t, v| {
                t.sparse_linear(std::borrow::Cow::Owned(x.clone()), v[0], bias).unwrap()
            })
        }
        "add_bias" => {
            let ins = [uniform(&mut r, n, k, 1.0), uniform(&mut r, d + 1, k, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.add_bias(v[0], v[1]).unwrap())
        }
        "spmm" => {
            let g = random_graph(&mut r, n, 0.4);
            let p = agnn::NormalizedPropagator::new(&g).matrix().clone();
            let ins = [uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.spmm(&p, v[0]).unwrap())
        }
        "relu" => {
            let ins = [signed_away_from_zero(&mut r, n, d)];
            gradient_check(&ins, w_seed, |t, v| t.relu(v[0]))
        }
        "dropout" => {
            let rate = r.random_range(0.1..0.7);
            let ins = [uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| {
                // identical mask on every evaluation
                t.dropout(v[0], rate, true, &mut rng(seed)).unwrap()
            })
        }
        "row_softmax" => {
            let ins = [uniform(&mut r, n, d + 1, 2.0)];
            gradient_check(&ins, w_seed, |t, v| t.row_softmax(v[0]))
        }
        "attention_propagate" => {
            let g = random_graph(&mut r, n, 0.5);
            let ins = [signed_away_from_zero(&mut r, n, d + 1), uniform(&mut r, 1, 1, 2.0)];
            gradient_check(&ins, w_seed, |t, v| t.attention_propagate(v[0], v[1], &g).unwrap().0)
        }
        "cross_entropy_masked" => {
            let c = k + 1;
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let mut mask: Vec<usize> = (0..n).filter(|_| r.random::<bool>()).collect();
            if mask.is_empty() {
                mask.push(0);
            }
            let ins = [uniform(&mut r, n, c, 3.0)];
            gradient_check(&ins, w_seed, |t, v| t.cross_entropy_masked(v[0], &labels, &mask).unwrap())
        }
        "add" => {
            let ins = [uniform(&mut r, n, d, 1.0), uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.add(v[0], v[1]).unwrap())
        }
        "mul" => {
            let ins = [uniform(&mut r, n, d, 1.0), uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.mul(v[0], v[1]).unwrap())
        }
        "scale" => {
            let f = r.random_range(-3.0..3.0);
            let ins = [uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.scale(v[0], f))
        }
        "sum" => {
            let ins = [uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.sum(v[0]))
        }
        "sum_squares" => {
            let ins = [uniform(&mut r, n, d, 1.0)];
            gradient_check(&ins, w_seed, |t, v| t.sum_squares(v[0]))
        }
        other => panic!("unknown op {other}"),
    }
}

/// Random model instance: spec, parameters (nonzero biases and temperatures), graph
/// inputs with dense features, and labels.
pub struct ModelCase {
    pub spec: agnn::model::ModelSpec,
    pub params: ModelParams,
    pub inputs: agnn::model::GraphInputs,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn model_case(kind: agnn::model::ModelKind, seed: u64, max_nodes: usize) -> ModelCase {
    use agnn::model::{GraphInputs, ModelSpec};
    let mut r = rng(seed);
    let n = r.random_range(3..=max_nodes);
    let d_x = r.random_range(2..6);
    let d_y = r.random_range(2..4);
    let mut spec = ModelSpec::new(kind, d_x, d_y);
    spec.hidden = r.random_range(2..5);
    spec.dropout = 0.3;
    if kind == agnn::model::ModelKind::Agnn {
        spec.layers = r.random_range(1..4);
        spec.freeze_first_beta = r.random::<bool>();
    }
    let density = r.random_range(0.1..0.6);
    let g = random_graph(&mut r, n, density);
    let x = random_features(&mut r, n, d_x, 0.6);
    let w0 = uniform(&mut r, d_x + 1, spec.hidden, 1.0);
    let w1 = uniform(&mut r, spec.hidden + 1, d_y, 1.0);
    let betas = (0..spec.num_betas())
        .map(|t| {
            if t == 0 && spec.freeze_first_beta {
                0.0
            } else {
                r.random_range(-2.0..2.0)
            }
        })
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..d_y)).collect();
    let inputs = GraphInputs::new(csr(&x), g).unwrap();
    ModelCase {
        spec,
        params: ModelParams { w0, w1, betas },
        inputs,
        x,
        labels,
    }
}

/// Training objective (summed masked cross-entropy plus weight decay) through a
/// training-mode forward pass whose dropout masks are fixed by `dropout_seed`.
/// Returns the value and the gradients of `w0`, `w1` and every β (zero when frozen).
pub fn model_objective(case: &ModelCase, params: &ModelParams, mask: &[usize], dropout_seed: u64) -> (f64, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, &case.spec);
    let out = agnn::model::forward(&mut tape, &case.spec, &vars, &case.inputs, true, false, &mut rng(dropout_seed)).unwrap();
    let data = tape.cross_entropy_masked(out.logits, &case.labels, mask).unwrap();
    let trainable = vars.trainable(&tape);
    let loss = agnn::train::total_loss(&mut tape, data, &trainable, 5e-3).unwrap();
    tape.backward(loss).unwrap();
    let mut all = vec![vars.w0, vars.w1];
    all.extend(vars.betas.iter().copied());
    let grads = all
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim())))
        .collect();
    (tape.scalar(loss), grads)
}

/// Worst relative error of the full-model parameter gradients against central
/// differences, for a random instance of `kind`.
pub fn model_gradient_error(kind: agnn::model::ModelKind, seed: u64) -> f64 {
    let case = model_case(kind, seed, 10);
    let n = case.inputs.num_nodes();
    let mask: Vec<usize> = (0..n).step_by(2).collect();
    let (_, grads) = model_objective(&case, &case.params, &mask, seed);
    let mut tensors = case.params.tensors();
    let mut worst: f64 = 0.0;
    for k in 0..tensors.len() {
        if k >= 2 && k - 2 == 0 && case.spec.freeze_first_beta {
            continue;
        }
        let base = tensors[k].clone();
        let numeric = numeric_grad(&base, |probe| {
            tensors[k] = probe.clone();
            let params = ModelParams {
                w0: tensors[0].clone(),
                w1: tensors[1].clone(),
                betas: tensors[2..].iter().map(|b| b[[0, 0]]).collect(),
            };
            model_objective(&case, &params, &mask, seed).0
        });
        tensors[k] = base;
        worst = worst.max(max_rel_err(&grads[k], &numeric));
    }
    worst
}
