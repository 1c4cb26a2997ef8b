//! GLN, GCN and AGNN forward passes and parameter initialization.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::AttentionRecord;
use crate::error::{Error, Result};
use crate::graph::{CsrMatrix, NormalizedPropagator, SparseGraph};
use crate::tensor::{dropout_sparse, row_softmax, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gln,
    Gcn,
    Agnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gln => "gln",
            ModelKind::Gcn => "gcn",
            ModelKind::Agnn => "agnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gln" => Ok(ModelKind::Gln),
            "gcn" => Ok(ModelKind::Gcn),
            "agnn" => Ok(ModelKind::Agnn),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture and structural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of propagation layers. GLN and GCN always propagate twice.
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// AGNN only: pin the first layer's β at zero (uniform averaging).
    pub freeze_first_beta: bool,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind,
            layers: 2,
            hidden: 16,
            input_dim,
            num_classes,
            freeze_first_beta: false,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("feature and class dimensions must be positive".into()));
        }
        if self.kind == ModelKind::Agnn && self.layers == 0 {
            return Err(Error::Config("AGNN needs at least one propagation layer".into()));
        }
        if self.kind != ModelKind::Agnn && self.freeze_first_beta {
            return Err(Error::Config("freeze_first_beta only applies to AGNN".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Propagation depth as reported in summaries.
    pub fn propagation_layers(&self) -> usize {
        match self.kind {
            ModelKind::Agnn => self.layers,
            ModelKind::Gln | ModelKind::Gcn => 2,
        }
    }

    pub fn num_betas(&self) -> usize {
        match self.kind {
            ModelKind::Agnn => self.layers,
            ModelKind::Gln | ModelKind::Gcn => 0,
        }
    }
}

/// Learnable state. `w0` is `(d_x + 1) × d_h` and `w1` is `(d_h + 1) × d_y`; the last
/// row of each is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
    pub betas: Vec<f64>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Array2::from_shape_fn((fan_in + 1, fan_out), |_| rng.random_range(-limit..=limit));
    w.row_mut(fan_in).fill(0.0);
    w
}

/// Glorot-uniform weights with zero bias rows; trainable β start at 1, a frozen first
/// β is 0.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = glorot(&mut rng, spec.input_dim, spec.hidden);
    let w1 = glorot(&mut rng, spec.hidden, spec.num_classes);
    let betas = (0..spec.num_betas())
        .map(|t| if t == 0 && spec.freeze_first_beta { 0.0 } else { 1.0 })
        .collect();
    Ok(ModelParams { w0, w1, betas })
}

impl ModelParams {
    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let expect = [
            ("W0", self.w0.dim(), (spec.input_dim + 1, spec.hidden)),
            ("W1", self.w1.dim(), (spec.hidden + 1, spec.num_classes)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::dim(
                    "model parameters",
                    format!("{name} is {got:?}, expected {want:?}"),
                ));
            }
        }
        if self.betas.len() != spec.num_betas() {
            return Err(Error::dim(
                "model parameters",
                format!("{} betas for {} layers", self.betas.len(), spec.num_betas()),
            ));
        }
        Ok(())
    }

    /// Puts the parameters on a tape. Frozen β become constants.
    pub fn register<'a>(&self, tape: &mut Tape<'a>, spec: &ModelSpec) -> ParamVars {
        let w0 = tape.param(self.w0.clone());
        let w1 = tape.param(self.w1.clone());
        let betas = self
            .betas
            .iter()
            .enumerate()
            .map(|(t, &b)| {
                let value = Array2::from_elem((1, 1), b);
                if t == 0 && spec.freeze_first_beta {
                    tape.constant(value)
                } else {
                    tape.param(value)
                }
            })
            .collect();
        ParamVars { w0, w1, betas }
    }

    /// Flattened view over every parameter tensor, β as 1×1 arrays.
    pub fn tensors(&self) -> Vec<Array2<f64>> {
        let mut out = vec![self.w0.clone(), self.w1.clone()];
        out.extend(self.betas.iter().map(|&b| Array2::from_elem((1, 1), b)));
        out
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub w0: Var,
    pub w1: Var,
    pub betas: Vec<Var>,
}

impl ParamVars {
    /// Handles whose gradients drive optimization, in a fixed order:
    /// `w0`, `w1`, then each trainable β.
    pub fn trainable(&self, tape: &Tape<'_>) -> Vec<Var> {
        let mut out = vec![self.w0, self.w1];
        out.extend(self.betas.iter().copied().filter(|&b| tape.requires_grad(b)));
        out
    }
}

/// Graph-side inputs shared by every forward pass on one dataset.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub features: CsrMatrix,
    pub graph: SparseGraph,
    pub propagator: NormalizedPropagator,
}

impl GraphInputs {
    pub fn new(features: CsrMatrix, graph: SparseGraph) -> Result<Self> {
        if features.nrows() != graph.num_nodes() {
            return Err(Error::dim(
                "graph inputs",
                format!(
                    "{} feature rows for {} nodes",
                    features.nrows(),
                    graph.num_nodes()
                ),
            ));
        }
        let propagator = NormalizedPropagator::new(&graph);
        Ok(Self {
            features,
            graph,
            propagator,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub attention: Option<AttentionRecord>,
}

fn check_input_dim(spec: &ModelSpec, inputs: &GraphInputs) -> Result<()> {
    if inputs.features.ncols() != spec.input_dim {
        return Err(Error::dim(
            "forward",
            format!(
                "features have {} columns, model expects {}",
                inputs.features.ncols(),
                spec.input_dim
            ),
        ));
    }
    Ok(())
}

/// GLN: `Z = (P² X̄) W0 W1` with bias-augmented maps, computed as `P(P(X W0))` plus
/// bias, dropout on the features and on the hidden layer when training.
pub fn forward_gln<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    vars: &ParamVars,
    inputs: &'a GraphInputs,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let p = inputs.propagator.matrix();
    let x = dropout_sparse(&inputs.features, dropout, training, rng)?;
    let xw = tape.sparse_linear(x, vars.w0, false)?;
    let pxw = tape.spmm(p, xw)?;
    let ppxw = tape.spmm(p, pxw)?;
    let hidden = tape.add_bias(ppxw, vars.w0)?;
    let hidden = tape.dropout(hidden, dropout, training, rng)?;
    tape.linear(hidden, vars.w1, true)
}

/// GCN: `Z = P · ReLU(P X W0 + b0) · W1 + b1`.
pub fn forward_gcn<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    vars: &ParamVars,
    inputs: &'a GraphInputs,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let p = inputs.propagator.matrix();
    let x = dropout_sparse(&inputs.features, dropout, training, rng)?;
    let xw = tape.sparse_linear(x, vars.w0, false)?;
    let pxw = tape.spmm(p, xw)?;
    let pre = tape.add_bias(pxw, vars.w0)?;
    let hidden = tape.relu(pre);
    let hidden = tape.dropout(hidden, dropout, training, rng)?;
    let hw = tape.linear(hidden, vars.w1, false)?;
    let phw = tape.spmm(p, hw)?;
    tape.add_bias(phw, vars.w1)
}

/// AGNN: embedding `H¹ = ReLU(X̄ W0)`, then one attention-guided propagation per β,
/// then the output map `H^{ℓ+1} W1`.
pub fn forward_agnn<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    vars: &ParamVars,
    inputs: &'a GraphInputs,
    dropout: f64,
    training: bool,
    capture: bool,
    rng: &mut R,
) -> Result<(Var, Option<AttentionRecord>)> {
    let x = dropout_sparse(&inputs.features, dropout, training, rng)?;
    let embedded = tape.sparse_linear(x, vars.w0, true)?;
    let mut h = tape.relu(embedded);
    let mut layers = Vec::new();
    for &beta in &vars.betas {
        let (next, p) = tape.attention_propagate(h, beta, &inputs.graph)?;
        h = next;
        if capture {
            layers.push(p);
        }
    }
    let h = tape.dropout(h, dropout, training, rng)?;
    let logits = tape.linear(h, vars.w1, true)?;
    Ok((logits, capture.then(|| AttentionRecord::new(layers))))
}

/// Dispatches on the model kind. `capture` only has an effect for AGNN.
pub fn forward<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    spec: &ModelSpec,
    vars: &ParamVars,
    inputs: &'a GraphInputs,
    training: bool,
    capture: bool,
    rng: &mut R,
) -> Result<Forward> {
    check_input_dim(spec, inputs)?;
    let (logits, attention) = match spec.kind {
        ModelKind::Gln => (
            forward_gln(tape, vars, inputs, spec.dropout, training, rng)?,
            None,
        ),
        ModelKind::Gcn => (
            forward_gcn(tape, vars, inputs, spec.dropout, training, rng)?,
            None,
        ),
        ModelKind::Agnn => {
            forward_agnn(tape, vars, inputs, spec.dropout, training, capture, rng)?
        }
    };
    Ok(Forward { logits, attention })
}

/// Eval-mode logits on a fresh tape, optionally capturing AGNN attention.
pub fn infer(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    capture: bool,
) -> Result<(Array2<f64>, Option<AttentionRecord>)> {
    params.check_shapes(spec)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, spec);
    // eval mode never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, spec, &vars, inputs, false, capture, &mut rng)?;
    Ok((tape.value(out.logits).clone(), out.attention))
}

/// Class probabilities and arg-max labels (ties go to the lowest class index).
pub fn predict(logits: &Array2<f64>) -> (Vec<usize>, Array2<f64>) {
    let probs = row_softmax(&logits.view());
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    (labels, probs)
}
