//! Full-batch Adam training with weight decay and validation-driven model selection.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{forward, infer, predict, GraphInputs, ModelParams, ModelSpec};
use crate::tensor::{Tape, Var};

/// How the returned parameters are chosen among epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EarlyStop {
    /// Keep the epoch maximizing mean validation accuracy over the trailing window.
    WindowAverage { window: usize },
    /// Keep the single best-validation-accuracy epoch.
    BestEpoch,
    /// Stop once validation loss exceeds the mean of the previous `window` epochs and
    /// keep the parameters at that point.
    GcnWindow { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        match self.early_stop {
            EarlyStop::WindowAverage { window } | EarlyStop::GcnWindow { window } if window == 0 => {
                Err(Error::Config("early-stopping window must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Adam with bias-corrected moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` from the matching entry of `grads`.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam_step", "parameter and gradient counts differ"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            self.second = self.first.clone();
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first[k].dim() {
                return Err(Error::dim(
                    "adam_step",
                    format!("tensor {k}: param {:?}, grad {:?}", p.dim(), g.dim()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// `data_loss + weight_decay · Σ_k ‖θ_k‖²` over every trainable tensor, bias rows and
/// β included.
pub fn total_loss(tape: &mut Tape<'_>, data_loss: Var, trainable: &[Var], weight_decay: f64) -> Result<Var> {
    if weight_decay == 0.0 {
        return Ok(data_loss);
    }
    let mut acc = data_loss;
    for &p in trainable {
        let sq = tape.sum_squares(p);
        let term = tape.scale(sq, weight_decay);
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub stopped_early: bool,
    pub test_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Per-epoch log as `epoch,train_loss,val_acc`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_acc")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_acc)?;
        }
        Ok(())
    }

    /// Everything except the per-epoch log, as one JSON object.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs_run": self.epochs.len(),
            "selected_epoch": self.selected_epoch,
            "stopped_early": self.stopped_early,
            "selected_val_acc": self.epochs.get(self.selected_epoch.saturating_sub(1)).map(|e| e.val_acc),
            "test_accuracy": self.test_accuracy,
            "wall_clock_secs": self.wall_clock_secs,
        })
    }

    /// Reports are equal apart from timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.selected_epoch == other.selected_epoch
            && self.stopped_early == other.stopped_early
            && self.test_accuracy == other.test_accuracy
    }
}

/// Fraction of `indices` whose arg-max prediction equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("accuracy over an empty index set".into()));
    }
    let (pred, _) = predict(logits);
    let hits = indices.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / indices.len() as f64)
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &GraphInputs,
    labels: &[usize],
    indices: &[usize],
) -> Result<f64> {
    if indices.iter().any(|&i| i >= labels.len()) {
        return Err(Error::Input("evaluation index out of range".into()));
    }
    let (logits, _) = infer(spec, params, inputs, false)?;
    accuracy(&logits, labels, indices)
}

fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize], indices: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in indices {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[labels[i]];
    }
    total / indices.len() as f64
}

fn trainable_tensors(params: &ModelParams, spec: &ModelSpec) -> Vec<Array2<f64>> {
    let mut out = vec![params.w0.clone(), params.w1.clone()];
    for (t, &b) in params.betas.iter().enumerate() {
        if !(t == 0 && spec.freeze_first_beta) {
            out.push(Array2::from_elem((1, 1), b));
        }
    }
    out
}

fn write_back(params: &mut ModelParams, spec: &ModelSpec, tensors: Vec<Array2<f64>>) {
    let mut it = tensors.into_iter();
    params.w0 = it.next().expect("w0");
    params.w1 = it.next().expect("w1");
    for (t, b) in params.betas.iter_mut().enumerate() {
        if !(t == 0 && spec.freeze_first_beta) {
            *b = it.next().expect("beta")[[0, 0]];
        }
    }
}

/// One forward/backward/update step in training mode. Returns the objective value.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    spec: &ModelSpec,
    params: &mut ModelParams,
    inputs: &GraphInputs,
    labels: &[usize],
    train_idx: &[usize],
    weight_decay: f64,
    optimizer: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, spec);
    let out = forward(&mut tape, spec, &vars, inputs, true, false, rng)?;
    let data = tape.cross_entropy_masked(out.logits, labels, train_idx)?;
    let trainable = vars.trainable(&tape);
    let objective = total_loss(&mut tape, data, &trainable, weight_decay)?;
    let value = tape.scalar(objective);
    if !value.is_finite() {
        return Err(Error::Divergence {
            epoch: optimizer.steps_taken() as usize + 1,
            detail: format!("objective is {value}"),
        });
    }
    tape.backward(objective)?;
    let grads: Vec<Array2<f64>> = trainable
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(v).raw_dim()))
        })
        .collect();
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            epoch: optimizer.steps_taken() as usize + 1,
            detail: "non-finite gradient".into(),
        });
    }
    let mut tensors = trainable_tensors(params, spec);
    optimizer.step(&mut tensors, &grads)?;
    write_back(params, spec, tensors);
    Ok(value)
}

/// Trains from `params` and returns the selected parameters with the epoch log.
/// Test accuracy is measured on the selected parameters when the split has a test set.
pub fn train(
    spec: &ModelSpec,
    mut params: ModelParams,
    inputs: &GraphInputs,
    labels: &[usize],
    split: &Split,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    spec.validate()?;
    config.validate()?;
    params.check_shapes(spec)?;
    if labels.len() != inputs.num_nodes() {
        return Err(Error::dim("train", "label count differs from node count"));
    }
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    split.validate(inputs.num_nodes())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate);
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut val_losses: Vec<f64> = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    let mut selected: Option<(usize, ModelParams)> = None;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(
            spec,
            &mut params,
            inputs,
            labels,
            &split.train,
            config.weight_decay,
            &mut optimizer,
            &mut rng,
        )?;
        let (logits, _) = infer(spec, &params, inputs, false)?;
        let val_acc = accuracy(&logits, labels, &split.validation)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });

        match config.early_stop {
            EarlyStop::WindowAverage { window } => {
                let window = window.min(config.max_epochs);
                if epoch >= window {
                    let recent = &epochs[epoch - window..];
                    let mean = recent.iter().map(|e| e.val_acc).sum::<f64>() / window as f64;
                    if mean > best_score {
                        best_score = mean;
                        selected = Some((epoch, params.clone()));
                    }
                }
            }
            EarlyStop::BestEpoch => {
                if val_acc > best_score {
                    best_score = val_acc;
                    selected = Some((epoch, params.clone()));
                }
            }
            EarlyStop::GcnWindow { window } => {
                let loss = mean_cross_entropy(&logits, labels, &split.validation);
                let prev = &val_losses[val_losses.len().saturating_sub(window)..];
                let stop = val_losses.len() >= window
                    && loss > prev.iter().sum::<f64>() / prev.len() as f64;
                val_losses.push(loss);
                if stop {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (selected_epoch, chosen) = match selected {
        Some(s) => s,
        None => (epochs.len(), params),
    };
    let test_accuracy = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(spec, &chosen, inputs, labels, &split.test)?)
    };
    let report = TrainReport {
        epochs,
        selected_epoch,
        stopped_early,
        test_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((chosen, report))
}
