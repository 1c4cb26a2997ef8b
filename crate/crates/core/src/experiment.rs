//! Repeated training runs under the three split protocols, with per-dataset
//! hyperparameter presets and aggregation into a summary record.
//!
//! Every run derives its own seed from the base seed and its run index, so results do
//! not depend on how runs are scheduled across threads.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{fixed_split_path, kfold_splits, load_dataset, load_fixed_split, random_split, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{init_params, GraphInputs, ModelKind, ModelParams, ModelSpec};
use crate::train::{train, EarlyStop, TrainConfig, TrainReport};

/// Environment variable naming the directory that holds dataset directories.
pub const DATA_ROOT_ENV: &str = "AGNN_DATA_ROOT";

/// Directory under which named datasets are looked up: `$AGNN_DATA_ROOT`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// An existing directory is used as is; anything else is taken as a dataset name
/// under [`data_root`].
pub fn resolve_dataset(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.to_path_buf()
    } else {
        data_root().join(arg)
    }
}

/// Loads a dataset with row-normalized features, plus its fixed split when present.
pub fn load_prepared(dir: &Path) -> Result<(Dataset, Option<Split>)> {
    let dataset = load_dataset(dir)?.row_normalized()?;
    let fixed = if fixed_split_path(dir).exists() {
        let split = load_fixed_split(dir)?;
        split.validate(dataset.num_nodes())?;
        Some(split)
    } else {
        None
    };
    Ok((dataset, fixed))
}

/// How nodes are split and how many repetitions are run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// The dataset's canonical split, trained `runs` times from different initializations.
    Fixed { runs: usize },
    /// `runs` uniformly drawn splits with the canonical split's sizes.
    Random { runs: usize },
    /// `trials` repetitions of `k`-fold cross validation; each fold's held-out part is
    /// both the validation and the reported set.
    Kfold { k: usize, trials: usize },
}

impl SplitMode {
    pub fn name(&self) -> &'static str {
        match self {
            SplitMode::Fixed { .. } => "fixed",
            SplitMode::Random { .. } => "random",
            SplitMode::Kfold { .. } => "kfold",
        }
    }

    /// Number of reported accuracies (k-fold trials count once each).
    pub fn repetitions(&self) -> usize {
        match *self {
            SplitMode::Fixed { runs } | SplitMode::Random { runs } => runs,
            SplitMode::Kfold { trials, .. } => trials,
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub model: ModelKind,
    pub split: SplitMode,
    pub layers: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub freeze_first_beta: bool,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

/// Benchmark families with tuned defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    CiteSeer,
    Cora,
    PubMed,
}

impl Benchmark {
    /// Recognizes a dataset by name, ignoring case and punctuation.
    pub fn from_name(name: &str) -> Option<Self> {
        let key: String = name
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "citeseer" => Some(Benchmark::CiteSeer),
            "cora" => Some(Benchmark::Cora),
            "pubmed" => Some(Benchmark::PubMed),
            _ => None,
        }
    }
}

impl RunConfig {
    /// Tuned defaults for a model, benchmark and split protocol.
    ///
    /// GLN and GCN share one recipe everywhere (16 hidden units, lr 0.01, weight decay
    /// 5e-4, dropout 0.5, 200 epochs, loss-window early stopping). AGNN uses per-dataset
    /// settings, selecting by trailing mean validation accuracy, or by the single best
    /// epoch under cross validation. Unknown datasets get the Cora fixed-split settings
    /// without the frozen first layer.
    pub fn preset(model: ModelKind, benchmark: Option<Benchmark>, split: SplitMode) -> Self {
        let mut cfg = RunConfig {
            dataset: PathBuf::new(),
            model,
            split,
            layers: 2,
            hidden: 16,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            epochs: 200,
            freeze_first_beta: false,
            early_stop: EarlyStop::GcnWindow { window: 10 },
            seed: 0,
            output: None,
        };
        if model != ModelKind::Agnn {
            return cfg;
        }
        cfg.epochs = 1000;
        cfg.early_stop = EarlyStop::WindowAverage { window: 4 };
        use Benchmark::*;
        let (layers, lr, wd, epochs, freeze) = match (split, benchmark) {
            (SplitMode::Fixed { .. }, Some(CiteSeer)) => (4, 0.005, 5e-4, 1000, false),
            (SplitMode::Fixed { .. }, Some(Cora)) | (_, None) => (2, 0.01, 5e-4, 1000, benchmark.is_some()),
            (SplitMode::Fixed { .. }, Some(PubMed)) => (4, 0.008, 1e-3, 400, false),
            (SplitMode::Random { .. }, Some(CiteSeer)) => (4, 0.01, 5e-4, 1000, false),
            (SplitMode::Random { .. }, Some(Cora)) => (3, 0.01, 5e-4, 1000, false),
            (SplitMode::Random { .. }, Some(PubMed)) => (4, 0.008, 1e-3, 1000, false),
            (SplitMode::Kfold { .. }, Some(_)) => {
                cfg.dropout = 0.25;
                cfg.early_stop = EarlyStop::BestEpoch;
                (3, 0.04, 5e-4, 500, false)
            }
        };
        cfg.layers = layers;
        cfg.learning_rate = lr;
        cfg.weight_decay = wd;
        cfg.epochs = epochs;
        cfg.freeze_first_beta = freeze;
        cfg
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            layers: self.layers,
            hidden: self.hidden,
            input_dim: dataset.input_dim(),
            num_classes: dataset.num_classes(),
            freeze_first_beta: self.freeze_first_beta && self.model == ModelKind::Agnn,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_epochs: self.epochs,
            early_stop: self.early_stop,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.split {
            SplitMode::Fixed { runs } | SplitMode::Random { runs } if runs == 0 => {
                Err(Error::Config("runs must be at least 1".into()))
            }
            SplitMode::Kfold { k, trials } if k < 2 || trials == 0 => {
                Err(Error::Config("k-fold needs k >= 2 and at least one trial".into()))
            }
            _ => self.train_config(self.seed).validate(),
        }
    }
}

/// Seed of the `index`-th stream derived from `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One training job: which split it uses and the seed driving initialization and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub index: usize,
    /// Repetition this job contributes to (the trial, in k-fold mode).
    pub repetition: usize,
    /// Fold within the trial; zero outside k-fold mode.
    pub fold: usize,
    pub seed: u64,
    pub split: Split,
}

/// Split sizes used for random splits: those of the canonical split when known,
/// otherwise 20 labels per class, 500 validation and 1000 test nodes (capped to fit).
pub fn random_split_sizes(dataset: &Dataset, fixed: Option<&Split>) -> (usize, usize, usize) {
    if let Some(s) = fixed {
        return s.sizes();
    }
    let n = dataset.num_nodes();
    let train = (20 * dataset.num_classes()).min(n);
    let val = 500.min(n - train);
    let test = 1000.min(n - train - val);
    (train, val, test)
}

/// Enumerates the jobs of an experiment in run-index order.
pub fn plan_jobs(cfg: &RunConfig, dataset: &Dataset, fixed: Option<&Split>) -> Result<Vec<Job>> {
    let n = dataset.num_nodes();
    let mut jobs = Vec::new();
    match cfg.split {
        SplitMode::Fixed { runs } => {
            let split = fixed
                .ok_or_else(|| Error::Input("fixed split requested but the dataset has none".into()))?;
            split.validate(n)?;
            for r in 0..runs {
                jobs.push(Job {
                    index: r,
                    repetition: r,
                    fold: 0,
                    seed: derive_seed(cfg.seed, r as u64),
                    split: split.clone(),
                });
            }
        }
        SplitMode::Random { runs } => {
            let sizes = random_split_sizes(dataset, fixed);
            for r in 0..runs {
                let seed = derive_seed(cfg.seed, r as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let split = random_split(n, sizes, &mut rng)?;
                jobs.push(Job {
                    index: r,
                    repetition: r,
                    fold: 0,
                    seed,
                    split,
                });
            }
        }
        SplitMode::Kfold { k, trials } => {
            for t in 0..trials {
                let trial_seed = derive_seed(cfg.seed, t as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
                for (f, split) in kfold_splits(n, k, &mut rng)?.into_iter().enumerate() {
                    let index = t * k + f;
                    jobs.push(Job {
                        index,
                        repetition: t,
                        fold: f,
                        seed: derive_seed(trial_seed, f as u64),
                        split,
                    });
                }
            }
        }
    }
    Ok(jobs)
}

/// Result of one job.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub job: Job,
    /// Accuracy on the job's reported set, in [0, 1].
    pub accuracy: f64,
    pub report: TrainReport,
    pub params: ModelParams,
}

/// Aggregate record of an experiment. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub model: ModelKind,
    pub layers: usize,
    pub split_mode: String,
    pub n_runs: usize,
    pub mean: f64,
    /// Sample standard deviation over √n_runs; absent for a single run.
    pub stderr: Option<f64>,
    pub accuracies: Vec<f64>,
    pub seed: u64,
    pub config: RunConfig,
}

/// Mean and standard error (sample standard deviation over √n) of `values`.
pub fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn run_job(cfg: &RunConfig, spec: &ModelSpec, inputs: &GraphInputs, labels: &[usize], job: Job) -> Result<RunOutcome> {
    let params = init_params(spec, job.seed)?;
    let (params, report) = train(spec, params, inputs, labels, &job.split, &cfg.train_config(job.seed))?;
    let accuracy = report
        .test_accuracy
        .ok_or_else(|| Error::Input(format!("run {} has an empty test set", job.index)))?;
    Ok(RunOutcome {
        job,
        accuracy,
        report,
        params,
    })
}

/// Runs every job of the experiment (in parallel) and aggregates the results.
/// `dataset` is used as given; callers normalize features beforehand.
pub fn run_experiment(
    cfg: &RunConfig,
    dataset: &Dataset,
    fixed: Option<&Split>,
) -> Result<(Summary, Vec<RunOutcome>)> {
    cfg.validate()?;
    let spec = cfg.model_spec(dataset);
    spec.validate()?;
    let inputs = GraphInputs::new(dataset.features.clone(), dataset.graph.clone())?;
    let jobs = plan_jobs(cfg, dataset, fixed)?;
    let mut outcomes = jobs
        .into_par_iter()
        .map(|job| run_job(cfg, &spec, &inputs, &dataset.labels, job))
        .collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.job.index);

    let reps = cfg.split.repetitions();
    let mut per_rep = vec![(0.0, 0usize); reps];
    for o in &outcomes {
        per_rep[o.job.repetition].0 += o.accuracy;
        per_rep[o.job.repetition].1 += 1;
    }
    let accuracies: Vec<f64> = per_rep.iter().map(|&(s, c)| 100.0 * s / c as f64).collect();
    let (mean, stderr) = mean_and_stderr(&accuracies);
    let summary = Summary {
        dataset: dataset.name.clone(),
        model: cfg.model,
        layers: spec.propagation_layers(),
        split_mode: cfg.split.name().into(),
        n_runs: reps,
        mean,
        stderr,
        accuracies,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    Ok((summary, outcomes))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes `summary.json`, `runs.csv`, and per-run epoch logs and checkpoints into `dir`.
pub fn write_outputs(
    dir: &Path,
    summary: &Summary,
    outcomes: &[RunOutcome],
    spec: &ModelSpec,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("runs.csv");
    let mut w = create(&path)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p, e)
    };
    writeln!(w, "run,repetition,fold,seed,accuracy,selected_epoch,epochs_run,stopped_early,wall_clock_secs")
        .map_err(io(&path))?;
    for o in outcomes {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.3}",
            o.job.index,
            o.job.repetition,
            o.job.fold,
            o.job.seed,
            o.accuracy,
            o.report.selected_epoch,
            o.report.epochs.len(),
            o.report.stopped_early,
            o.report.wall_clock_secs
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    for o in outcomes {
        let path = dir.join(format!("run_{:03}.csv", o.job.index));
        let mut w = create(&path)?;
        o.report.write_csv(&mut w).map_err(io(&path))?;
        w.flush().map_err(io(&path))?;
        checkpoint::save(dir.join(format!("run_{:03}.ckpt", o.job.index)), spec, &o.params)?;
    }
    Ok(())
}

/// One row of a layer sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layers: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
    pub accuracies: Vec<f64>,
}

/// Trains AGNN once per requested layer count with otherwise identical settings.
pub fn sweep_layers(
    cfg: &RunConfig,
    dataset: &Dataset,
    fixed: Option<&Split>,
    layer_counts: &[usize],
) -> Result<Vec<SweepRow>> {
    if cfg.model != ModelKind::Agnn {
        return Err(Error::Config("layer sweep requires AGNN".into()));
    }
    if layer_counts.is_empty() {
        return Err(Error::Config("no layer counts given".into()));
    }
    layer_counts
        .iter()
        .map(|&layers| {
            let cfg = RunConfig {
                layers,
                ..cfg.clone()
            };
            let (s, _) = run_experiment(&cfg, dataset, fixed)?;
            Ok(SweepRow {
                layers,
                mean: s.mean,
                stderr: s.stderr,
                accuracies: s.accuracies,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "layers,mean,stderr,runs")?;
    for r in rows {
        let se = r.stderr.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.layers, r.mean, se, r.accuracies.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{citation_like, two_cliques, CitationLikeConfig};
    use approx::assert_relative_eq;

    #[test]
    fn presets_follow_the_tuned_table() {
        let fixed = SplitMode::Fixed { runs: 10 };
        let c = RunConfig::preset(ModelKind::Agnn, Some(Benchmark::Cora), fixed);
        assert_eq!((c.layers, c.freeze_first_beta, c.learning_rate), (2, true, 0.01));
        let p = RunConfig::preset(ModelKind::Agnn, Some(Benchmark::PubMed), fixed);
        assert_eq!((p.layers, p.learning_rate, p.weight_decay, p.epochs), (4, 0.008, 1e-3, 400));
        let s = RunConfig::preset(ModelKind::Agnn, Some(Benchmark::CiteSeer), fixed);
        assert_eq!((s.layers, s.learning_rate, s.epochs), (4, 0.005, 1000));
        let r = RunConfig::preset(ModelKind::Agnn, Some(Benchmark::Cora), SplitMode::Random { runs: 5 });
        assert_eq!((r.layers, r.freeze_first_beta), (3, false));
        let k = RunConfig::preset(ModelKind::Agnn, Some(Benchmark::Cora), SplitMode::Kfold { k: 3, trials: 1 });
        assert_eq!((k.layers, k.learning_rate, k.dropout, k.epochs), (3, 0.04, 0.25, 500));
        assert_eq!(k.early_stop, EarlyStop::BestEpoch);
        let g = RunConfig::preset(ModelKind::Gln, Some(Benchmark::PubMed), fixed);
        assert_eq!((g.hidden, g.learning_rate, g.epochs), (16, 0.01, 200));
        assert_eq!(g.early_stop, EarlyStop::GcnWindow { window: 10 });
        assert_eq!(Benchmark::from_name("Cite-Seer"), Some(Benchmark::CiteSeer));
        assert_eq!(Benchmark::from_name("toy"), None);
    }

    #[test]
    fn stderr_is_sample_sd_over_root_n() {
        let (m, se) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        // sample variance 5/3
        assert_relative_eq!(se.unwrap(), (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert_eq!(mean_and_stderr(&[0.7]), (0.7, None));
    }

    #[test]
    fn jobs_are_deterministic_and_distinct() {
        let (ds, fixed) = citation_like(&CitationLikeConfig::default(), 0).unwrap();
        let mut cfg = RunConfig::preset(ModelKind::Agnn, None, SplitMode::Random { runs: 3 });
        cfg.seed = 5;
        let a = plan_jobs(&cfg, &ds, Some(&fixed)).unwrap();
        assert_eq!(a, plan_jobs(&cfg, &ds, Some(&fixed)).unwrap());
        assert_ne!(a[0].split, a[1].split);
        assert!(a.iter().all(|j| j.split.sizes() == fixed.sizes()));

        cfg.split = SplitMode::Kfold { k: 3, trials: 2 };
        let k = plan_jobs(&cfg, &ds, None).unwrap();
        assert_eq!(k.len(), 6);
        assert_eq!(k.iter().map(|j| j.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        let mut covered: Vec<usize> = k[..3].iter().flat_map(|j| j.split.test.clone()).collect();
        covered.sort_unstable();
        assert_eq!(covered, (0..ds.num_nodes()).collect::<Vec<_>>());
    }

    #[test]
    fn experiment_is_order_independent_and_reproducible() {
        let (ds, split) = two_cliques(6, 7);
        let mut cfg = RunConfig::preset(ModelKind::Gln, None, SplitMode::Fixed { runs: 3 });
        cfg.epochs = 30;
        cfg.seed = 7;
        let (a, _) = run_experiment(&cfg, &ds, Some(&split)).unwrap();
        let (b, _) = run_experiment(&cfg, &ds, Some(&split)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_runs, 3);
        assert_eq!(a.split_mode, "fixed");
        assert!(plan_jobs(&cfg, &ds, None).is_err());
    }

    #[test]
    fn sweep_refuses_non_attention_models() {
        let (ds, split) = two_cliques(4, 4);
        let cfg = RunConfig::preset(ModelKind::Gcn, None, SplitMode::Fixed { runs: 1 });
        assert!(sweep_layers(&cfg, &ds, Some(&split), &[1, 2]).is_err());
    }
}
