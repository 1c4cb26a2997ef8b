use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use agnn::analysis::{class_relevance, edge_relevance, neighborhood, top_bottom_same_class, write_edge_relevance_csv};
use agnn::checkpoint;
use agnn::data::{write_dataset, write_fixed_split, Partition};
use agnn::experiment::{
    load_prepared, plan_jobs, resolve_dataset, run_experiment, sweep_layers, write_outputs, write_sweep_csv,
    Benchmark, RunConfig, SplitMode,
};
use agnn::model::{infer, ModelKind};
use agnn::synth::{citation_like, CitationLikeConfig};
use agnn::train::{accuracy, EarlyStop};
use agnn::{Error, Result};

/// Graph linear, graph convolutional and attention-based graph neural networks for
/// transductive node classification.
#[derive(Parser)]
#[command(name = "agnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, possibly repeatedly, and write a summary with checkpoints.
    Train(TrainArgs),
    /// Train AGNN for several propagation-layer counts and tabulate accuracy.
    SweepLayers {
        #[command(flatten)]
        run: TrainArgs,
        /// Layer counts to try, comma separated.
        #[arg(long = "values", value_delimiter = ',', default_value = "1,2,3,4,5")]
        values: Vec<usize>,
    },
    /// Evaluate a checkpoint on one partition of a split.
    Eval(EvalArgs),
    /// Export attention statistics of a trained AGNN checkpoint.
    Analyze(AnalyzeArgs),
    /// Write a synthetic citation-like dataset directory.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKind {
    Fixed,
    Random,
    Kfold,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory, or a name looked up under $AGNN_DATA_ROOT (default ./data).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "agnn")]
    model: ModelKind,
    #[arg(long, value_enum, default_value = "fixed")]
    split: SplitKind,
    /// Repetitions for fixed and random splits.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Folds for k-fold cross validation.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Repetitions of the whole k-fold procedure.
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fix the first attention temperature at zero (uniform first propagation).
    #[arg(long)]
    freeze_first_beta: bool,
    /// Model selection: window-average, best-epoch or loss-window.
    #[arg(long)]
    early_stop: Option<StopKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for summaries, logs and checkpoints.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopKind {
    WindowAverage,
    BestEpoch,
    LossWindow,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    split: SplitKind,
    /// Run index whose split to rebuild (random and k-fold splits).
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value = "test")]
    partition: Partition,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Propagation layer (1-based) for the relevance matrix and edge ranking; default last.
    #[arg(long)]
    layer: Option<usize>,
    /// Number of most and least relevant edges to inspect.
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Nodes whose neighbourhood to export; repeatable.
    #[arg(long = "target")]
    targets: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 600)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.8)]
    homophily: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn split_mode(kind: SplitKind, runs: usize, k: usize, trials: usize) -> SplitMode {
    match kind {
        SplitKind::Fixed => SplitMode::Fixed { runs },
        SplitKind::Random => SplitMode::Random { runs },
        SplitKind::Kfold => SplitMode::Kfold { k, trials },
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Preset for the model/dataset/split, then explicit flags, then the config file.
fn build_config(args: &TrainArgs, benchmark: Option<Benchmark>, dataset: PathBuf) -> Result<RunConfig> {
    let mode = split_mode(args.split, args.runs, args.k, args.trials);
    let mut cfg = RunConfig::preset(args.model, benchmark, mode);
    cfg.dataset = dataset;
    cfg.seed = args.seed;
    cfg.output = args.output.clone();
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if args.freeze_first_beta {
        cfg.freeze_first_beta = true;
    }
    if let Some(kind) = args.early_stop {
        cfg.early_stop = match kind {
            StopKind::WindowAverage => EarlyStop::WindowAverage { window: 4 },
            StopKind::BestEpoch => EarlyStop::BestEpoch,
            StopKind::LossWindow => EarlyStop::GcnWindow { window: 10 },
        };
    }
    if let Some(path) = &args.config {
        let overrides: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let serde_json::Value::Object(overrides) = overrides else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        let mut merged = serde_json::to_value(&cfg).expect("config serializes");
        for (key, value) in overrides {
            merged[key] = value;
        }
        cfg = serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(args: &TrainArgs) -> Result<(RunConfig, agnn::data::Dataset, Option<agnn::data::Split>)> {
    let dir = resolve_dataset(&args.dataset);
    let (dataset, fixed) = load_prepared(&dir)?;
    let cfg = build_config(args, Benchmark::from_name(&dataset.name), dir)?;
    // A config file may point at another dataset.
    if cfg.dataset != resolve_dataset(&args.dataset) {
        let (dataset, fixed) = load_prepared(&resolve_dataset(&cfg.dataset))?;
        return Ok((cfg, dataset, fixed));
    }
    Ok((cfg, dataset, fixed))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, dataset, fixed) = prepare(args)?;
    let (summary, outcomes) = run_experiment(&cfg, &dataset, fixed.as_ref())?;
    if let Some(dir) = &cfg.output {
        write_outputs(dir, &summary, &outcomes, &cfg.model_spec(&dataset))?;
    }
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_sweep(args: &TrainArgs, values: &[usize]) -> Result<()> {
    let (cfg, dataset, fixed) = prepare(args)?;
    let rows = sweep_layers(&cfg, &dataset, fixed.as_ref(), values)?;
    let stdout = std::io::stdout();
    write_sweep_csv(stdout.lock(), &rows).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("sweep.csv");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        write_sweep_csv(&mut w, &rows)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (spec, params) = checkpoint::load(&args.checkpoint)?;
    let dir = resolve_dataset(&args.dataset);
    let (dataset, fixed) = load_prepared(&dir)?;
    if spec.input_dim != dataset.input_dim() || spec.num_classes != dataset.num_classes() {
        return Err(Error::dim(
            "eval",
            format!(
                "checkpoint expects d_x = {}, d_y = {}; dataset has d_x = {}, d_y = {}",
                spec.input_dim,
                spec.num_classes,
                dataset.input_dim(),
                dataset.num_classes()
            ),
        ));
    }
    let mut cfg = RunConfig::preset(spec.kind, None, split_mode(args.split, args.run + 1, args.k, args.run / args.k.max(1) + 1));
    cfg.seed = args.seed;
    let jobs = plan_jobs(&cfg, &dataset, fixed.as_ref())?;
    let job = jobs
        .into_iter()
        .find(|j| j.index == args.run)
        .ok_or_else(|| Error::Config(format!("run {} does not exist for this split", args.run)))?;
    let indices = job.split.partition(args.partition);
    let inputs = agnn::model::GraphInputs::new(dataset.features.clone(), dataset.graph.clone())?;
    let (logits, _) = infer(&spec, &params, &inputs, false)?;
    let acc = accuracy(&logits, &dataset.labels, indices)?;
    let (tr, va, te) = job.split.sizes();
    let record = json!({
        "dataset": dataset.name,
        "model": spec.kind,
        "layers": spec.propagation_layers(),
        "split_mode": cfg.split.name(),
        "run": args.run,
        "seed": args.seed,
        "partition": format!("{:?}", args.partition).to_lowercase(),
        "split_sizes": {"train": tr, "val": va, "test": te},
        "accuracy": 100.0 * acc,
    });
    println!("{record}");
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let (spec, params) = checkpoint::load(&args.checkpoint)?;
    if spec.kind != ModelKind::Agnn {
        return Err(Error::Config(format!("analysis requires AGNN, checkpoint is {}", spec.kind)));
    }
    let dir = resolve_dataset(&args.dataset);
    let (dataset, fixed) = load_prepared(&dir)?;
    if spec.input_dim != dataset.input_dim() || spec.num_classes != dataset.num_classes() {
        return Err(Error::dim("analyze", "checkpoint and dataset dimensions differ"));
    }
    let inputs = agnn::model::GraphInputs::new(dataset.features.clone(), dataset.graph.clone())?;
    let (_, record) = infer(&spec, &params, &inputs, true)?;
    let record = record.expect("AGNN captures attention");
    let layer = args.layer.unwrap_or(spec.layers);
    if layer == 0 || layer > spec.layers {
        return Err(Error::Config(format!("layer must be in 1..={}", spec.layers)));
    }

    let out = &args.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let create = |name: &str| -> Result<(PathBuf, BufWriter<File>)> {
        let path = out.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    };

    let per_layer = record
        .layers()
        .iter()
        .map(|p| edge_relevance(p, &dataset.graph))
        .collect::<Result<Vec<_>>>()?;
    let (path, mut w) = create("edge_relevance.csv")?;
    write_edge_relevance_csv(&mut w, &per_layer)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    let selected = &per_layer[layer - 1];

    let matrix = class_relevance(selected, &dataset.labels, dataset.num_classes())?;
    let (_, w) = create("relevance.csv")?;
    matrix.write_csv(w, &dataset.class_names)?;
    let (_, w) = create("relevance_counts.csv")?;
    matrix.write_counts_csv(w, &dataset.class_names)?;

    let (top, bottom) = top_bottom_same_class(selected, &dataset.labels, args.m)?;
    let fractions = json!({"layer": layer, "m": args.m, "top_same_class": top, "bottom_same_class": bottom});
    let path = out.join("fractions.json");
    fs::write(&path, fractions.to_string() + "\n").map_err(|e| Error::io(&path, e))?;

    let train = fixed.map(|s| s.train).unwrap_or_default();
    let mut exported = Vec::new();
    for &target in &args.targets {
        let hood = neighborhood(&dataset.graph, &dataset.labels, &train, &record, target, args.hops)?;
        let (csv, dot) = hood.export(out, &format!("neighborhood_{target}"))?;
        exported.push(json!({"target": target, "nodes": hood.nodes.len(), "csv": csv, "dot": dot}));
    }
    println!("{}", json!({"output": out, "layer": layer, "fractions": fractions, "neighborhoods": exported}));
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = CitationLikeConfig {
        nodes: args.nodes,
        classes: args.classes,
        homophily: args.homophily,
        ..CitationLikeConfig::default()
    };
    let cfg = CitationLikeConfig {
        validation: cfg.validation.min(args.nodes / 4),
        test: cfg.test.min(args.nodes / 2),
        train_per_class: cfg.train_per_class.min(args.nodes / (4 * args.classes.max(1))),
        ..cfg
    };
    let (dataset, split) = citation_like(&cfg, args.seed)?;
    write_dataset(&args.output, &dataset)?;
    write_fixed_split(&args.output, &split)?;
    let (tr, va, te) = split.sizes();
    println!(
        "{}",
        json!({"output": args.output, "nodes": dataset.num_nodes(), "edges": dataset.graph.num_edges(),
               "split_sizes": {"train": tr, "val": va, "test": te}})
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::SweepLayers { run, values } => cmd_sweep(run, values),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
