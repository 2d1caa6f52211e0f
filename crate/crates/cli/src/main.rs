//! `vlt`: dataset generation, training, evaluation, ablations, gradient
//! verification and attention export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 training divergence.

mod viz;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vlt_core::data::{self, DataConfig, Sample, Vocabulary, DEFAULT_SPLIT_SEED};
use vlt_core::model::{end_to_end_check, QuerySource, VltConfig};
use vlt_core::parallel::Execution;
use vlt_core::tensor::op_suite;
use vlt_core::train::{
    evaluate, history_tsv, initialise, run_ablation, train, AblationGrid, Checkpoint, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "vlt", version, about = "Referring segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of model variants over several seeds.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Export attention heatmaps and a prediction overlay for one sample.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1250)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels; a multiple of 4, at least 16.
    #[arg(long, default_value_t = 64, value_parser = parse_image_size)]
    image_size: usize,
    /// Longest expression in words.
    #[arg(long, default_value_t = 8)]
    max_words: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.16,0.04", value_parser = parse_ratios)]
    split_ratios: Ratios,
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainingFlags {
    /// JSON training config; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training seed: initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of decoder queries.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, value_enum)]
    query_source: Option<SourceArg>,
    /// Replace the query-balance gate by constant confidence 1.
    #[arg(long)]
    no_qbm: bool,
    /// Validation interval in epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path; the history goes next to it as `<out>.history.tsv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Variant grid, e.g. `source=qgm,learned;nq=1,16;qbm=on,off`.
    #[arg(long, default_value = "")]
    grid: String,
    /// Also write the report TSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScaleArg::Micro)]
    scale: ScaleArg,
    /// Randomised trials per op and for the end-to-end model.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Weights checked per end-to-end trial.
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id from the manifest.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
    /// Feature-grid point `row,col` whose encoder attention is exported;
    /// defaults to the grid centre.
    #[arg(long, value_parser = parse_point)]
    point: Option<(usize, usize)>,
    /// Pixel size of one cell in the word-attention grid.
    #[arg(long, default_value_t = 16)]
    cell: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Qgm,
    Learned,
    Words,
}

impl From<SourceArg> for QuerySource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Qgm => QuerySource::Qgm,
            SourceArg::Learned => QuerySource::LearnedFixed,
            SourceArg::Words => QuerySource::WordsAsQueries,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Micro,
    Small,
}

type Ratios = [f64; 3];

fn parse_image_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v < 16 || !v.is_multiple_of(4) {
        return Err(format!("{v} must be a multiple of 4 and at least 16"));
    }
    Ok(v)
}

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("{p:?} is not a number")))
        .collect::<Result<_, _>>()?;
    let r: Ratios = parts
        .try_into()
        .map_err(|_| "expected three comma-separated fractions".to_string())?;
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(format!("{s:?} must be three fractions summing to 1"));
    }
    Ok(r)
}

fn parse_point(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("{v:?} is not an index"));
    Ok((p(r)?, p(c)?))
}

/// Outcome of a failed command, mapped onto the exit-code contract.
enum Failure {
    Usage(anyhow::Error),
    Verification(String),
    Divergence(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Usage(e)
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        Self::Usage(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Divergence(e.into()),
            other => Self::Usage(other.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Viz(a) => viz::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = DataConfig {
        image_size: a.image_size,
        max_words: a.max_words,
        ..DataConfig::default()
    };
    let samples = data::generate_dataset(&cfg, a.count, a.seed, Execution::default())?;
    data::write_dataset(&samples, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let words: usize = samples.iter().map(|s| s.words.len()).sum();
    println!("samples\t{}", samples.len());
    println!("image_size\t{}", a.image_size);
    println!("seed\t{}", a.seed);
    println!("mean_words\t{:.3}", words as f64 / samples.len().max(1) as f64);
    for kind in data::ShapeKind::ALL {
        let n = samples
            .iter()
            .filter(|s| s.descriptor.split(' ').nth(2) == Some(kind.word()))
            .count();
        println!("target_{}\t{n}", kind.word());
    }
    println!("manifest\t{}", a.out.join(data::MANIFEST).display());
    Ok(())
}

struct LoadedData {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_data(a: &DataArgs) -> anyhow::Result<LoadedData> {
    let samples = data::read_dataset(&a.data, &Vocabulary::grammar())
        .with_context(|| format!("reading dataset {}", a.data.display()))?;
    if samples.is_empty() {
        bail!("dataset {} is empty", a.data.display());
    }
    let s = data::split(samples, a.split_ratios, a.split_seed)?;
    Ok(LoadedData {
        train: s.train,
        val: s.val,
        test: s.test,
    })
}

/// Config file (or defaults), then flags; image extents follow the data
/// unless a config file fixes them.
fn training_config(f: &TrainingFlags, sample: &Sample) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &f.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let mut cfg = TrainConfig::default();
            cfg.model.image_height = sample.image.shape()[1];
            cfg.model.image_width = sample.image.shape()[2];
            cfg
        }
    };
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = f.query_source {
        cfg.model.query_source = v.into();
        if cfg.model.query_source == QuerySource::WordsAsQueries && f.queries.is_none() {
            cfg.model.queries = cfg.model.max_words;
        }
    }
    if let Some(v) = f.queries {
        cfg.model.queries = v;
    }
    if f.no_qbm {
        cfg.model.use_qbm = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let d = load_data(&a.data)?;
    let first = d.train.first().ok_or_else(|| anyhow!("the training split is empty"))?;
    let cfg = training_config(&a.training, first)?;
    let exec = execution(a.training.sequential);
    let (model, mut params, mut adam) = initialise(&cfg)?;
    let started = Instant::now();
    let history = train(&cfg, &model, &mut params, &mut adam, &d.train, &d.val, exec, |r| {
        let val = r
            .val
            .as_ref()
            .map(|v| format!("\tval_iou {:.4}", v.metrics.iou))
            .unwrap_or_default();
        eprintln!(
            "epoch {}\tloss {:.5}{val}\t{:.0?}",
            r.epoch + 1,
            r.train_loss,
            started.elapsed()
        );
    })?;
    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        params,
        step: adam.step,
        optimizer: Some(adam),
    };
    ckpt.save(&a.out).map_err(TrainError::from)?;
    let mut history_path = a.out.clone().into_os_string();
    history_path.push(".history.tsv");
    fs::write(&history_path, history_tsv(&history)).with_context(|| format!("writing {history_path:?}"))?;
    if let Some(report) = history.last().and_then(|r| r.val.as_ref()) {
        print!("{}", report.to_tsv());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if !a.ckpt.exists() {
        return Err(anyhow!("checkpoint {} does not exist", a.ckpt.display()).into());
    }
    let ckpt = Checkpoint::load(&a.ckpt).map_err(TrainError::from)?;
    let d = load_data(&a.data)?;
    let split = match a.split {
        SplitArg::Train => &d.train,
        SplitArg::Val => &d.val,
        SplitArg::Test => &d.test,
    };
    if split.is_empty() {
        return Err(anyhow!("the selected split is empty").into());
    }
    for s in split {
        vlt_core::train::check_sample(&ckpt.config, s)?;
    }
    let (model, _) = vlt_core::model::VltParams::layout(&ckpt.config).map_err(TrainError::from)?;
    let report = evaluate(&model, &ckpt.params, split, execution(a.sequential)).map_err(TrainError::from)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let d = load_data(&a.data)?;
    let first = d.train.first().ok_or_else(|| anyhow!("the training split is empty"))?;
    let base = training_config(&a.training, first)?;
    let grid = AblationGrid::parse(&a.grid, base.model.queries)?;
    let report = run_ablation(
        &grid,
        &base,
        &d.train,
        &d.val,
        &a.seeds,
        execution(a.training.sequential),
        |v, seed, m| eprintln!("{v} seed={seed}\tiou {:.4}", m.iou),
    )?;
    let tsv = report.to_tsv();
    if let Some(out) = &a.out {
        fs::write(out, &tsv).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{tsv}");
    Ok(())
}

/// Relative-error tolerances of the op suite and the end-to-end check.
const OP_TOLERANCE: f64 = 1e-4;
const END_TO_END_TOLERANCE: f64 = 1e-3;

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let config = match a.scale {
        ScaleArg::Micro => VltConfig::micro(),
        ScaleArg::Small => VltConfig::small(),
    };
    let mut failures = Vec::new();
    println!("check\ttrials\tmax_rel_error\ttolerance\tstatus");
    let mut line = |name: &str, trials: usize, err: f64, tol: f64| {
        let ok = err < tol;
        println!("{name}\t{trials}\t{err:e}\t{tol:e}\t{}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };
    for op in op_suite(a.trials, a.seed).map_err(TrainError::from)? {
        line(op.op, op.trials, op.max_rel_error, OP_TOLERANCE);
    }
    let checks =
        end_to_end_check(&config, a.trials, a.coords, a.seed, Execution::default()).map_err(TrainError::from)?;
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    line("end_to_end", a.trials, worst, END_TO_END_TOLERANCE);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failures.join(", ")))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
