use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqclick::checkpoint::{Checkpoint, CheckpointError};
use seqclick::config::{self, ConfigError, KeyValue};
use seqclick::datamodel::{build_sequences, parse_log, write_log, FeatureSpec, ImpressionRecord, UserSequence};
use seqclick::experiment::{self, ExperimentError, ExperimentSpec, ResultsWriter};
use seqclick::inference::{score_sequences, InferenceError, ScoreOptions};
use seqclick::learning::{self, GradCheckConfig, LearnError, TrainConfig};
use seqclick::metrics::{evaluate, MetricError};
use seqclick::models::{ModelError, ModelKind};
use seqclick::numkernel::Rng;
use seqclick::synthgen::{generate, GenConfig, GenError};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "seqclick", version, about = "Sequential click prediction with recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic impression log.
    Generate(GenerateArgs),
    /// Train a model on a log and save a checkpoint.
    Train(TrainArgs),
    /// Score a log with a checkpoint and report AUC / RIG.
    Evaluate(EvaluateArgs),
    /// Run an experiment spec over its seeds and append the results table.
    Experiment(ExperimentArgs),
    /// Compare BPTT gradients with finite differences on random small networks.
    Gradcheck(GradcheckArgs),
    /// Train one recurrent model per grid point and pick the best on validation RIG.
    Gridsearch(GridsearchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator config (`key = value`); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log output; the training half when `--test-out` is given.
    #[arg(long)]
    out: PathBuf,
    /// Split at the midpoint of the time range and write the later half here.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long)]
    corpus: PathBuf,
    /// Training config (`key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hash_buckets: Option<usize>,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Featurize with this many hash buckets instead of the checkpoint's.
    #[arg(long)]
    hash_buckets: Option<usize>,
    /// Add T / M / S segments.
    #[arg(long)]
    by_position: bool,
    /// Score with the recurrent state forced to zero.
    #[arg(long)]
    ablate_recurrent: bool,
    /// Leading impressions per user fed through the model but not measured.
    #[arg(long, default_value_t = 0)]
    accumulation: usize,
    /// Report output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (`key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Results table, appended to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Report output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridsearchArgs {
    /// Grid over training keys; comma-separated values span the grid.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hash_buckets: Option<usize>,
    /// Results table; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model kind `{s}` (expected lr, nn or rnn)"))
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::new(EXIT_DATA, format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_USAGE, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self::new(code, e)
    }
}

impl From<LearnError> for Failure {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Config(_) => Self::new(EXIT_USAGE, e),
            LearnError::Model(m) => m.into(),
            LearnError::Inference(i) => i.into(),
            LearnError::NonFinite { .. } | LearnError::PredictionRange(_) => Self::new(EXIT_NUMERIC, e),
            LearnError::Metric(MetricError::NonFinite(_)) => Self::new(EXIT_NUMERIC, e),
            _ => Self::new(EXIT_DATA, e),
        }
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Model(m) => m.into(),
            InferenceError::Feature(_) => Self::new(EXIT_DATA, e),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        let code = match e {
            MetricError::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self::new(code, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Self::new(EXIT_DATA, e)
    }
}

impl From<GenError> for Failure {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Config(c) => c.into(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            ExperimentError::Gen(g) => g.into(),
            ExperimentError::Learn(l) => l.into(),
            ExperimentError::Inference(i) => i.into(),
            ExperimentError::Metric(m) => m.into(),
            other => Self::new(EXIT_DATA, other),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn read_config<C: KeyValue>(path: Option<&Path>) -> Result<C, Failure> {
    match path {
        Some(p) => C::from_kv(&read_text(p)?).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", p.display()))),
        None => Ok(C::default()),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<UserSequence>, Failure> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    let records = parse_log(BufReader::new(file)).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
    Ok(build_sequences(records))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::new(EXIT_DATA, e)),
    }
}

fn feature_spec(hash_buckets: Option<usize>) -> Result<FeatureSpec, Failure> {
    match hash_buckets {
        Some(0) => Err(Failure::new(EXIT_USAGE, "--hash-buckets must be positive")),
        Some(b) => Ok(FeatureSpec::new(b)),
        None => Ok(FeatureSpec::default()),
    }
}

fn write_records(path: &Path, records: &[ImpressionRecord]) -> Result<(), Failure> {
    let mut w = create(path)?;
    write_log(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(path, e))
}

fn summary(records: &[ImpressionRecord]) -> String {
    let users = records.iter().map(|r| r.user_id).collect::<std::collections::BTreeSet<_>>().len();
    let clicks = records.iter().filter(|r| r.clicked).count();
    let ctr = if records.is_empty() {
        0.0
    } else {
        clicks as f64 / records.len() as f64
    };
    format!("users={users} impressions={} clicks={clicks} ctr={ctr:.6}", records.len())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut cfg: GenConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let log = generate(&cfg)?;
    match &args.test_out {
        None => {
            write_records(&args.out, &log.records)?;
            println!("generated {}", summary(&log.records));
        }
        Some(test_out) => {
            let (train, test) = log.split_at(cfg.split_timestamp());
            write_records(&args.out, &train.records)?;
            write_records(test_out, &test.records)?;
            println!("generated train {}", summary(&train.records));
            println!("generated test {}", summary(&test.records));
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut train: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        train.seed = s;
    }
    let spec = feature_spec(args.hash_buckets)?;
    let corpus = read_corpus(&args.corpus)?;
    let (model, _) = learning::train_model(args.model, &train, &spec, &corpus, |s| eprintln!("{}", s.to_line()))?;
    Checkpoint { spec, train, model }.save(&args.out)?;
    eprintln!("saved {} checkpoint to {}", args.model, args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let spec = match args.hash_buckets {
        Some(_) => feature_spec(args.hash_buckets)?,
        None => ck.spec.clone(),
    };
    if spec.width() != ck.model.input_width() {
        return Err(Failure::new(
            EXIT_DATA,
            format!(
                "feature width mismatch: checkpoint expects {} inputs, corpus featurizes to {}",
                ck.model.input_width(),
                spec.width()
            ),
        ));
    }
    if args.ablate_recurrent && ck.kind() != ModelKind::Rnn {
        return Err(Failure::new(EXIT_USAGE, "--ablate-recurrent needs an rnn checkpoint"));
    }
    let corpus = read_corpus(&args.corpus)?;
    let opts = ScoreOptions {
        ablate_recurrent: args.ablate_recurrent,
        accumulation: args.accumulation,
    };
    let scored = score_sequences(&ck.model, &spec, &corpus, opts)?;
    let segments = args.by_position.then(|| scored.position_labels());
    let report = evaluate(&scored.preds, &scored.labels, segments.as_deref())?;
    emit(args.out.as_deref(), &report.to_table())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::load(&args.config)?;
    if let Some(s) = args.seed {
        spec.seeds = vec![s];
    }
    let mut writer = ResultsWriter::open(&args.out)?;
    let results = experiment::run(&spec, Some(&mut writer), |line| eprintln!("{line}"))?;
    for row in results.medians() {
        println!("{}", row.to_line());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let cfg = GradCheckConfig {
        instances: args.instances,
        ..GradCheckConfig::default()
    };
    let report = learning::gradient_check(&cfg, &mut Rng::new(args.seed))?;
    let mut text = String::from("block,max_rel_error\n");
    for (block, err) in &report.max_rel_error {
        text.push_str(&format!("{block},{err:e}\n"));
    }
    emit(args.out.as_deref(), &text)?;
    let worst = report.worst();
    let verdict = if worst < GRADCHECK_TOLERANCE { "ok" } else { "FAILED" };
    eprintln!(
        "gradcheck instances={} comparisons={} max_rel_error={worst:e} tolerance={GRADCHECK_TOLERANCE:e} {verdict}",
        report.instances, report.comparisons
    );
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::new(EXIT_NUMERIC, format!("gradient check exceeded tolerance: {worst:e}")))
    }
}

/// Cartesian product of the grid file's value lists, in file order with the
/// last key varying fastest.
fn expand_grid(text: &str, seed: Option<u64>) -> Result<(Vec<String>, Vec<TrainConfig>), ConfigError> {
    let entries = config::parse_entries(text)?;
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for e in entries {
        let values: Vec<String> = e.value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::Invalid {
                key: e.key,
                reason: "needs at least one value".to_string(),
            });
        }
        axes.push((e.key, values));
    }
    let mut grid = vec![TrainConfig::default()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(grid.len() * values.len());
        for base in &grid {
            for v in values {
                let mut cfg = base.clone();
                cfg.set(key, v)?;
                next.push(cfg);
            }
        }
        grid = next;
    }
    for cfg in &mut grid {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.check()?;
    }
    Ok((axes.into_iter().map(|(k, _)| k).collect(), grid))
}

fn cmd_gridsearch(args: GridsearchArgs) -> Result<(), Failure> {
    let text = read_text(&args.config)?;
    let (keys, grid) = expand_grid(&text, args.seed).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", args.config.display())))?;
    let spec = feature_spec(args.hash_buckets)?;
    let train = read_corpus(&args.train)?;
    let validation = read_corpus(&args.validation)?;
    let result = learning::grid_search(&grid, &spec, &train, &validation, |s| eprintln!("{}", s.to_line()))?;

    let mut table = String::from("point");
    for k in &keys {
        table.push_str(&format!(",{k}"));
    }
    table.push_str(",validation_auc,validation_rig,best\n");
    for (i, row) in result.rows.iter().enumerate() {
        let entries = row.config.entries();
        table.push_str(&i.to_string());
        for k in &keys {
            let v = entries.iter().find(|(name, _)| name == k).map(|(_, v)| v.as_str()).unwrap_or("");
            table.push_str(&format!(",{v}"));
        }
        table.push_str(&format!(
            ",{},{},{}\n",
            row.validation_auc,
            row.validation_rig,
            u8::from(i == result.best)
        ));
    }
    emit(args.out.as_deref(), &table)?;
    eprintln!("best grid point {} of {}", result.best, result.rows.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Gridsearch(a) => cmd_gridsearch(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
