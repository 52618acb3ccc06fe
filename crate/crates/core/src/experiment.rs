//! Experiment harness: repeats the comparison, position, ablation, history
//! and unfolding experiments over a list of seeds and tabulates every number
//! as a flat row.
//!
//! A spec file is `key = value` lines:
//!
//! ```text
//! experiments = overall, positions, ablation, history, unfold-sweep
//! generate = default        # or a generator config path; or train/test paths
//! gen.n_users = 2000
//! seeds = 1,2,3,4,5
//! models = lr,nn,rnn
//! accumulation = 0,10,40
//! unfold = 1,2,3,4,5,6
//! train.learning_rate = 0.002
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{self, ConfigError, KeyValue};
use crate::datamodel::{build_sequences, parse_log, FeatureSpec, ImpressionRecord, LogError, UserSequence};
use crate::inference::{score_sequences, InferenceError, ScoreOptions};
use crate::learning::{train_model, EpochStats, LearnError, TrainConfig};
use crate::metrics::{evaluate, EvalReport, MetricError};
use crate::models::{Model, ModelKind};
use crate::synthgen::{generate, shuffle_within_users, GenConfig, GenError};

pub const RESULTS_HEADER: &str = "experiment,seed,model,param,segment,metric,value";

const SHUFFLE_TEST_STREAM: u64 = 0x7E57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentKind {
    Overall,
    Positions,
    Ablation,
    History,
    UnfoldSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Overall,
        ExperimentKind::Positions,
        ExperimentKind::Ablation,
        ExperimentKind::History,
        ExperimentKind::UnfoldSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Overall => "overall",
            ExperimentKind::Positions => "positions",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::History => "history",
            ExperimentKind::UnfoldSweep => "unfold-sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the corpora come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    /// Fixed log files; every seed trains on the same data.
    Files { train: PathBuf, test: PathBuf },
    /// A fresh synthetic log per seed, split at the midpoint of its time range.
    Generated(GenConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiments: Vec<ExperimentKind>,
    pub source: CorpusSource,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub accumulation: Vec<usize>,
    pub unfold: Vec<usize>,
    pub hash_buckets: usize,
    /// Permute each user's impressions before featurizing.
    pub shuffle: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiments: vec![ExperimentKind::Overall],
            source: CorpusSource::Generated(GenConfig::default()),
            seeds: vec![1],
            models: ModelKind::ALL.to_vec(),
            accumulation: vec![0, 10, 40],
            unfold: (1..=6).collect(),
            hash_buckets: FeatureSpec::default().hash_buckets,
            shuffle: false,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    /// Parses a spec; relative paths are taken from `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut spec = Self::default();
        let (mut train, mut test, mut gen_path, mut generated) = (None, None, None, false);
        let mut gen_lines = String::new();
        let mut train_lines = String::new();
        for e in config::parse_entries(text)? {
            let (key, v) = (e.key.as_str(), e.value.as_str());
            if let Some(k) = key.strip_prefix("gen.") {
                gen_lines.push_str(&format!("{k} = {v}\n"));
                continue;
            }
            if let Some(k) = key.strip_prefix("train.") {
                train_lines.push_str(&format!("{k} = {v}\n"));
                continue;
            }
            match key {
                "experiments" => {
                    spec.experiments = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            ExperimentKind::parse(s).ok_or_else(|| ConfigError::BadValue {
                                key: key.to_string(),
                                value: s.to_string(),
                                expected: "overall, positions, ablation, history or unfold-sweep",
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                "train" => train = Some(base.join(v)),
                "test" => test = Some(base.join(v)),
                "generate" => {
                    generated = true;
                    if v != "default" {
                        gen_path = Some(base.join(v));
                    }
                }
                "seeds" => spec.seeds = config::list(key, v, "a list of unsigned integers")?,
                "models" => {
                    spec.models = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            ModelKind::parse(s).ok_or_else(|| ConfigError::BadValue {
                                key: key.to_string(),
                                value: s.to_string(),
                                expected: "lr, nn or rnn",
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                "accumulation" => spec.accumulation = config::list(key, v, "a list of counts")?,
                "unfold" => spec.unfold = config::list(key, v, "a list of counts")?,
                "hash_buckets" => spec.hash_buckets = config::value(key, v, "a count")?,
                "shuffle" => spec.shuffle = config::value(key, v, "true or false")?,
                _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
            }
        }
        spec.train = TrainConfig::from_kv(&train_lines)?;
        spec.source = match (generated, train, test) {
            (true, None, None) => {
                let mut text = match &gen_path {
                    Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Invalid {
                        key: "generate".to_string(),
                        reason: format!("cannot read {}: {e}", p.display()),
                    })?,
                    None => String::new(),
                };
                text.push('\n');
                let mut cfg = GenConfig::default();
                for e in config::parse_entries(&text)? {
                    cfg.set(&e.key, &e.value)?;
                }
                for e in config::parse_entries(&gen_lines)? {
                    cfg.set(&e.key, &e.value)?;
                }
                cfg.check()?;
                CorpusSource::Generated(cfg)
            }
            (false, Some(train), Some(test)) if gen_lines.is_empty() => CorpusSource::Files { train, test },
            (false, None, None) => {
                return Err(ConfigError::Invalid {
                    key: "generate".to_string(),
                    reason: "give either `generate` or both `train` and `test`".to_string(),
                })
            }
            _ => {
                return Err(ConfigError::Invalid {
                    key: "train".to_string(),
                    reason: "`train` and `test` go together and exclude `generate` / `gen.*`".to_string(),
                })
            }
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let empty = |key: &str| ConfigError::Invalid {
            key: key.to_string(),
            reason: "must not be empty".to_string(),
        };
        if self.seeds.is_empty() {
            return Err(empty("seeds"));
        }
        if self.experiments.is_empty() {
            return Err(empty("experiments"));
        }
        if self.models.is_empty() {
            return Err(empty("models"));
        }
        if self.experiments.contains(&ExperimentKind::History) && self.accumulation.is_empty() {
            return Err(empty("accumulation"));
        }
        if self.experiments.contains(&ExperimentKind::UnfoldSweep) && self.unfold.is_empty() {
            return Err(empty("unfold"));
        }
        if self.unfold.contains(&0) {
            return Err(ConfigError::Invalid {
                key: "unfold".to_string(),
                reason: "unfolding steps start at 1".to_string(),
            });
        }
        if self.hash_buckets == 0 {
            return Err(ConfigError::Invalid {
                key: "hash_buckets".to_string(),
                reason: "must be positive".to_string(),
            });
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::new(self.hash_buckets)
    }

    fn has(&self, kind: ExperimentKind) -> bool {
        self.experiments.contains(&kind)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment spec: {0}")]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Log { path: PathBuf, source: LogError },
    #[error("results file {}: existing header `{found}` does not match `{RESULTS_HEADER}`", path.display())]
    Schema { path: PathBuf, found: String },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One results-table row. `seed` is `None` for a median over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: ExperimentKind,
    pub seed: Option<u64>,
    pub model: String,
    pub param: String,
    pub segment: String,
    pub metric: String,
    pub value: Option<f64>,
}

impl ResultRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.experiment,
            self.seed.map_or_else(|| "median".to_string(), |s| s.to_string()),
            self.model,
            self.param,
            self.segment,
            self.metric,
            self.value.map_or_else(|| "undefined".to_string(), |v| v.to_string()),
        )
    }

    fn key(&self) -> (ExperimentKind, &str, &str, &str, &str) {
        (self.experiment, &self.model, &self.param, &self.segment, &self.metric)
    }
}

/// All rows of a run, seed rows first, then medians.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResults {
    pub fn to_table(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    /// Looks up a single value; `seed = None` selects the median row.
    pub fn value(&self, experiment: ExperimentKind, seed: Option<u64>, model: &str, param: &str, segment: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.key() == (experiment, model, param, segment, metric))
            .and_then(|r| r.value)
    }

    pub fn medians(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }
}

/// Appends rows to a results file, writing the header only when the file is
/// new or empty.
pub struct ResultsWriter {
    path: PathBuf,
    file: File,
}

impl ResultsWriter {
    pub fn open(path: &Path) -> Result<Self, ExperimentError> {
        let io_err = |source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        };
        let existing = match fs::read_to_string(path) {
            Ok(s) => s,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(e)),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        match existing.lines().next() {
            None => writeln!(file, "{RESULTS_HEADER}").map_err(io_err)?,
            Some(h) if h == RESULTS_HEADER => {}
            Some(h) => {
                return Err(ExperimentError::Schema {
                    path: path.to_path_buf(),
                    found: h.to_string(),
                })
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, rows: &[ResultRow]) -> Result<(), ExperimentError> {
        let mut buf = String::new();
        for r in rows {
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| ExperimentError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

/// Train and test corpora for one seed, plus the generator's own click
/// probabilities for the test half when available.
pub struct SeedCorpus {
    pub train: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    pub oracle: Option<(Vec<f64>, Vec<ImpressionRecord>)>,
}

fn read_log(path: &Path) -> Result<Vec<ImpressionRecord>, ExperimentError> {
    let file = File::open(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_log(BufReader::new(file)).map_err(|source| ExperimentError::Log {
        path: path.to_path_buf(),
        source,
    })
}

/// Builds the corpora for `seed` as the spec describes.
pub fn seed_corpus(spec: &ExperimentSpec, seed: u64) -> Result<SeedCorpus, ExperimentError> {
    let (train, test, oracle) = match &spec.source {
        CorpusSource::Files { train, test } => (read_log(train)?, read_log(test)?, None),
        CorpusSource::Generated(cfg) => {
            let cfg = GenConfig { seed, ..cfg.clone() };
            let log = generate(&cfg)?;
            let (train, test) = log.split_at(cfg.split_timestamp());
            let oracle = (!spec.shuffle).then(|| (test.true_probs, test.records.clone()));
            (train.records, test.records, oracle)
        }
    };
    let (train, test) = if spec.shuffle {
        (
            shuffle_within_users(&train, seed),
            shuffle_within_users(&test, seed ^ SHUFFLE_TEST_STREAM),
        )
    } else {
        (train, test)
    };
    Ok(SeedCorpus {
        train: build_sequences(train),
        test: build_sequences(test),
        oracle,
    })
}

/// Median of the defined values; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median row for every (experiment, model, param, segment, metric) seen.
pub fn median_rows(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut groups: Vec<(&ResultRow, Vec<f64>)> = Vec::new();
    let mut index: HashMap<(ExperimentKind, &str, &str, &str, &str), usize> = HashMap::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let i = *index.entry(r.key()).or_insert_with(|| {
            groups.push((r, Vec::new()));
            groups.len() - 1
        });
        if let Some(v) = r.value {
            groups[i].1.push(v);
        }
    }
    groups
        .into_iter()
        .map(|(r, values)| ResultRow {
            seed: None,
            value: median(&values),
            ..r.clone()
        })
        .collect()
}

struct RowSink<'a> {
    experiment: ExperimentKind,
    seed: u64,
    rows: &'a mut Vec<ResultRow>,
}

impl RowSink<'_> {
    fn push(&mut self, model: &str, param: &str, segment: &str, metric: &str, value: Option<f64>) {
        self.rows.push(ResultRow {
            experiment: self.experiment,
            seed: Some(self.seed),
            model: model.to_string(),
            param: param.to_string(),
            segment: segment.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    fn report(&mut self, model: &str, param: &str, report: &EvalReport) {
        self.report_segment(model, param, "all", report);
        for (name, seg) in &report.segments {
            self.report_segment(model, param, name, seg);
        }
    }

    fn report_segment(&mut self, model: &str, param: &str, segment: &str, r: &EvalReport) {
        self.push(model, param, segment, "auc", r.auc);
        self.push(model, param, segment, "rig", r.rig);
        self.push(model, param, segment, "log_loss", Some(r.mean_log_loss));
        self.push(model, param, segment, "n_samples", Some(r.n_samples as f64));
    }
}

const NO_PARAM: &str = "-";

/// Runs one seed of every requested experiment. Models are trained once per
/// seed and shared between experiments.
pub fn run_seed(
    spec: &ExperimentSpec,
    seed: u64,
    mut log: impl FnMut(&str),
) -> Result<Vec<ResultRow>, ExperimentError> {
    let features = spec.feature_spec();
    log(&format!("seed {seed}: preparing corpus"));
    let corpus = seed_corpus(spec, seed)?;
    let base = TrainConfig {
        seed,
        ..spec.train.clone()
    };

    let mut trained: HashMap<(ModelKind, usize), Model> = HashMap::new();
    let mut train = |kind: ModelKind, unfold_t: usize, log: &mut dyn FnMut(&str)| -> Result<Model, ExperimentError> {
        let key = (kind, if kind == ModelKind::Rnn { unfold_t } else { 0 });
        if let Some(m) = trained.get(&key) {
            return Ok(m.clone());
        }
        let cfg = TrainConfig { unfold_t, ..base.clone() };
        let (model, _) = train_model(kind, &cfg, &features, &corpus.train, |s: &EpochStats| {
            log(&format!("seed {seed}: {}", s.to_line()))
        })?;
        trained.insert(key, model.clone());
        Ok(model)
    };

    let mut rows = Vec::new();
    let needs_models = [
        ExperimentKind::Overall,
        ExperimentKind::Positions,
        ExperimentKind::History,
    ]
    .iter()
    .any(|k| spec.has(*k));
    let mut models: Vec<(ModelKind, Model)> = Vec::new();
    if needs_models {
        for &kind in &spec.models {
            models.push((kind, train(kind, base.unfold_t, &mut log)?));
        }
    }
    let score = |model: &Model, opts: ScoreOptions| score_sequences(model, &features, &corpus.test, opts);

    for &kind in &spec.experiments {
        let mut sink = RowSink {
            experiment: kind,
            seed,
            rows: &mut rows,
        };
        match kind {
            ExperimentKind::Overall | ExperimentKind::Positions => {
                let by_position = kind == ExperimentKind::Positions;
                for (k, model) in &models {
                    let s = score(model, ScoreOptions::default())?;
                    let segs = by_position.then(|| s.position_labels());
                    let report = evaluate(&s.preds, &s.labels, segs.as_deref())?;
                    sink.report(k.name(), NO_PARAM, &report);
                }
                if let Some((probs, records)) = &corpus.oracle {
                    let labels: Vec<bool> = records.iter().map(|r| r.clicked).collect();
                    let segs: Option<Vec<String>> =
                        by_position.then(|| records.iter().map(|r| r.position.class().to_string()).collect());
                    let report = evaluate(probs, &labels, segs.as_deref())?;
                    sink.report("oracle", NO_PARAM, &report);
                }
            }
            ExperimentKind::Ablation => {
                let model = train(ModelKind::Rnn, base.unfold_t, &mut log)?;
                for (param, ablate) in [("stateful", false), ("ablated", true)] {
                    let s = score(
                        &model,
                        ScoreOptions {
                            ablate_recurrent: ablate,
                            accumulation: 0,
                        },
                    )?;
                    sink.report("rnn", param, &evaluate::<&str>(&s.preds, &s.labels, None)?);
                }
            }
            ExperimentKind::History => {
                for &acc in &spec.accumulation {
                    let param = format!("t_acc={acc}");
                    for (k, model) in &models {
                        let s = score(
                            model,
                            ScoreOptions {
                                ablate_recurrent: false,
                                accumulation: acc,
                            },
                        )?;
                        if s.labels.is_empty() {
                            sink.push(k.name(), &param, "all", "n_samples", Some(0.0));
                            continue;
                        }
                        sink.report(k.name(), &param, &evaluate::<&str>(&s.preds, &s.labels, None)?);
                    }
                }
            }
            ExperimentKind::UnfoldSweep => {
                let mut best: Option<(usize, f64)> = None;
                for &t in &spec.unfold {
                    let model = train(ModelKind::Rnn, t, &mut log)?;
                    let s = score(&model, ScoreOptions::default())?;
                    let r = evaluate::<&str>(&s.preds, &s.labels, None)?;
                    let param = format!("unfold_t={t}");
                    sink.push("rnn", &param, "all", "auc", r.auc);
                    sink.push("rnn", &param, "all", "rig", r.rig);
                    if let Some(rig) = r.rig {
                        if best.is_none_or(|(_, b)| rig > b) {
                            best = Some((t, rig));
                        }
                    }
                }
                sink.push("rnn", "best", "all", "unfold_t", best.map(|(t, _)| t as f64));
            }
        }
    }
    log(&format!("seed {seed}: done"));
    Ok(rows)
}

/// Runs every seed, appending each seed's rows (and finally the medians) to
/// `writer` as they become available.
pub fn run(
    spec: &ExperimentSpec,
    mut writer: Option<&mut ResultsWriter>,
    mut log: impl FnMut(&str),
) -> Result<ExperimentResults, ExperimentError> {
    if let CorpusSource::Files { train, test } = &spec.source {
        for (field, p) in [("train", train), ("test", test)] {
            if !p.is_file() {
                return Err(ConfigError::Invalid {
                    key: field.to_string(),
                    reason: format!("{} does not exist", p.display()),
                }
                .into());
            }
        }
    }
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let seed_rows = run_seed(spec, seed, &mut log)?;
        if let Some(w) = writer.as_deref_mut() {
            w.append(&seed_rows)?;
        }
        rows.extend(seed_rows);
    }
    let medians = median_rows(&rows);
    if let Some(w) = writer {
        w.append(&medians)?;
    }
    rows.extend(medians);
    Ok(ExperimentResults { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(experiments: &str) -> ExperimentSpec {
        let text = format!(
            "experiments = {experiments}\ngenerate = default\ngen.n_users = 30\ngen.min_impressions = 20\n\
             gen.max_impressions = 50\nseeds = 3,4\nhash_buckets = 8\naccumulation = 0,5\nunfold = 1,2\n\
             train.epochs = 1\ntrain.hidden_size = 4\ntrain.learning_rate = 0.01\n"
        );
        ExperimentSpec::parse(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn parse_spec_fields() {
        let spec = tiny_spec("overall, history");
        assert_eq!(spec.experiments, vec![ExperimentKind::Overall, ExperimentKind::History]);
        assert_eq!(spec.seeds, vec![3, 4]);
        assert_eq!(spec.train.hidden_size, 4);
        match &spec.source {
            CorpusSource::Generated(g) => assert_eq!(g.n_users, 30),
            other => panic!("{other:?}"),
        }
        let files = ExperimentSpec::parse("train = a.log\ntest = b.log\n", Path::new("/data")).unwrap();
        assert_eq!(
            files.source,
            CorpusSource::Files {
                train: PathBuf::from("/data/a.log"),
                test: PathBuf::from("/data/b.log")
            }
        );
    }

    #[test]
    fn malformed_fields_are_named() {
        let p = |t: &str| ExperimentSpec::parse(t, Path::new(".")).unwrap_err().to_string();
        assert!(p("generate = default\nexperiments = overall,histroy").contains("experiments"));
        assert!(p("generate = default\nseeds =").contains("seeds"));
        assert!(p("generate = default\nmodels = rnn,svm").contains("svm"));
        assert!(p("generate = default\ngen.n_user = 4").contains("n_user"));
        assert!(p("generate = default\ntrain.epoch = 4").contains("epoch"));
        assert!(p("train = a.log").contains("train"));
        assert!(p("seeds = 1").contains("generate"));
        assert!(p("generate = default\nunfold = 0,1\nexperiments = unfold-sweep").contains("unfold"));
    }

    #[test]
    fn missing_corpus_file_is_reported() {
        let spec = ExperimentSpec::parse("train = /nonexistent/a.log\ntest = /nonexistent/b.log\n", Path::new(".")).unwrap();
        let e = run(&spec, None, |_| {}).unwrap_err().to_string();
        assert!(e.contains("train") && e.contains("does not exist"), "{e}");
    }

    #[test]
    fn medians_over_seeds() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let row = |seed, value| ResultRow {
            experiment: ExperimentKind::Overall,
            seed: Some(seed),
            model: "rnn".into(),
            param: NO_PARAM.into(),
            segment: "all".into(),
            metric: "rig".into(),
            value,
        };
        let m = median_rows(&[row(1, Some(0.1)), row(2, None), row(3, Some(0.3))]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].seed, None);
        assert!((m[0].value.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(m[0].to_line(), format!("overall,median,rnn,-,all,rig,{}", m[0].value.unwrap()));
    }

    #[test]
    fn history_zero_matches_overall_and_sweep_is_one_row_per_point() {
        let spec = tiny_spec("overall, history, unfold-sweep, ablation");
        let res = run(&spec, None, |_| {}).unwrap();
        for seed in [3, 4] {
            for m in ["lr", "nn", "rnn"] {
                for metric in ["auc", "rig", "log_loss"] {
                    let a = res.value(ExperimentKind::Overall, Some(seed), m, NO_PARAM, "all", metric);
                    let b = res.value(ExperimentKind::History, Some(seed), m, "t_acc=0", "all", metric);
                    assert!(a.is_some());
                    assert_eq!(a, b, "{seed} {m} {metric}");
                }
            }
            assert!(res.value(ExperimentKind::Overall, Some(seed), "oracle", NO_PARAM, "all", "rig").is_some());
        }
        let sweep: Vec<_> = res
            .rows
            .iter()
            .filter(|r| r.experiment == ExperimentKind::UnfoldSweep && r.seed.is_some() && r.param != "best")
            .collect();
        assert_eq!(sweep.len(), 2 * 2 * 2);
        let mut keys: Vec<_> = sweep.iter().map(|r| (r.seed, r.param.clone(), r.metric.clone())).collect();
        keys.dedup();
        assert_eq!(keys.len(), sweep.len());
        let stateful = res.value(ExperimentKind::Ablation, None, "rnn", "stateful", "all", "rig");
        let ablated = res.value(ExperimentKind::Ablation, None, "rnn", "ablated", "all", "rig");
        assert!(stateful.is_some() && ablated.is_some() && stateful != ablated);
    }

    #[test]
    fn runs_are_reproducible_and_files_append() {
        let spec = tiny_spec("positions");
        let a = run(&spec, None, |_| {}).unwrap();
        let b = run(&spec, None, |_| {}).unwrap();
        assert_eq!(a.to_table(), b.to_table());
        let segs: std::collections::BTreeSet<_> = a.rows.iter().map(|r| r.segment.as_str()).collect();
        assert!(segs.contains("T") && segs.contains("M") && segs.contains("S"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        run(&spec, Some(&mut ResultsWriter::open(&path).unwrap()), |_| {}).unwrap();
        let once = fs::read_to_string(&path).unwrap();
        assert_eq!(once, a.to_table());
        run(&spec, Some(&mut ResultsWriter::open(&path).unwrap()), |_| {}).unwrap();
        let twice = fs::read_to_string(&path).unwrap();
        assert_eq!(twice.matches(RESULTS_HEADER).count(), 1);
        assert_eq!(twice.lines().count(), 2 * once.lines().count() - 1);

        fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(ResultsWriter::open(&path), Err(ExperimentError::Schema { .. })));
    }

    #[test]
    fn shuffle_drops_oracle_rows() {
        let mut spec = tiny_spec("overall");
        spec.shuffle = true;
        spec.models = vec![ModelKind::Lr];
        let res = run(&spec, None, |_| {}).unwrap();
        assert!(res.rows.iter().all(|r| r.model != "oracle"));
        assert!(res.value(ExperimentKind::Overall, None, "lr", NO_PARAM, "all", "rig").is_some());
    }
}
