//! Text checkpoints: a readable header followed by weight blocks whose values
//! are stored as the hexadecimal bit patterns of the doubles, so loading is
//! exact.
//!
//! ```text
//! seqclick-checkpoint
//! version = 1
//! kind = rnn
//! input_width = 201
//! hidden_size = 13
//! feature.hash_buckets = 64
//! feature.version = 1
//! train.learning_rate = 0.05
//! ...
//! block U 13 201
//! 3fb999999999999a bfc3333333333333 ...
//! ...
//! end
//! ```

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, KeyValue};
use crate::datamodel::FeatureSpec;
use crate::learning::TrainConfig;
use crate::models::{LrParams, Model, ModelError, ModelKind, NnParams, RnnParams};
use crate::numkernel::{Matrix, Vector};

pub const MAGIC: &str = "seqclick-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (first line must be `{MAGIC}`)")]
    Magic,
    #[error("checkpoint version {found} not supported (expected {VERSION})")]
    Version { found: String },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: ModelKind, found: ModelKind },
    #[error("checkpoint line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("checkpoint block {block}: expected {expected} values, found {found}")]
    BlockLength {
        block: String,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint header: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint weights: {0}")]
    Model(#[from] ModelError),
}

/// A trained model plus everything needed to featurize and reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: FeatureSpec,
    pub train: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "version = {VERSION}")?;
        writeln!(w, "kind = {}", self.kind())?;
        writeln!(w, "input_width = {}", self.model.input_width())?;
        writeln!(w, "hidden_size = {}", self.model.hidden_size())?;
        writeln!(w, "feature.hash_buckets = {}", self.spec.hash_buckets)?;
        writeln!(w, "feature.version = {}", self.spec.version)?;
        for (k, v) in self.train.entries() {
            writeln!(w, "train.{k} = {v}")?;
        }
        for (name, rows, cols, values) in blocks(&self.model) {
            writeln!(w, "block {name} {rows} {cols}")?;
            for r in 0..rows {
                let line: Vec<String> = values[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| format!("{:016x}", v.to_bits()))
                    .collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        writeln!(w, "end")
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CheckpointError> {
        let mut lines = r.lines().enumerate().map(|(i, l)| l.map(|l| (i + 1, l)));
        let mut next = || -> Result<Option<(usize, String)>, CheckpointError> { Ok(lines.next().transpose()?) };

        match next()? {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(CheckpointError::Magic),
        }
        let mut header = Header::default();
        let mut blocks: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        let mut ended = false;
        while let Some((n, line)) = next()? {
            let line = line.trim().to_string();
            if line.is_empty() {
                continue;
            }
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("block ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let bad = || CheckpointError::Malformed {
                    line: n,
                    reason: format!("bad block header `{line}`"),
                };
                if parts.len() != 3 {
                    return Err(bad());
                }
                let rows: usize = parts[1].parse().map_err(|_| bad())?;
                let cols: usize = parts[2].parse().map_err(|_| bad())?;
                let expected = rows * cols;
                let mut values = Vec::with_capacity(expected);
                for _ in 0..rows {
                    let Some((n, row)) = next()? else { break };
                    if row.starts_with("block ") || row.trim() == "end" {
                        break;
                    }
                    for tok in row.split_whitespace() {
                        let bits = u64::from_str_radix(tok, 16).map_err(|_| CheckpointError::Malformed {
                            line: n,
                            reason: format!("bad weight `{tok}`"),
                        })?;
                        values.push(f64::from_bits(bits));
                    }
                }
                if values.len() != expected {
                    return Err(CheckpointError::BlockLength {
                        block: parts[0].to_string(),
                        expected,
                        found: values.len(),
                    });
                }
                blocks.push((parts[0].to_string(), rows, cols, values));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Malformed {
                line: n,
                reason: "expected `key = value`".to_string(),
            })?;
            header.set(n, k.trim(), v.trim())?;
        }
        if !ended {
            return Err(CheckpointError::Malformed {
                line: 0,
                reason: "missing `end` (file truncated?)".to_string(),
            });
        }
        header.build(blocks)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Loads and insists on a particular model kind.
    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.kind() != kind {
            return Err(CheckpointError::Kind {
                expected: kind,
                found: ck.kind(),
            });
        }
        Ok(ck)
    }
}

fn blocks(model: &Model) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
    let m = |name, x: &Matrix| (name, x.rows(), x.cols(), x.as_slice().to_vec());
    let v = |name, x: &Vector| (name, 1, x.len(), x.as_slice().to_vec());
    let s = |name, x: f64| (name, 1, 1, vec![x]);
    match model {
        Model::Lr(p) => vec![v("w", &p.w), s("b", p.b)],
        Model::Nn(p) => vec![m("W1", &p.w1), v("b1", &p.b1), m("W2", &p.w2), s("b2", p.b2)],
        Model::Rnn(p) => vec![m("U", &p.u), m("R", &p.r), m("V", &p.v), v("b_h", &p.b_h), s("b_o", p.b_o)],
    }
}

#[derive(Default)]
struct Header {
    version: Option<String>,
    kind: Option<ModelKind>,
    input_width: Option<usize>,
    hidden_size: Option<usize>,
    spec: FeatureSpec,
    train: Vec<(usize, String, String)>,
}

impl Header {
    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), CheckpointError> {
        let bad = |what: &str| CheckpointError::Malformed {
            line,
            reason: format!("`{key}` must be {what}"),
        };
        match key {
            "version" => {
                if value != VERSION.to_string() {
                    return Err(CheckpointError::Version { found: value.to_string() });
                }
                self.version = Some(value.to_string());
            }
            "kind" => self.kind = Some(ModelKind::parse(value).ok_or_else(|| bad("lr, nn or rnn"))?),
            "input_width" => self.input_width = Some(value.parse().map_err(|_| bad("a count"))?),
            "hidden_size" => self.hidden_size = Some(value.parse().map_err(|_| bad("a count"))?),
            "feature.hash_buckets" => self.spec.hash_buckets = value.parse().map_err(|_| bad("a count"))?,
            "feature.version" => self.spec.version = value.parse().map_err(|_| bad("an integer"))?,
            _ => match key.strip_prefix("train.") {
                Some(k) => self.train.push((line, k.to_string(), value.to_string())),
                None => {
                    return Err(CheckpointError::Malformed {
                        line,
                        reason: format!("unknown header key `{key}`"),
                    })
                }
            },
        }
        Ok(())
    }

    fn build(self, blocks: Vec<(String, usize, usize, Vec<f64>)>) -> Result<Checkpoint, CheckpointError> {
        let missing = |what: &str| CheckpointError::Malformed {
            line: 0,
            reason: format!("header lacks `{what}`"),
        };
        self.version.ok_or_else(|| missing("version"))?;
        let kind = self.kind.ok_or_else(|| missing("kind"))?;
        let d = self.input_width.ok_or_else(|| missing("input_width"))?;
        let h = self.hidden_size.ok_or_else(|| missing("hidden_size"))?;
        let mut train = TrainConfig::default();
        for (_, k, v) in &self.train {
            train.set(k, v)?;
        }

        let take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, CheckpointError> {
            let (_, r, c, values) = blocks
                .iter()
                .find(|b| b.0 == name)
                .ok_or_else(|| missing(&format!("block {name}")))?;
            if (*r, *c) != (rows, cols) {
                return Err(CheckpointError::Model(ModelError::Shape(format!(
                    "block {name} is {r}x{c}, expected {rows}x{cols}"
                ))));
            }
            Ok(values.clone())
        };
        let mat = |v: Vec<f64>, rows, cols| Matrix::from_rows(rows, cols, v).map_err(ModelError::from);
        let model = match kind {
            ModelKind::Lr => Model::Lr(LrParams {
                w: Vector::from_vec(take("w", 1, d)?),
                b: take("b", 1, 1)?[0],
            }),
            ModelKind::Nn => Model::Nn(NnParams {
                w1: mat(take("W1", h, d)?, h, d)?,
                b1: Vector::from_vec(take("b1", 1, h)?),
                w2: mat(take("W2", 1, h)?, 1, h)?,
                b2: take("b2", 1, 1)?[0],
            }),
            ModelKind::Rnn => Model::Rnn(RnnParams {
                u: mat(take("U", h, d)?, h, d)?,
                r: mat(take("R", h, h)?, h, h)?,
                v: mat(take("V", 1, h)?, 1, h)?,
                b_h: Vector::from_vec(take("b_h", 1, h)?),
                b_o: take("b_o", 1, 1)?[0],
            }),
        };
        model.validate()?;
        Ok(Checkpoint {
            spec: self.spec,
            train,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn sample(kind: ModelKind) -> Checkpoint {
        let spec = FeatureSpec::new(4);
        let mut rng = Rng::new(3);
        let d = spec.width();
        let model = match kind {
            ModelKind::Lr => {
                let mut p = LrParams::zeros(d);
                for w in p.w.as_mut_slice() {
                    *w = rng.uniform_symmetric(1.0) * 1e-300;
                }
                p.b = -0.1;
                Model::Lr(p)
            }
            ModelKind::Nn => Model::Nn(NnParams::init(d, 3, 0.5, &mut rng).unwrap()),
            ModelKind::Rnn => {
                let mut p = RnnParams::init(d, 3, 0.5, &mut rng).unwrap();
                p.b_o = std::f64::consts::PI;
                p.b_h[1] = -0.0;
                Model::Rnn(p)
            }
        };
        Checkpoint {
            spec,
            train: TrainConfig {
                learning_rate: 0.1 + 0.2,
                ..TrainConfig::default()
            },
            model,
        }
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut b = Vec::new();
        ck.write(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in ModelKind::ALL {
            let ck = sample(kind);
            let b = bytes(&ck);
            let back = Checkpoint::read(&b[..]).unwrap();
            assert_eq!(back, ck);
            assert_eq!(bytes(&back), b);
            if let (Model::Rnn(a), Model::Rnn(b)) = (&back.model, &ck.model) {
                assert_eq!(a.b_h[1].to_bits(), b.b_h[1].to_bits());
            }
        }
    }

    #[test]
    fn header_is_readable() {
        let text = String::from_utf8(bytes(&sample(ModelKind::Rnn))).unwrap();
        assert!(text.starts_with("seqclick-checkpoint\nversion = 1\nkind = rnn\n"));
        assert!(text.contains("train.learning_rate = 0.30000000000000004\n"));
        assert!(text.contains("block R 3 3\n"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let b = bytes(&sample(ModelKind::Rnn));
        let text = String::from_utf8(b).unwrap();
        let cut = text.find("block R").unwrap() - 20;
        match Checkpoint::read(&text.as_bytes()[..cut]) {
            Err(CheckpointError::BlockLength { block, .. }) => assert_eq!(block, "U"),
            other => panic!("{other:?}"),
        }
        let no_end = text.trim_end().strip_suffix("end").unwrap();
        assert!(matches!(Checkpoint::read(no_end.as_bytes()), Err(CheckpointError::Malformed { .. })));
    }

    #[test]
    fn version_and_magic_checked() {
        let text = String::from_utf8(bytes(&sample(ModelKind::Lr))).unwrap();
        let v2 = text.replace("version = 1", "version = 2");
        assert!(matches!(Checkpoint::read(v2.as_bytes()), Err(CheckpointError::Version { .. })));
        assert!(matches!(Checkpoint::read("hello\n".as_bytes()), Err(CheckpointError::Magic)));
    }

    #[test]
    fn kind_tag_prevents_confusion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lr.ckpt");
        sample(ModelKind::Lr).save(&path).unwrap();
        match Checkpoint::load_kind(&path, ModelKind::Rnn) {
            Err(CheckpointError::Kind { expected, found }) => {
                assert_eq!((expected, found), (ModelKind::Rnn, ModelKind::Lr));
            }
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::load_kind(&path, ModelKind::Lr).is_ok());
        let text = std::fs::read_to_string(&path).unwrap().replace("kind = lr", "kind = rnn");
        assert!(Checkpoint::read(text.as_bytes()).is_err());
    }
}
