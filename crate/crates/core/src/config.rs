//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique per
//! file; unknown keys are errors so typos never pass silently.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::learning::TrainConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}` given more than once")]
    Duplicate { key: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate { key: key.to_string() });
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses `value` for `key`, naming the expected type on failure.
pub fn value<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

/// Comma-separated list of values.
pub fn list<T: FromStr>(key: &str, v: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s, expected))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// A config type assembled from `key = value` lines over its defaults.
pub trait KeyValue: Default {
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError>;

    fn check(&self) -> Result<(), ConfigError> {
        Ok(())
    }

    /// Every field in file order; parsing the result reproduces `self`.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            cfg.set(&e.key, &e.value)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "learning_rate" => self.learning_rate = value(key, v, "a real number")?,
            "l2_lambda" => self.l2_lambda = value(key, v, "a real number")?,
            "epochs" => self.epochs = value(key, v, "a count")?,
            "hidden_size" => self.hidden_size = value(key, v, "a count")?,
            "unfold_t" => self.unfold_t = value(key, v, "a count")?,
            "seed" => self.seed = value(key, v, "an unsigned integer")?,
            "lr_decay_per_epoch" => self.lr_decay_per_epoch = value(key, v, "a real number")?,
            "init_scale" => self.init_scale = value(key, v, "a real number")?,
            "clip" => {
                self.clip = match v {
                    "none" | "off" => None,
                    _ => Some(value(key, v, "a real number or `none`")?),
                }
            }
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|e| ConfigError::Invalid {
            key: "train".to_string(),
            reason: e.to_string(),
        })
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("l2_lambda", self.l2_lambda.to_string()),
            ("epochs", self.epochs.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("unfold_t", self.unfold_t.to_string()),
            ("seed", self.seed.to_string()),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("clip", self.clip.map_or_else(|| "none".to_string(), |c| c.to_string())),
        ]
    }
}
