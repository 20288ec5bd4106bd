//! Run configuration: a flat `key = value` file plus `--key value`
//! command-line overrides. Unknown keys are rejected. Relative paths in the
//! file resolve against the file's directory; relative paths given on the
//! command line resolve against the working directory.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    /// Pretrained vectors in text format; words without one are initialized
    /// at random.
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub contextual_file: Option<PathBuf>,
    pub contextual_dim: Option<usize>,
    pub tag_file: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Checkpoint read by `predict`; defaults to `best.ckpt` in the
    /// checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Dataset read by `predict`; defaults to the dev file.
    pub predict_file: Option<PathBuf>,
    pub predictions_file: PathBuf,
    pub na_probs_file: Option<PathBuf>,
    /// Defaults to `metrics.jsonl` in the checkpoint directory.
    pub metrics_file: Option<PathBuf>,
    pub workers: usize,
    pub resume: bool,
    pub gradcheck_fault: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            train_file: None,
            dev_file: None,
            embeddings: None,
            embedding_dim: 300,
            contextual_file: None,
            contextual_dim: None,
            tag_file: None,
            cache_dir: PathBuf::from("cache"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint: None,
            predict_file: None,
            predictions_file: PathBuf::from("predictions.json"),
            na_probs_file: None,
            metrics_file: None,
            workers: 1,
            resume: false,
            gradcheck_fault: None,
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    /// Directory that relative paths in `value` resolve against.
    pub base: PathBuf,
    pub origin: String,
}

const PATH_KEYS: [&str; 13] = [
    "train_file",
    "dev_file",
    "embeddings",
    "contextual_file",
    "tag_file",
    "cache_dir",
    "checkpoint_dir",
    "checkpoint",
    "predict_file",
    "predictions_file",
    "na_probs_file",
    "metrics_file",
    "gradcheck_fault",
];

const OTHER_KEYS: [&str; 4] = ["embedding_dim", "contextual_dim", "workers", "resume"];

/// Every accepted key.
pub fn known_keys() -> Vec<String> {
    let train = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut keys: Vec<String> = train.as_object().expect("struct").keys().cloned().collect();
    keys.extend(PATH_KEYS.iter().chain(&OTHER_KEYS).map(|k| k.to_string()));
    keys.sort();
    keys
}

/// Splits config text into assignments. Blank lines and lines starting with
/// `#` are ignored; a key may appear once.
pub fn parse_config_text(text: &str, base: &Path, origin: &str) -> Result<Vec<Assignment>> {
    let mut out: Vec<Assignment> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            line: i + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Format {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if out.iter().any(|a| a.key == key) {
            return Err(Error::Format {
                line: i + 1,
                message: format!("duplicate key {key:?}"),
            });
        }
        out.push(Assignment {
            key,
            value: value.trim().to_string(),
            base: base.to_path_buf(),
            origin: format!("{origin}:{}", i + 1),
        });
    }
    Ok(out)
}

/// Reads `--key value` and `--key=value` pairs. Hyphens in keys are
/// accepted in place of underscores.
pub fn parse_overrides(args: &[String], base: &Path) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, found {arg:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push(Assignment {
            key: key.replace('-', "_"),
            value,
            base: base.to_path_buf(),
            origin: "command line".into(),
        });
    }
    Ok(out)
}

fn bad(a: &Assignment, what: &str) -> Error {
    Error::Config(format!("{}: {} = {:?} is not {what}", a.origin, a.key, a.value))
}

fn parse_bool(a: &Assignment) -> Result<bool> {
    match a.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(a, "true or false")),
    }
}

fn parse_usize(a: &Assignment) -> Result<usize> {
    a.value.parse().map_err(|_| bad(a, "a non-negative integer"))
}

fn optional<T>(a: &Assignment, f: impl Fn(&Assignment) -> Result<T>) -> Result<Option<T>> {
    if a.value.is_empty() {
        Ok(None)
    } else {
        f(a).map(Some)
    }
}

fn path(a: &Assignment) -> Result<PathBuf> {
    if a.value.is_empty() {
        return Err(bad(a, "a path"));
    }
    let p = PathBuf::from(&a.value);
    Ok(if p.is_absolute() { p } else { a.base.join(p) })
}

/// Converts a raw value into the JSON type of the matching training field.
fn train_value(a: &Assignment, current: &Value) -> Result<Value> {
    match current {
        Value::Bool(_) => parse_bool(a).map(Value::Bool),
        Value::String(_) => Ok(Value::String(a.value.clone())),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = a.value.parse().map_err(|_| bad(a, "a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad(a, "a finite number"))
        }
        Value::Number(_) => a
            .value
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| bad(a, "a non-negative integer")),
        _ => Err(bad(a, "supported")),
    }
}

impl RunConfig {
    /// Applies assignments in order; later ones win.
    pub fn from_assignments(assignments: &[Assignment]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut train = match serde_json::to_value(&cfg.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("training configuration is a struct"),
        };
        for a in assignments {
            if let Some(current) = train.get(&a.key) {
                let v = train_value(a, current)?;
                train.insert(a.key.clone(), v);
                continue;
            }
            match a.key.as_str() {
                "train_file" => cfg.train_file = optional(a, path)?,
                "dev_file" => cfg.dev_file = optional(a, path)?,
                "embeddings" => cfg.embeddings = optional(a, path)?,
                "contextual_file" => cfg.contextual_file = optional(a, path)?,
                "tag_file" => cfg.tag_file = optional(a, path)?,
                "cache_dir" => cfg.cache_dir = path(a)?,
                "checkpoint_dir" => cfg.checkpoint_dir = path(a)?,
                "checkpoint" => cfg.checkpoint = optional(a, path)?,
                "predict_file" => cfg.predict_file = optional(a, path)?,
                "predictions_file" => cfg.predictions_file = path(a)?,
                "na_probs_file" => cfg.na_probs_file = optional(a, path)?,
                "metrics_file" => cfg.metrics_file = optional(a, path)?,
                "gradcheck_fault" => cfg.gradcheck_fault = (!a.value.is_empty()).then(|| a.value.clone()),
                "embedding_dim" => cfg.embedding_dim = parse_usize(a)?,
                "contextual_dim" => cfg.contextual_dim = optional(a, parse_usize)?,
                "workers" => cfg.workers = parse_usize(a)?,
                "resume" => cfg.resume = parse_bool(a)?,
                other => {
                    return Err(Error::Config(format!(
                        "{}: unknown key {other:?}; known keys: {}",
                        a.origin,
                        known_keys().join(", ")
                    )))
                }
            }
        }
        cfg.train = serde_path_to_error::deserialize(Value::Object(Map::from_iter(train)))
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file, then applies command-line overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut assignments = Vec::new();
        if let Some(file) = file {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
            let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
            assignments.extend(parse_config_text(&text, &base, &file.display().to_string())?);
        }
        assignments.extend(parse_overrides(overrides, Path::new("."))?);
        Self::from_assignments(&assignments)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.contextual_dim == Some(0) {
            return Err(Error::Config("contextual_dim must be positive".into()));
        }
        if self.contextual_file.is_some() != self.contextual_dim.is_some() {
            return Err(Error::Config("contextual_file and contextual_dim must be set together".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_file.clone().unwrap_or_else(|| self.checkpoint_dir.join("metrics.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.checkpoint_dir.join("best.ckpt"))
    }
}
