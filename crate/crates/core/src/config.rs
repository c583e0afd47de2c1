//! Flat `key = value` run configuration shared by every command.
//!
//! Keys are the command-line flag names without the leading dashes, so a
//! config file line `n-way = 5` and the flag `--n-way 5` set the same field.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::annotation::AmbiguityPolicy;
use crate::data::SynthConfig;
use crate::embedding::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tree: Option<String>,
    pub features: Option<String>,
    pub answers: Option<String>,
    pub checkpoint: Option<String>,
    pub report: Option<String>,
    pub embeddings: Option<String>,
    pub out: Option<String>,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    /// Number of answered tests to collect.
    pub budget: usize,
    pub policy: AmbiguityPolicy,
    pub distinct_leaves: bool,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub host: String,
    pub port: u16,
    pub lease_secs: u64,
    pub image_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tree: None,
            features: None,
            answers: None,
            checkpoint: None,
            report: None,
            embeddings: None,
            out: None,
            n_way: 5,
            k_shot: 1,
            episodes: 2000,
            budget: 1000,
            policy: AmbiguityPolicy::Discard,
            distinct_leaves: false,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            host: "127.0.0.1".into(),
            port: 8080,
            lease_secs: 600,
            image_dir: None,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "tree",
    "features",
    "answers",
    "checkpoint",
    "report",
    "embeddings",
    "out",
    "n-way",
    "k-shot",
    "episodes",
    "budget",
    "policy",
    "distinct-leaves",
    "margin",
    "lr",
    "epochs",
    "momentum",
    "decay",
    "milestones",
    "batch-size",
    "hidden",
    "output",
    "synth-dim",
    "synth-branching",
    "synth-scales",
    "synth-noise",
    "synth-samples-per-leaf",
    "synth-base-fraction",
    "synth-novel-fraction",
    "host",
    "port",
    "lease-secs",
    "image-dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

/// `auto` maps to `None`.
fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

fn opt_path(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_owned())
}

impl RunConfig {
    /// Sets one key. Values are taken verbatim, without surrounding space.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
                self.synth.seed = self.seed;
            }
            "tree" => self.tree = opt_path(v),
            "features" => self.features = opt_path(v),
            "answers" => self.answers = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "report" => self.report = opt_path(v),
            "embeddings" => self.embeddings = opt_path(v),
            "out" => self.out = opt_path(v),
            "n-way" => self.n_way = parse(key, v)?,
            "k-shot" => self.k_shot = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "policy" => self.policy = parse(key, v)?,
            "distinct-leaves" => self.distinct_leaves = parse(key, v)?,
            "margin" => self.train.margin = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "decay" => self.train.decay = parse(key, v)?,
            "milestones" => {
                self.train.milestones = if v == "auto" {
                    None
                } else if v.is_empty() {
                    Some(Vec::new())
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "batch-size" => self.train.batch_size = parse(key, v)?,
            "hidden" => self.train.hidden = parse_auto(key, v)?,
            "output" => self.train.output = parse_auto(key, v)?,
            "synth-dim" => self.synth.dim = parse(key, v)?,
            "synth-branching" => self.synth.branching = parse_list(key, v)?,
            "synth-scales" => self.synth.layer_scales = parse_list(key, v)?,
            "synth-noise" => self.synth.obs_noise = parse(key, v)?,
            "synth-samples-per-leaf" => self.synth.samples_per_leaf = parse(key, v)?,
            "synth-base-fraction" => self.synth.base_fraction = parse(key, v)?,
            "synth-novel-fraction" => self.synth.novel_fraction = parse(key, v)?,
            "host" => self.host = v.to_owned(),
            "port" => self.port = parse(key, v)?,
            "lease-secs" => self.lease_secs = parse(key, v)?,
            "image-dir" => self.image_dir = opt_path(v),
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let auto = |v: Option<usize>| v.map_or("auto".to_owned(), |v| v.to_string());
        Some(match key {
            "seed" => self.seed.to_string(),
            "tree" => path(&self.tree),
            "features" => path(&self.features),
            "answers" => path(&self.answers),
            "checkpoint" => path(&self.checkpoint),
            "report" => path(&self.report),
            "embeddings" => path(&self.embeddings),
            "out" => path(&self.out),
            "n-way" => self.n_way.to_string(),
            "k-shot" => self.k_shot.to_string(),
            "episodes" => self.episodes.to_string(),
            "budget" => self.budget.to_string(),
            "policy" => self.policy.to_string(),
            "distinct-leaves" => self.distinct_leaves.to_string(),
            "margin" => self.train.margin.to_string(),
            "lr" => self.train.lr.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "decay" => self.train.decay.to_string(),
            "milestones" => match &self.train.milestones {
                None => "auto".into(),
                Some(m) => join(m),
            },
            "batch-size" => self.train.batch_size.to_string(),
            "hidden" => auto(self.train.hidden),
            "output" => auto(self.train.output),
            "synth-dim" => self.synth.dim.to_string(),
            "synth-branching" => join(&self.synth.branching),
            "synth-scales" => join(&self.synth.layer_scales),
            "synth-noise" => self.synth.obs_noise.to_string(),
            "synth-samples-per-leaf" => self.synth.samples_per_leaf.to_string(),
            "synth-base-fraction" => self.synth.base_fraction.to_string(),
            "synth-novel-fraction" => self.synth.novel_fraction.to_string(),
            "host" => self.host.clone(),
            "port" => self.port.to_string(),
            "lease-secs" => self.lease_secs.to_string(),
            "image-dir" => path(&self.image_dir),
            _ => return None,
        })
    }

    /// Applies a config file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|&k| (k.to_owned(), self.get(k).expect("known key")))
            .collect()
    }

    /// Renders the configuration as a file that `from_text` reads back.
    pub fn to_text(&self) -> String {
        self.echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_way == 0 {
            return bad("n-way must be at least 1".into());
        }
        if self.k_shot == 0 {
            return bad("k-shot must be at least 1".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        match self.train.validate() {
            Err(crate::embedding::EmbeddingError::InvalidConfig(m)) => return bad(m),
            Err(e) => return bad(e.to_string()),
            Ok(()) => {}
        }
        if let Err(e) = self.synth.validate() {
            return bad(e.to_string());
        }
        Ok(())
    }
}
