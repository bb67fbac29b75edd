//! Run configuration stored as flat `key = value` lines.
//!
//! ```text
//! # vision run at 70% FLOPs
//! task = vision
//! keep_ratio = 0.7
//! mode = tau
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use crate::error::{Error, Result};
use crate::importance::{Aggregation, ScoreConfig, Task, TrajectoryRange};
use crate::model::TapPoint;
use crate::search::{Mode, DEFAULT_TOKEN_SHARE};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub score: ScoreConfig,
    pub keep_ratio: f64,
    pub mode: Mode,
    /// Fraction of the FLOPs reduction left to tokens in `tau` mode.
    pub token_share: f64,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub batch: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Language)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            score: ScoreConfig::for_task(task),
            keep_ratio: 0.6,
            mode: Mode::Base,
            token_share: DEFAULT_TOKEN_SHARE,
            seed: 0,
            model: None,
            batch: None,
            output: None,
        }
    }

    /// Sets one key. `task` also resets λ to the task default.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {
                self.task = value.parse()?;
                self.score.lambda = self.task.default_lambda();
            }
            "lambda" => self.score.lambda = parse(key, value)?,
            "temperature" => self.score.temperature = parse(key, value)?,
            "aggregation" => self.score.aggregation = value.parse::<Aggregation>()?,
            "depth" => self.score.range = value.parse::<TrajectoryRange>()?,
            "tap" => self.score.tap = value.parse::<TapPoint>()?,
            "batch_size" => self.score.batch_size = parse(key, value)?,
            "keep_ratio" => self.keep_ratio = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "token_share" => self.token_share = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "model" => self.model = Some(PathBuf::from(value)),
            "batch" => self.batch = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. A `task` line is
    /// applied first so an explicit `lambda` anywhere in the file wins.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "task");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let s = &self.score;
        let mut out = String::new();
        let task = match self.task {
            Task::Language => "language",
            Task::Vision => "vision",
        };
        let agg = match s.aggregation {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        };
        let _ = writeln!(out, "task = {task}");
        let _ = writeln!(out, "lambda = {}", s.lambda);
        let _ = writeln!(out, "temperature = {}", s.temperature);
        let _ = writeln!(out, "aggregation = {agg}");
        let _ = writeln!(out, "depth = {}", s.range.as_str());
        let _ = writeln!(out, "tap = {}", s.tap.as_str());
        let _ = writeln!(out, "batch_size = {}", s.batch_size);
        let _ = writeln!(out, "keep_ratio = {}", self.keep_ratio);
        let _ = writeln!(out, "mode = {}", self.mode.as_str());
        let _ = writeln!(out, "token_share = {}", self.token_share);
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in [
            ("model", &self.model),
            ("batch", &self.batch),
            ("output", &self.output),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.score.validate()?;
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio {} outside (0, 1]",
                self.keep_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.token_share) {
            return Err(Error::Config(format!(
                "token_share {} outside [0, 1]",
                self.token_share
            )));
        }
        Ok(())
    }
}
