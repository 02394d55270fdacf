//! Run configuration: canonical `key=value` text covering the dataset, the
//! network, training and the evaluation schedule.

use std::fmt::Write as _;
use std::path::PathBuf;

use siamseg::data::{GenParams, NUM_CLASSES};
use siamseg::optim::TrainConfig;
use siamseg::segnet::NetworkConfig;

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "SIAMSEG_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Holds `train/` and `eval/` datasets.
    pub data_dir: PathBuf,
    /// Checkpoints, learning curve and reports.
    pub out_dir: PathBuf,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub iterations: u64,
    pub eval_interval: u64,
    pub holdout: Vec<u32>,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Lower bound on haystack objects in the evaluation set.
    pub eval_min_objects: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            network: NetworkConfig::desk(),
            training: TrainConfig::desk(),
            iterations: 10_000,
            eval_interval: 500,
            holdout: vec![12, 13],
            train_episodes: 3000,
            eval_episodes: 200,
            min_objects: 2,
            max_objects: 6,
            eval_min_objects: 4,
            data_seed: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            network: NetworkConfig::paper(),
            training: TrainConfig::default(),
            iterations: 50_000,
            ..Self::desk()
        }
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            height: self.network.input_h,
            width: self.network.input_w,
            channels: self.network.in_channels,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            ..GenParams::default()
        }
    }

    pub fn eval_gen_params(&self) -> GenParams {
        GenParams { min_objects: self.eval_min_objects.max(self.min_objects), ..self.gen_params() }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data_dir.join("eval")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.ckpt")
    }

    pub fn curve_path(&self) -> PathBuf {
        self.out_dir.join("curve.csv")
    }

    /// Canonical text: run keys, then network keys, then training keys.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let holdout: Vec<String> = self.holdout.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "data_dir={}", self.data_dir.display());
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "eval_interval={}", self.eval_interval);
        let _ = writeln!(s, "holdout={}", holdout.join(","));
        let _ = writeln!(s, "train_episodes={}", self.train_episodes);
        let _ = writeln!(s, "eval_episodes={}", self.eval_episodes);
        let _ = writeln!(s, "min_objects={}", self.min_objects);
        let _ = writeln!(s, "max_objects={}", self.max_objects);
        let _ = writeln!(s, "eval_min_objects={}", self.eval_min_objects);
        let _ = writeln!(s, "data_seed={}", self.data_seed);
        s.push_str(&self.network.to_text());
        s.push_str(&self.training.to_text());
        s
    }

    /// Sets one key. `preset` resets every field, so it is only honoured
    /// through [`RunConfig::from_pairs`], which applies it first.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("{key}={value}: {e}"));
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "iterations" => self.iterations = v.parse().map_err(|e| bad(&e))?,
            "eval_interval" => self.eval_interval = v.parse().map_err(|e| bad(&e))?,
            "holdout" => {
                self.holdout = v
                    .split(',')
                    .map(|c| c.trim().parse::<u32>().map_err(|e| bad(&e)))
                    .collect::<CliResult<_>>()?
            }
            "train_episodes" => self.train_episodes = v.parse().map_err(|e| bad(&e))?,
            "eval_episodes" => self.eval_episodes = v.parse().map_err(|e| bad(&e))?,
            "min_objects" => self.min_objects = v.parse().map_err(|e| bad(&e))?,
            "max_objects" => self.max_objects = v.parse().map_err(|e| bad(&e))?,
            "eval_min_objects" => self.eval_min_objects = v.parse().map_err(|e| bad(&e))?,
            "data_seed" => self.data_seed = v.parse().map_err(|e| bad(&e))?,
            _ => {
                if !self.network.set(key, v)? && !self.training.set(key, v)? {
                    return Err(CliError::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Builds a config from `key=value` pairs in order; a `preset` key
    /// (`desk` or `paper`) is applied before all others.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> CliResult<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().map(|(k, v)| (k.trim(), v.trim())).collect();
        let mut cfg = Self::desk();
        for &(_, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            cfg = match v {
                "desk" => Self::desk(),
                "paper" => Self::paper(),
                _ => return Err(CliError::Config(format!("preset={v}: expected desk or paper"))),
            };
        }
        for &(k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses config text: one `key=value` per line, `#` comments allowed.
    pub fn parse_lines(text: &str) -> CliResult<Vec<(String, String)>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| CliError::Config(format!("expected key=value, got {l:?}")))
            })
            .collect()
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let pairs = Self::parse_lines(text)?;
        let cfg = Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every invariant before any expensive work starts.
    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.training.validate()?;
        let fail = |m: String| Err(CliError::Config(m));
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive".into());
        }
        if !self.iterations.is_multiple_of(self.eval_interval) {
            return fail(format!(
                "iterations ({}) must be a multiple of eval_interval ({})",
                self.iterations, self.eval_interval
            ));
        }
        let mut h = self.holdout.clone();
        h.sort_unstable();
        h.dedup();
        if h.len() != self.holdout.len() || h.is_empty() || h.iter().any(|&c| c == 0 || c > NUM_CLASSES) {
            return fail(format!(
                "holdout must list distinct classes in 1..={NUM_CLASSES}, got {:?}",
                self.holdout
            ));
        }
        let known = NUM_CLASSES as usize - h.len();
        if known < self.max_objects {
            return fail(format!(
                "{known} trained classes cannot fill haystacks of up to {} objects",
                self.max_objects
            ));
        }
        if self.eval_min_objects < h.len() {
            return fail(format!(
                "eval_min_objects ({}) must be at least the number of held-out classes ({})",
                self.eval_min_objects,
                h.len()
            ));
        }
        if self.train_episodes == 0 || self.eval_episodes == 0 {
            return fail("train_episodes and eval_episodes must be positive".into());
        }
        self.gen_params().validate()?;
        self.eval_gen_params().validate()?;
        Ok(())
    }
}
