use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::harmony::{active_count, ImportanceKind};
use crate::policy::DtConfig;
use crate::taskenv::{Quality, Suite};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "HARMO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Shared policy without masks.
    Mtdt,
    Harmodt,
    Gharmodt,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Mtdt => "mtdt",
            Algo::Harmodt => "harmodt",
            Algo::Gharmodt => "gharmodt",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtdt" => Ok(Algo::Mtdt),
            "harmodt" => Ok(Algo::Harmodt),
            "gharmodt" => Ok(Algo::Gharmodt),
            other => Err(Error::config(format!(
                "unknown algorithm {other}; expected mtdt, harmodt or gharmodt"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Task id known; its mask is applied directly.
    Provided,
    /// Group identified by the gating classifier first.
    Agnostic,
    /// Held-out tasks under the voted mask.
    Unseen,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Provided => "provided",
            Protocol::Agnostic => "agnostic",
            Protocol::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "provided" => Ok(Protocol::Provided),
            "agnostic" => Ok(Protocol::Agnostic),
            "unseen" => Ok(Protocol::Unseen),
            other => Err(Error::config(format!(
                "unknown protocol {other}; expected provided, agnostic or unseen"
            ))),
        }
    }
}

/// Every knob of a run. Field names double as config-file keys and CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite: String,
    pub quality: Quality,
    /// Trajectories generated per task.
    pub n_traj: usize,
    pub data_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    /// History length `K`.
    pub context: usize,
    /// Prompt length `K*`.
    pub prompt_len: usize,
    pub dropout: f64,
    pub rtg_scale: f64,

    /// Total iterations `E`.
    pub iterations: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub sparsity: f64,
    pub lambda: f64,
    /// Mask update interval `t_m`, also the logging interval.
    pub mask_interval: u64,
    pub eta_min: usize,
    pub eta_max: usize,
    pub importance: ImportanceKind,
    /// Votes a coordinate needs to exceed to stay active for unseen tasks.
    pub thresh: usize,

    /// Unmasked warm-up iterations `t_w` before grouping.
    pub warmup: u64,
    pub n_groups: usize,
    /// Group counts covered by the group-sweep export.
    pub group_sweep: Vec<usize>,
    pub gn: usize,
    pub gating_epochs: usize,
    pub gating_windows: usize,

    pub seed: u64,
    pub n_seeds: usize,
    /// Evaluation episodes per task per seed.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: "pointgoal-8".into(),
            quality: Quality::SubOptimal,
            n_traj: 100,
            data_seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            embed: 32,
            layers: 1,
            heads: 2,
            context: 10,
            prompt_len: 5,
            dropout: 0.1,
            rtg_scale: 0.1,
            iterations: 20_000,
            lr: 3e-4,
            batch_size: 64,
            sparsity: 0.2,
            lambda: 10.0,
            mask_interval: 500,
            eta_min: 0,
            eta_max: 100,
            importance: ImportanceKind::Fisher,
            thresh: 3,
            warmup: 2_000,
            n_groups: 4,
            group_sweep: vec![1, 2, 4, 8],
            gn: 5,
            gating_epochs: 20,
            gating_windows: 1024,
            seed: 0,
            n_seeds: 1,
            eval_episodes: 50,
        }
    }
}

pub const KEYS: &[&str] = &[
    "suite",
    "quality",
    "n_traj",
    "data_seed",
    "data_dir",
    "out_dir",
    "embed",
    "layers",
    "heads",
    "context",
    "prompt_len",
    "dropout",
    "rtg_scale",
    "iterations",
    "lr",
    "batch_size",
    "sparsity",
    "lambda",
    "mask_interval",
    "eta_min",
    "eta_max",
    "importance",
    "thresh",
    "warmup",
    "n_groups",
    "group_sweep",
    "gn",
    "gating_epochs",
    "gating_windows",
    "seed",
    "n_seeds",
    "eval_episodes",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    let v = value.trim();
    let parsed = v.parse::<T>().ok().or_else(|| {
        // allow 2e4 style integers
        v.parse::<f64>()
            .ok()
            .filter(|f| f.fract() == 0.0 && *f >= 0.0)
            .and_then(|f| format!("{f:.0}").parse::<T>().ok())
    });
    parsed.ok_or_else(|| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    /// Values scaled to the original training budget and model size.
    pub fn full_scale() -> Self {
        Self {
            embed: 256,
            layers: 6,
            heads: 8,
            context: 20,
            prompt_len: 5,
            iterations: 1_000_000,
            batch_size: 256,
            mask_interval: 5_000,
            warmup: 100_000,
            thresh: 25,
            n_groups: 5,
            group_sweep: vec![1, 2, 4, 5, 8],
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "suite" => self.suite = v.to_string(),
            "quality" => self.quality = Quality::parse(v)?,
            "n_traj" => self.n_traj = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "embed" => self.embed = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "context" => self.context = num(key, v)?,
            "prompt_len" => self.prompt_len = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "rtg_scale" => self.rtg_scale = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "sparsity" => self.sparsity = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "mask_interval" => self.mask_interval = num(key, v)?,
            "eta_min" => self.eta_min = num(key, v)?,
            "eta_max" => self.eta_max = num(key, v)?,
            "importance" => {
                self.importance = ImportanceKind::parse(v)
                    .ok_or_else(|| Error::config(format!("importance: expected fisher or magnitude, got {v:?}")))?
            }
            "thresh" => self.thresh = num(key, v)?,
            "warmup" => self.warmup = num(key, v)?,
            "n_groups" => self.n_groups = num(key, v)?,
            "group_sweep" => self.group_sweep = list(key, v)?,
            "gn" => self.gn = num(key, v)?,
            "gating_epochs" => self.gating_epochs = num(key, v)?,
            "gating_windows" => self.gating_windows = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "n_seeds" => self.n_seeds = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "suite" => self.suite.clone(),
            "quality" => self.quality.as_str().into(),
            "n_traj" => self.n_traj.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "embed" => self.embed.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "context" => self.context.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "rtg_scale" => self.rtg_scale.to_string(),
            "iterations" => self.iterations.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "sparsity" => self.sparsity.to_string(),
            "lambda" => self.lambda.to_string(),
            "mask_interval" => self.mask_interval.to_string(),
            "eta_min" => self.eta_min.to_string(),
            "eta_max" => self.eta_max.to_string(),
            "importance" => match self.importance {
                ImportanceKind::Fisher => "fisher".into(),
                ImportanceKind::Magnitude => "magnitude".into(),
            },
            "thresh" => self.thresh.to_string(),
            "warmup" => self.warmup.to_string(),
            "n_groups" => self.n_groups.to_string(),
            "group_sweep" => self
                .group_sweep
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "gn" => self.gn.to_string(),
            "gating_epochs" => self.gating_epochs.to_string(),
            "gating_windows" => self.gating_windows.to_string(),
            "seed" => self.seed.to_string(),
            "n_seeds" => self.n_seeds.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            offset += line.len() as u64 + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::data_at(origin, Some(at), format!("expected key = value, got {body:?}")))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::data_at(origin, Some(at), e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&fsutil::read_string(path)?, path)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    /// Replaces `seed` with the value of `HARMO_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn dt_config(&self) -> DtConfig {
        DtConfig {
            state_dim: crate::taskenv::STATE_DIM,
            action_dim: crate::taskenv::ACTION_DIM,
            embed: self.embed,
            layers: self.layers,
            heads: self.heads,
            context: self.context,
            prompt_len: self.prompt_len,
            dropout: self.dropout,
            rtg_scale: self.rtg_scale,
        }
    }

    pub fn suite(&self) -> Result<Suite> {
        Suite::by_name(&self.suite)
    }

    /// Checks every precondition that does not need the model built.
    /// Checks that every group_sweep entry fits the suite's training tasks.
    pub fn validate_sweep(&self) -> Result<()> {
        let n_train = self.suite()?.training_tasks().len();
        match self.group_sweep.iter().find(|&&g| g > n_train) {
            Some(g) => Err(Error::config(format!("group_sweep entry {g} outside 1..={n_train}"))),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let suite = self.suite()?;
        self.dt_config().validate()?;
        if self.n_traj == 0 {
            return Err(Error::config("n_traj must be at least 1"));
        }
        if self.iterations == 0 || self.mask_interval == 0 {
            return Err(Error::config("iterations and mask_interval must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.eta_min > self.eta_max {
            return Err(Error::config(format!(
                "eta_min {} exceeds eta_max {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.warmup >= self.iterations {
            return Err(Error::config(format!(
                "warmup {} must be below iterations {}",
                self.warmup, self.iterations
            )));
        }
        let n_train = suite.training_tasks().len();
        if self.n_groups == 0 || self.n_groups > n_train {
            return Err(Error::config(format!(
                "n_groups {} outside 1..={n_train}",
                self.n_groups
            )));
        }
        if self.group_sweep.contains(&0) {
            return Err(Error::config("group_sweep entries must be positive"));
        }
        if self.gn == 0 || self.gating_windows == 0 {
            return Err(Error::config("gn and gating_windows must be positive"));
        }
        if self.n_seeds == 0 || self.eval_episodes == 0 {
            return Err(Error::config("n_seeds and eval_episodes must be positive"));
        }
        Ok(())
    }

    /// Checks the flip budget against the mask size of a built model.
    pub fn validate_for(&self, num_params: usize) -> Result<()> {
        let active = active_count(num_params, self.sparsity);
        if self.eta_max > active {
            return Err(Error::config(format!(
                "eta_max {} exceeds the {active} active coordinates per mask",
                self.eta_max
            )));
        }
        Ok(())
    }
}
