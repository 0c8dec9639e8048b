//! Offline dataset generation and the on-disk format.
//!
//! Layout per task: `<root>/<suite>/<task_id>/manifest.json` plus
//! `states.f32`, `actions.f32` and `rewards.f32`, each a raw little-endian
//! array holding every trajectory back to back.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{expert_action, is_success, observe, reset, step, Suite, TaskSpec};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quality {
    NearOptimal,
    SubOptimal,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::NearOptimal => "near-optimal",
            Quality::SubOptimal => "sub-optimal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "near-optimal" => Ok(Quality::NearOptimal),
            "sub-optimal" => Ok(Quality::SubOptimal),
            other => Err(Error::config(format!("unknown dataset quality {other}"))),
        }
    }
}

/// One episode stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `len × state_dim`, the observation before each action.
    pub states: Vec<f32>,
    /// `len × action_dim`, the executed (clamped) actions.
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Undiscounted suffix sums, built by `rtg[t] = rtg[t+1] + r[t]`.
    pub fn returns_to_go(&self) -> Vec<f64> {
        let mut rtg = vec![0.0; self.len()];
        let mut acc = 0.0;
        for t in (0..self.len()).rev() {
            acc += self.rewards[t] as f64;
            rtg[t] = acc;
        }
        rtg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub task_id: usize,
    pub quality: Quality,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl OfflineDataset {
    pub fn mean_return(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(|t| t.episode_return()).sum::<f64>() / n
    }

    /// The best episode return in the data, used as the conditioning target.
    pub fn target_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.episode_return())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().filter(|t| t.success).count() as f64 / n
    }
}

/// Behaviour noise level of trajectory `i` out of `n`.
///
/// Near-optimal sweeps linearly from 1 (uniform random) down to 0 (expert).
/// Sub-optimal covers only the first half of that sweep, 1 down to 0.5.
fn noise_level(quality: Quality, i: usize, n: usize) -> f64 {
    let frac = if n <= 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
    match quality {
        Quality::NearOptimal => 1.0 - frac,
        Quality::SubOptimal => 1.0 - 0.5 * frac,
    }
}

fn dataset_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a5c_0000 + task_id as u64);
    rng
}

fn uniform_disk<R: Rng>(rng: &mut R) -> [f64; 2] {
    loop {
        let x = rng.gen_range(-1.0..=1.0);
        let y = rng.gen_range(-1.0..=1.0);
        if x * x + y * y <= 1.0 {
            return [x, y];
        }
    }
}

/// Rolls out `n_traj` behaviour episodes mixing expert and random actions.
///
/// Trajectory `i` plays `(1 − σ_i)·expert + σ_i·u` with `u` uniform on the
/// unit disk. Goals are resampled every episode.
pub fn generate_dataset(task: &TaskSpec, quality: Quality, n_traj: usize, seed: u64) -> Result<OfflineDataset> {
    if n_traj == 0 {
        return Err(Error::config("n_traj must be >= 1"));
    }
    let mut rng = dataset_rng(seed, task.task_id);
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let sigma = noise_level(quality, i, n_traj);
        let mut s = reset(task, &mut rng);
        let mut traj = Trajectory {
            states: Vec::with_capacity(task.horizon * task.state_dim),
            actions: Vec::with_capacity(task.horizon * task.action_dim),
            rewards: Vec::with_capacity(task.horizon),
            success: false,
        };
        for _ in 0..task.horizon {
            let e = expert_action(task, &s);
            let u = uniform_disk(&mut rng);
            let a = [
                (1.0 - sigma) * e[0] + sigma * u[0],
                (1.0 - sigma) * e[1] + sigma * u[1],
            ];
            let a = super::clamp_action(a);
            traj.states.extend(observe(task, &s).iter().map(|&v| v as f32));
            traj.actions.extend(a.iter().map(|&v| v as f32));
            let (next, r, done) = step(task, &s, a);
            traj.rewards.push(r as f32);
            s = next;
            traj.success |= is_success(task, &s);
            if done {
                break;
            }
        }
        trajectories.push(traj);
    }
    Ok(OfflineDataset {
        task_id: task.task_id,
        quality,
        seed,
        state_dim: task.state_dim,
        action_dim: task.action_dim,
        trajectories,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Checksums {
    states: String,
    actions: String,
    rewards: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format: String,
    task_id: usize,
    quality: Quality,
    seed: u64,
    state_dim: usize,
    action_dim: usize,
    n_traj: usize,
    lengths: Vec<usize>,
    successes: Vec<bool>,
    mean_return: f64,
    target_return: f64,
    checksums: Checksums,
}

const FORMAT: &str = "harmodt-dataset-v1";

fn f32_bytes<'a>(it: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    it.flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes one task's dataset into `dir` (the `<suite>/<task_id>` directory).
pub fn save_dataset(dir: &Path, ds: &OfflineDataset) -> Result<()> {
    if ds.trajectories.is_empty() || ds.trajectories.iter().any(|t| t.is_empty()) {
        return Err(Error::data("refusing to save an empty trajectory"));
    }
    let states = f32_bytes(ds.trajectories.iter().flat_map(|t| t.states.iter()));
    let actions = f32_bytes(ds.trajectories.iter().flat_map(|t| t.actions.iter()));
    let rewards = f32_bytes(ds.trajectories.iter().flat_map(|t| t.rewards.iter()));
    let manifest = Manifest {
        format: FORMAT.into(),
        task_id: ds.task_id,
        quality: ds.quality,
        seed: ds.seed,
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        n_traj: ds.trajectories.len(),
        lengths: ds.trajectories.iter().map(|t| t.len()).collect(),
        successes: ds.trajectories.iter().map(|t| t.success).collect(),
        mean_return: ds.mean_return(),
        target_return: ds.target_return(),
        checksums: Checksums {
            states: sha256_hex(&states),
            actions: sha256_hex(&actions),
            rewards: sha256_hex(&rewards),
        },
    };
    fsutil::write_atomic(&dir.join("states.f32"), &states)?;
    fsutil::write_atomic(&dir.join("actions.f32"), &actions)?;
    fsutil::write_atomic(&dir.join("rewards.f32"), &rewards)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fsutil::write_atomic(&dir.join("manifest.json"), &json)
}

fn read_array(path: &Path, expected_len: usize, checksum: &str) -> Result<Vec<f32>> {
    let bytes = fsutil::read(path)?;
    let want = expected_len * 4;
    if bytes.len() != want {
        let offset = bytes.len().min(want) as u64;
        return Err(Error::data_at(
            path,
            Some(offset),
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    if sha256_hex(&bytes) != checksum {
        return Err(Error::data_at(path, Some(0), "checksum mismatch"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<OfflineDataset> {
    let mpath = dir.join("manifest.json");
    let text = fsutil::read(&mpath)?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| {
        Error::data_at(
            &mpath,
            Some(e.column() as u64),
            format!("malformed manifest (line {}): {e}", e.line()),
        )
    })?;
    if m.format != FORMAT {
        return Err(Error::data_at(&mpath, Some(0), format!("unsupported format {}", m.format)));
    }
    if m.n_traj == 0 || m.lengths.len() != m.n_traj || m.successes.len() != m.n_traj {
        return Err(Error::data_at(&mpath, None, "trajectory count inconsistent or zero"));
    }
    if m.lengths.iter().any(|&l| l == 0) {
        return Err(Error::data_at(&mpath, None, "empty trajectory"));
    }
    if m.state_dim == 0 || m.action_dim == 0 {
        return Err(Error::data_at(&mpath, None, "zero dimension"));
    }
    let steps: usize = m.lengths.iter().sum();
    let states = read_array(&dir.join("states.f32"), steps * m.state_dim, &m.checksums.states)?;
    let actions = read_array(&dir.join("actions.f32"), steps * m.action_dim, &m.checksums.actions)?;
    let rewards = read_array(&dir.join("rewards.f32"), steps, &m.checksums.rewards)?;
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::data_at(dir.join("rewards.f32"), None, "non-finite reward"));
    }
    let mut trajectories = Vec::with_capacity(m.n_traj);
    let mut at = 0;
    for (&len, &success) in m.lengths.iter().zip(&m.successes) {
        trajectories.push(Trajectory {
            states: states[at * m.state_dim..(at + len) * m.state_dim].to_vec(),
            actions: actions[at * m.action_dim..(at + len) * m.action_dim].to_vec(),
            rewards: rewards[at..at + len].to_vec(),
            success,
        });
        at += len;
    }
    Ok(OfflineDataset {
        task_id: m.task_id,
        quality: m.quality,
        seed: m.seed,
        state_dim: m.state_dim,
        action_dim: m.action_dim,
        trajectories,
    })
}

pub fn task_dir(root: &Path, suite: &str, task_id: usize) -> PathBuf {
    root.join(suite).join(task_id.to_string())
}

pub fn save_suite_datasets(root: &Path, suite: &Suite, datasets: &[OfflineDataset]) -> Result<()> {
    for ds in datasets {
        save_dataset(&task_dir(root, &suite.name, ds.task_id), ds)?;
    }
    Ok(())
}

/// Loads every task of `suite`; missing tasks are listed in one error.
pub fn load_suite_datasets(root: &Path, suite: &Suite) -> Result<Vec<OfflineDataset>> {
    let missing: Vec<String> = suite
        .tasks
        .iter()
        .filter(|t| !task_dir(root, &suite.name, t.task_id).join("manifest.json").exists())
        .map(|t| t.task_id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing datasets for tasks [{}] under {}",
            missing.join(", "),
            root.join(&suite.name).display()
        )));
    }
    suite
        .tasks
        .iter()
        .map(|t| load_dataset(&task_dir(root, &suite.name, t.task_id)))
        .collect()
}
