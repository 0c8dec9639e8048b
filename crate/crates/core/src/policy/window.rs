use rand::Rng;

use super::model::DtConfig;
use crate::error::{Error, Result};
use crate::taskenv::{OfflineDataset, Trajectory};

/// One `(return-to-go, state, action)` step.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptWindow {
    pub triplets: Vec<Triplet>,
    pub task_source: usize,
}

/// The most recent steps of an episode, oldest first. Slots before the first
/// entry are padding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryWindow {
    pub triplets: Vec<Triplet>,
}

impl HistoryWindow {
    /// Padding flags for a window of `k` slots, left-padded.
    pub fn padding(&self, k: usize) -> Vec<bool> {
        let pad = k.saturating_sub(self.triplets.len());
        (0..k).map(|i| i < pad).collect()
    }
}

/// Conditioning return, in environment reward units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetReturn(pub f64);

impl TargetReturn {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::config(format!("target return {value} is not finite")));
        }
        Ok(Self(value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rtg,
    State,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    History,
}

/// Identity of one token in the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRef {
    pub segment: Segment,
    pub step: usize,
    pub modality: Modality,
}

/// Token order: every prompt triplet, then every history slot, each as
/// `(rtg, state, action)`.
pub fn token_layout(cfg: &DtConfig) -> Vec<TokenRef> {
    let parts = (0..cfg.prompt_len)
        .map(|i| (Segment::Prompt, i))
        .chain((0..cfg.context).map(|i| (Segment::History, i)));
    parts
        .flat_map(|(segment, step)| {
            [Modality::Rtg, Modality::State, Modality::Action].map(|modality| TokenRef {
                segment,
                step,
                modality,
            })
        })
        .collect()
}

/// Flat model input for a batch of sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    /// Scaled returns-to-go, one per slot.
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// False on padded history slots.
    pub valid: Vec<bool>,
    /// Target actions for every history slot.
    pub targets: Vec<f64>,
    /// Loss weight per history slot, 0 on padding.
    pub weights: Vec<f64>,
    n: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Appends one prompt-plus-history sequence.
    pub fn push(&mut self, cfg: &DtConfig, prompt: &PromptWindow, history: &HistoryWindow) -> Result<()> {
        if prompt.triplets.len() != cfg.prompt_len {
            return Err(Error::data(format!(
                "prompt holds {} steps, expected {}",
                prompt.triplets.len(),
                cfg.prompt_len
            )));
        }
        if history.triplets.len() > cfg.context {
            return Err(Error::config(format!(
                "history holds {} steps, context is {}",
                history.triplets.len(),
                cfg.context
            )));
        }
        let check = |t: &Triplet| -> Result<()> {
            if t.state.len() != cfg.state_dim || t.action.len() != cfg.action_dim {
                return Err(Error::data("triplet dimensions do not match the model"));
            }
            Ok(())
        };
        for t in &prompt.triplets {
            check(t)?;
            self.push_slot(cfg, Some(t));
        }
        let pad = cfg.context - history.triplets.len();
        for _ in 0..pad {
            self.push_slot(cfg, None);
            self.targets.extend(std::iter::repeat(0.0).take(cfg.action_dim));
            self.weights.push(0.0);
        }
        for t in &history.triplets {
            check(t)?;
            self.push_slot(cfg, Some(t));
            self.targets.extend_from_slice(&t.action);
            self.weights.push(1.0);
        }
        self.n += 1;
        Ok(())
    }

    fn push_slot(&mut self, cfg: &DtConfig, t: Option<&Triplet>) {
        match t {
            Some(t) => {
                self.rtg.push(t.rtg * cfg.rtg_scale);
                self.states.extend_from_slice(&t.state);
                self.actions.extend_from_slice(&t.action);
                self.valid.push(true);
            }
            None => {
                self.rtg.push(0.0);
                self.states.extend(std::iter::repeat(0.0).take(cfg.state_dim));
                self.actions.extend(std::iter::repeat(0.0).take(cfg.action_dim));
                self.valid.push(false);
            }
        }
    }
}

/// Builds the single-sequence model input for a prompt and history.
pub fn build_input(cfg: &DtConfig, prompt: &PromptWindow, history: &HistoryWindow) -> Result<TrajectoryBatch> {
    let mut b = TrajectoryBatch::default();
    b.push(cfg, prompt, history)?;
    Ok(b)
}

/// An offline dataset with precomputed returns-to-go and a prompt pool.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub dataset: OfflineDataset,
    rtg: Vec<Vec<f64>>,
    prompt_pool: Vec<usize>,
}

/// Share of the highest-return trajectories that prompts are drawn from.
pub const PROMPT_POOL_FRACTION: f64 = 0.2;

impl TaskData {
    pub fn new(dataset: OfflineDataset) -> Result<Self> {
        if dataset.trajectories.is_empty() {
            return Err(Error::data(format!("dataset for task {} is empty", dataset.task_id)));
        }
        let rtg = dataset.trajectories.iter().map(Trajectory::returns_to_go).collect();
        let mut order: Vec<usize> = (0..dataset.trajectories.len()).collect();
        let ret: Vec<f64> = dataset.trajectories.iter().map(|t| t.episode_return()).collect();
        order.sort_by(|&a, &b| ret[b].total_cmp(&ret[a]).then(a.cmp(&b)));
        let keep = ((order.len() as f64 * PROMPT_POOL_FRACTION).ceil() as usize).max(1);
        order.truncate(keep);
        Ok(Self {
            dataset,
            rtg,
            prompt_pool: order,
        })
    }

    pub fn task_id(&self) -> usize {
        self.dataset.task_id
    }

    fn triplet(&self, traj: usize, t: usize) -> Triplet {
        let tr = &self.dataset.trajectories[traj];
        let (sd, ad) = (self.dataset.state_dim, self.dataset.action_dim);
        Triplet {
            rtg: self.rtg[traj][t],
            state: tr.states[t * sd..(t + 1) * sd].iter().map(|&v| v as f64).collect(),
            action: tr.actions[t * ad..(t + 1) * ad].iter().map(|&v| v as f64).collect(),
        }
    }

    /// `k` consecutive steps of a high-return trajectory. Shorter
    /// trajectories are repeated from their last step.
    pub fn sample_prompt<R: Rng>(&self, k: usize, rng: &mut R) -> PromptWindow {
        let traj = self.prompt_pool[rng.gen_range(0..self.prompt_pool.len())];
        let len = self.dataset.trajectories[traj].len();
        let start = if len > k { rng.gen_range(0..=len - k) } else { 0 };
        let triplets = (0..k).map(|i| self.triplet(traj, (start + i).min(len - 1))).collect();
        PromptWindow {
            triplets,
            task_source: self.task_id(),
        }
    }

    /// The `k` steps ending at a uniformly drawn step of a uniformly drawn trajectory.
    pub fn sample_history<R: Rng>(&self, k: usize, rng: &mut R) -> HistoryWindow {
        let traj = rng.gen_range(0..self.dataset.trajectories.len());
        let len = self.dataset.trajectories[traj].len();
        let end = rng.gen_range(0..len);
        let start = (end + 1).saturating_sub(k);
        HistoryWindow {
            triplets: (start..=end).map(|t| self.triplet(traj, t)).collect(),
        }
    }

    pub fn sample_batch<R: Rng>(&self, cfg: &DtConfig, size: usize, rng: &mut R) -> Result<TrajectoryBatch> {
        let mut b = TrajectoryBatch::default();
        for _ in 0..size {
            let prompt = self.sample_prompt(cfg.prompt_len, rng);
            let history = self.sample_history(cfg.context, rng);
            b.push(cfg, &prompt, &history)?;
        }
        Ok(b)
    }
}
