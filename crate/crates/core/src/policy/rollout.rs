use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::DtModel;
use super::window::{HistoryWindow, PromptWindow, TargetReturn, TrajectoryBatch, Triplet};
use crate::error::{Error, Result};
use crate::grad::ParamVector;
use crate::taskenv::{self, EnvState, TaskSpec, ACTION_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    /// Conditioning return fed to the policy at each step.
    pub rtgs: Vec<f64>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// One episode to roll out: the task, its prompt, the conditioning return
/// and the seed for the start state.
#[derive(Debug, Clone)]
pub struct RolloutRequest {
    pub task: TaskSpec,
    pub prompt: PromptWindow,
    pub target: TargetReturn,
    pub seed: u64,
}

struct Live {
    env: EnvState,
    rtg: f64,
    history: Vec<Triplet>,
    record: EpisodeRecord,
}

/// Rolls out every request in lockstep with one forward pass per step.
///
/// `effective` is the parameter vector the policy runs with, already masked.
/// The last predicted action is executed and `r̂ ← r̂ − r` after each step.
pub fn rollout_batch(
    model: &DtModel,
    effective: &ParamVector,
    requests: &[RolloutRequest],
    horizon: usize,
) -> Result<Vec<EpisodeRecord>> {
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let cfg = &model.config;
    if cfg.action_dim != ACTION_DIM {
        return Err(Error::config(format!(
            "environment actions have {ACTION_DIM} dimensions, model emits {}",
            cfg.action_dim
        )));
    }
    let mut live: Vec<Live> = requests
        .iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let env = taskenv::reset(&r.task, &mut rng);
            Live {
                env,
                rtg: r.target.0,
                history: Vec::new(),
                record: EpisodeRecord {
                    task_id: r.task.task_id,
                    states: Vec::new(),
                    actions: Vec::new(),
                    rewards: Vec::new(),
                    rtgs: Vec::new(),
                    success: false,
                },
            }
        })
        .collect();
    let mut done = vec![false; requests.len()];
    for t in 0..horizon {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut batch = TrajectoryBatch::default();
        for &i in &active {
            let l = &mut live[i];
            let obs = taskenv::observe(&requests[i].task, &l.env).to_vec();
            l.history.push(Triplet {
                rtg: l.rtg,
                state: obs,
                action: vec![0.0; cfg.action_dim],
            });
            let from = l.history.len().saturating_sub(cfg.context);
            let window = HistoryWindow {
                triplets: l.history[from..].to_vec(),
            };
            batch.push(cfg, &requests[i].prompt, &window)?;
        }
        let pred = model.predict(effective, &batch)?;
        for (b, &i) in active.iter().enumerate() {
            let row = pred.row(b * cfg.context + cfg.context - 1);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Run(format!(
                    "policy produced non-finite action {row:?} at step {t} of episode {i} (task {})",
                    requests[i].task.task_id
                )));
            }
            let action = [row[0], row[1]];
            let task = &requests[i].task;
            let l = &mut live[i];
            l.history.last_mut().expect("pushed above").action = action.to_vec();
            let (next, reward, finished) = taskenv::step(task, &l.env, action);
            l.record.states.push(l.history.last().expect("pushed above").state.clone());
            l.record.actions.push(action);
            l.record.rewards.push(reward);
            l.record.rtgs.push(l.rtg);
            l.record.success |= taskenv::is_success(task, &next);
            l.rtg -= reward;
            l.env = next;
            if finished {
                done[i] = true;
            }
        }
    }
    Ok(live.into_iter().map(|l| l.record).collect())
}

/// Single-episode rollout under `θ ⊙ M`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &DtModel,
    task: &TaskSpec,
    params: &ParamVector,
    mask: &[bool],
    prompt: &PromptWindow,
    target: TargetReturn,
    horizon: usize,
    seed: u64,
) -> Result<EpisodeRecord> {
    let effective = params.masked(mask)?;
    let req = RolloutRequest {
        task: task.clone(),
        prompt: prompt.clone(),
        target,
        seed,
    };
    Ok(rollout_batch(model, &effective, &[req], horizon)?.remove(0))
}
