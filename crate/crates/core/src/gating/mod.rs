//! Group identification from a short window of transitions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{
    load_checkpoint, save_checkpoint, Checkpoint, Layout, MaskedAdam, NodeId, ParamVector, SegmentId,
    SegmentKind, Tape, Tensor,
};
use crate::grouping::GroupAssignment;
use crate::policy::{rollout_batch, DtModel, EpisodeRecord, PromptWindow, RolloutRequest, TargetReturn, Triplet};
use crate::taskenv::{OfflineDataset, TaskSpec};

pub const HIDDEN: usize = 128;
pub const DEFAULT_GN: usize = 5;
pub const HOLDOUT_FRACTION: f64 = 0.2;
/// `task_source` of the all-zero prompt used while probing.
pub const PROBE_SOURCE: usize = usize::MAX;

/// One environment step as seen by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Flattened `(s, a, r)` of `gn` consecutive transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingInput(pub Vec<f64>);

pub fn input_len(gn: usize, state_dim: usize, action_dim: usize) -> usize {
    gn * (state_dim + action_dim + 1)
}

pub fn build_gating_input(transitions: &[Transition], gn: usize) -> Result<GatingInput> {
    if gn == 0 {
        return Err(Error::config("gn must be at least 1"));
    }
    if transitions.len() != gn {
        return Err(Error::data(format!(
            "gating input needs exactly {gn} transitions, got {}",
            transitions.len()
        )));
    }
    let (sd, ad) = (transitions[0].state.len(), transitions[0].action.len());
    let mut v = Vec::with_capacity(input_len(gn, sd, ad));
    for t in transitions {
        if t.state.len() != sd || t.action.len() != ad {
            return Err(Error::data("transitions have inconsistent dimensions"));
        }
        v.extend_from_slice(&t.state);
        v.extend_from_slice(&t.action);
        v.push(t.reward);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("gating input has non-finite entries"));
    }
    Ok(GatingInput(v))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingShape {
    pub n_groups: usize,
    pub gn: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

impl GatingShape {
    pub fn input_dim(&self) -> usize {
        input_len(self.gn, self.state_dim, self.action_dim)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: SegmentId,
    b: SegmentId,
}

/// Three affine layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct GatingModel {
    pub shape: GatingShape,
    pub params: ParamVector,
    layers: [Dense; 3],
}

fn layout_for(shape: &GatingShape) -> (Layout, [Dense; 3]) {
    let mut l = Layout::new();
    let dims = [shape.input_dim(), shape.hidden, shape.hidden, shape.n_groups];
    let mut dense = |i: usize| Dense {
        w: l.push(format!("gate.l{i}.w"), dims[i], dims[i + 1], SegmentKind::LinearWeight),
        b: l.push(format!("gate.l{i}.b"), 1, dims[i + 1], SegmentKind::Bias),
    };
    let layers = [dense(0), dense(1), dense(2)];
    (l, layers)
}

impl GatingModel {
    pub fn new(shape: GatingShape, seed: u64) -> Result<Self> {
        if shape.n_groups == 0 || shape.gn == 0 || shape.hidden == 0 {
            return Err(Error::config("gating dimensions must be positive"));
        }
        let (layout, layers) = layout_for(&shape);
        let mut params = ParamVector::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in &layers {
            let seg = params.layout().segment(d.w).clone();
            let bound = 1.0 / (seg.fan_in as f64).sqrt();
            for v in &mut params.values_mut()[seg.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { shape, params, layers })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Builds the logits node for a `rows × input_dim` input.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVector, x: Tensor) -> Result<NodeId> {
        if x.cols != self.shape.input_dim() {
            return Err(Error::config(format!(
                "gating input has width {}, expected {}",
                x.cols,
                self.shape.input_dim()
            )));
        }
        let mut h = tape.input(x);
        let layout = params.layout().clone();
        for (i, d) in self.layers.iter().enumerate() {
            let w = tape.param(params, layout.segment(d.w))?;
            let b = tape.param(params, layout.segment(d.b))?;
            h = tape.affine(h, w, b)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn loss(&self, tape: &mut Tape, params: &ParamVector, x: Tensor, labels: &[usize]) -> Result<NodeId> {
        let logits = self.forward(tape, params, x)?;
        tape.cross_entropy(logits, labels)
    }

    pub fn logits_batch(&self, inputs: &[GatingInput]) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack(inputs, self.shape.input_dim())?;
        let mut tape = Tape::eval();
        let out = self.forward(&mut tape, &self.params, x)?;
        let t = tape.value(out);
        Ok((0..t.rows).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn logits(&self, input: &GatingInput) -> Result<Vec<f64>> {
        Ok(self.logits_batch(std::slice::from_ref(input))?.remove(0))
    }

    pub fn classify(&self, input: &GatingInput) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("gating".to_string(), serde_json::to_string(&self.shape)?);
        save_checkpoint(
            manifest,
            &Checkpoint {
                params: self.params.clone(),
                extra,
            },
        )
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(manifest)?;
        let raw = ckpt
            .extra
            .get("gating")
            .ok_or_else(|| Error::data_at(manifest, None, "checkpoint has no gating metadata"))?;
        let shape: GatingShape = serde_json::from_str(raw)
            .map_err(|e| Error::data_at(manifest, None, format!("malformed gating metadata: {e}")))?;
        let (layout, layers) = layout_for(&shape);
        if &layout != ckpt.params.layout() {
            return Err(Error::data_at(manifest, None, "parameter layout does not match the gating shape"));
        }
        Ok(Self {
            shape,
            params: ckpt.params,
            layers,
        })
    }
}

fn stack(inputs: &[GatingInput], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(inputs.len() * width);
    for i in inputs {
        if i.0.len() != width {
            return Err(Error::config(format!(
                "gating input has width {}, expected {width}",
                i.0.len()
            )));
        }
        data.extend_from_slice(&i.0);
    }
    Tensor::new(inputs.len(), width, data)
}

/// `gn` consecutive transitions of a stored trajectory starting at `start`.
pub fn dataset_window(ds: &OfflineDataset, traj: usize, start: usize, gn: usize) -> Result<GatingInput> {
    let tr = &ds.trajectories[traj];
    let (sd, ad) = (ds.state_dim, ds.action_dim);
    if start + gn > tr.len() {
        return Err(Error::data(format!(
            "trajectory {traj} of task {} has {} steps, window needs {}",
            ds.task_id,
            tr.len(),
            start + gn
        )));
    }
    let ts: Vec<Transition> = (start..start + gn)
        .map(|t| Transition {
            state: tr.states[t * sd..(t + 1) * sd].iter().map(|&v| v as f64).collect(),
            action: tr.actions[t * ad..(t + 1) * ad].iter().map(|&v| v as f64).collect(),
            reward: tr.rewards[t] as f64,
        })
        .collect();
    build_gating_input(&ts, gn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingTrainConfig {
    pub gn: usize,
    pub epochs: usize,
    /// Windows drawn per epoch.
    pub windows_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GatingTrainConfig {
    fn default() -> Self {
        Self {
            gn: DEFAULT_GN,
            epochs: 20,
            windows_per_epoch: 1024,
            batch_size: 64,
            lr: 3e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    pub n_groups: usize,
    pub gn: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub heldout_windows: usize,
    pub heldout_accuracy: f64,
    /// Held-out accuracy restricted to windows of each group's tasks.
    pub per_group_accuracy: Vec<f64>,
}

struct Split {
    train: Vec<Vec<usize>>,
    heldout: Vec<Vec<usize>>,
}

fn split_trajectories(datasets: &[OfflineDataset], gn: usize, rng: &mut ChaCha8Rng) -> Result<Split> {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for ds in datasets {
        let mut usable: Vec<usize> = (0..ds.trajectories.len())
            .filter(|&i| ds.trajectories[i].len() >= gn)
            .collect();
        if usable.len() < 2 {
            return Err(Error::data(format!(
                "task {} needs at least two trajectories of {gn}+ steps for a held-out split",
                ds.task_id
            )));
        }
        usable.shuffle(rng);
        let n_hold = ((usable.len() as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, usable.len() - 1);
        let hold = usable.split_off(usable.len() - n_hold);
        usable.sort_unstable();
        let mut hold = hold;
        hold.sort_unstable();
        train.push(usable);
        heldout.push(hold);
    }
    Ok(Split { train, heldout })
}

/// Fits a fresh classifier to predict each window's group. Datasets are
/// indexed by task id, matching `assignment.groups`.
pub fn train_gating(
    datasets: &[OfflineDataset],
    assignment: &GroupAssignment,
    cfg: &GatingTrainConfig,
) -> Result<(GatingModel, GatingReport)> {
    assignment.validate()?;
    if datasets.len() != assignment.num_tasks() {
        return Err(Error::config(format!(
            "{} datasets for an assignment over {} tasks",
            datasets.len(),
            assignment.num_tasks()
        )));
    }
    for (i, ds) in datasets.iter().enumerate() {
        if ds.task_id != i {
            return Err(Error::config(format!("dataset {i} belongs to task {}", ds.task_id)));
        }
    }
    if cfg.batch_size == 0 || cfg.windows_per_epoch == 0 {
        return Err(Error::config("gating batch size and epoch size must be positive"));
    }
    let shape = GatingShape {
        n_groups: assignment.n_groups,
        gn: cfg.gn,
        state_dim: datasets[0].state_dim,
        action_dim: datasets[0].action_dim,
        hidden: HIDDEN,
    };
    let mut model = GatingModel::new(shape, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09_e667_f3bc_c908);
    let split = split_trajectories(datasets, cfg.gn, &mut rng)?;
    let mut adam = MaskedAdam::new(model.num_params(), cfg.lr);
    let ones = vec![true; model.num_params()];
    let n_tasks = datasets.len();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        let mut left = cfg.windows_per_epoch;
        while left > 0 {
            let size = left.min(cfg.batch_size);
            left -= size;
            let mut inputs = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            for _ in 0..size {
                let task = rng.gen_range(0..n_tasks);
                let pool = &split.train[task];
                let traj = pool[rng.gen_range(0..pool.len())];
                let len = datasets[task].trajectories[traj].len();
                let start = rng.gen_range(0..=len - cfg.gn);
                inputs.push(dataset_window(&datasets[task], traj, start, cfg.gn)?);
                labels.push(assignment.group_of(task));
            }
            let x = stack(&inputs, shape.input_dim())?;
            let mut tape = Tape::eval();
            let loss = model.loss(&mut tape, &model.params, x, &labels)?;
            total += tape.scalar(loss);
            batches += 1;
            let grad = tape.backward(loss)?;
            adam.step(&mut model.params, &grad, &ones)?;
        }
        final_loss = total / batches as f64;
    }
    let mut correct = vec![0usize; shape.n_groups];
    let mut seen = vec![0usize; shape.n_groups];
    for (task, pool) in split.heldout.iter().enumerate() {
        let g = assignment.group_of(task);
        let mut inputs = Vec::new();
        for &traj in pool {
            let len = datasets[task].trajectories[traj].len();
            for start in 0..=len - cfg.gn {
                inputs.push(dataset_window(&datasets[task], traj, start, cfg.gn)?);
            }
        }
        for logits in model.logits_batch(&inputs)? {
            seen[g] += 1;
            if argmax(&logits) == g {
                correct[g] += 1;
            }
        }
    }
    let total_seen: usize = seen.iter().sum();
    let report = GatingReport {
        n_groups: shape.n_groups,
        gn: cfg.gn,
        epochs: cfg.epochs,
        final_loss,
        heldout_windows: total_seen,
        heldout_accuracy: correct.iter().sum::<usize>() as f64 / total_seen.max(1) as f64,
        per_group_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(&c, &s)| c as f64 / s.max(1) as f64)
            .collect(),
    };
    Ok((model, report))
}

/// Outcome of probing an episode and classifying it.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub group: usize,
    pub logits: Vec<f64>,
    /// Set when even the retried probe ended early and the window was zero-padded.
    pub padded: bool,
    /// The probe transitions, at most `gn` steps.
    pub probe: EpisodeRecord,
}

/// All-zero prompt used while the task is still unknown.
pub fn probe_prompt(policy: &DtModel) -> PromptWindow {
    let cfg = &policy.config;
    PromptWindow {
        triplets: (0..cfg.prompt_len)
            .map(|_| Triplet {
                rtg: 0.0,
                state: vec![0.0; cfg.state_dim],
                action: vec![0.0; cfg.action_dim],
            })
            .collect(),
        task_source: PROBE_SOURCE,
    }
}

fn record_window(rec: &EpisodeRecord, gn: usize, sd: usize, ad: usize) -> Result<GatingInput> {
    let mut ts: Vec<Transition> = (0..rec.len().min(gn))
        .map(|t| Transition {
            state: rec.states[t].clone(),
            action: rec.actions[t].to_vec(),
            reward: rec.rewards[t],
        })
        .collect();
    while ts.len() < gn {
        ts.push(Transition {
            state: vec![0.0; sd],
            action: vec![0.0; ad],
            reward: 0.0,
        });
    }
    build_gating_input(&ts, gn)
}

/// Probes each `(task, seed)` episode for `gn` steps with the unmasked
/// shared parameters and classifies the resulting window.
pub fn identify_batch(
    policy: &DtModel,
    theta: &ParamVector,
    gating: &GatingModel,
    episodes: &[(TaskSpec, u64)],
    target: TargetReturn,
) -> Result<Vec<Identification>> {
    let gn = gating.shape.gn;
    let (sd, ad) = (gating.shape.state_dim, gating.shape.action_dim);
    if policy.config.state_dim != sd || policy.config.action_dim != ad {
        return Err(Error::config("gating model and policy disagree on dimensions"));
    }
    let prompt = probe_prompt(policy);
    let request = |task: &TaskSpec, seed: u64| RolloutRequest {
        task: task.clone(),
        prompt: prompt.clone(),
        target,
        seed,
    };
    let reqs: Vec<RolloutRequest> = episodes.iter().map(|(t, s)| request(t, *s)).collect();
    let mut records = rollout_batch(policy, theta, &reqs, gn)?;
    let mut padded = vec![false; records.len()];
    for (i, (task, seed)) in episodes.iter().enumerate() {
        if records[i].len() < gn {
            let retry = rollout_batch(policy, theta, &[request(task, seed.wrapping_add(1))], gn)?.remove(0);
            padded[i] = retry.len() < gn;
            records[i] = retry;
        }
    }
    let inputs = records
        .iter()
        .map(|r| record_window(r, gn, sd, ad))
        .collect::<Result<Vec<_>>>()?;
    let logits = gating.logits_batch(&inputs)?;
    Ok(records
        .into_iter()
        .zip(logits)
        .zip(padded)
        .map(|((probe, logits), padded)| Identification {
            group: argmax(&logits),
            logits,
            padded,
            probe,
        })
        .collect())
}

pub fn rollout_and_identify(
    policy: &DtModel,
    theta: &ParamVector,
    gating: &GatingModel,
    task: &TaskSpec,
    target: TargetReturn,
    seed: u64,
) -> Result<Identification> {
    Ok(identify_batch(policy, theta, gating, &[(task.clone(), seed)], target)?.remove(0))
}
