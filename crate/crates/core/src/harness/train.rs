use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Algo, RunConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::gating::{train_gating, GatingModel, GatingReport, GatingTrainConfig};
use crate::grad::{load_checkpoint, save_checkpoint, Checkpoint, GradVector, MaskedAdam, ParamVector};
use crate::grouping::{group_mask_update, init_group_masks, warmup_and_cluster, GroupAssignment};
use crate::harmony::{
    active_count, averaged_harmony, collect_round, erk_init, mask_update, BitMask, FlipSchedule, Owner,
    OwnerUpdate, RoundGradients, TaskObjective,
};
use crate::policy::{DtModel, TaskData, TrajectoryBatch};
use crate::taskenv::{generate_dataset, load_suite_datasets, OfflineDataset, Suite};

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Init = 1,
    Erk = 2,
    Sample = 3,
    Dropout = 4,
    Round = 5,
    Cluster = 6,
    Gating = 7,
    Eval = 8,
}

pub(crate) fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

pub(crate) fn stream_seed(seed: u64, s: Stream) -> u64 {
    stream(seed, s).gen()
}

/// Per-task DT loss on a batch drawn once per scoring round.
pub struct DtObjective<'a> {
    model: &'a DtModel,
    tasks: &'a [TaskData],
    batch_size: usize,
    batches: Vec<TrajectoryBatch>,
    ones: Vec<bool>,
}

impl<'a> DtObjective<'a> {
    pub fn new(model: &'a DtModel, tasks: &'a [TaskData], batch_size: usize) -> Self {
        Self {
            model,
            tasks,
            batch_size,
            batches: Vec::new(),
            ones: vec![true; model.num_params()],
        }
    }

    /// Draws a fresh batch for every task.
    pub fn refresh<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        self.batches = self
            .tasks
            .iter()
            .map(|t| t.sample_batch(&self.model.config, self.batch_size, rng))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

impl TaskObjective for DtObjective<'_> {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn loss_and_grad(&mut self, task: usize, params: &ParamVector) -> Result<(f64, GradVector)> {
        let batch = self
            .batches
            .get(task)
            .ok_or_else(|| Error::State("objective batches not drawn".into()))?;
        self.model.loss_and_grad(params, &self.ones, batch, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Train,
}

/// Metrics for one logging interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: usize,
    pub phase: Phase,
    /// Iteration at which the interval starts.
    pub iteration: u64,
    pub steps: u64,
    pub mask_updated: bool,
    pub alpha: usize,
    /// Averaged harmony of the masked gradients at the interval start.
    pub averaged_harmony: f64,
    pub harmony_pairs: usize,
    /// Mean training loss per training task over the interval.
    pub task_loss: Vec<Option<f64>>,
    /// Popcount of every mask after the update.
    pub popcounts: Vec<usize>,
    pub removed: Vec<usize>,
    pub added: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<IntervalRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: IntervalRecord) {
        self.records.push(r);
    }

    pub fn mask_updates(&self) -> usize {
        self.records.iter().filter(|r| r.mask_updated).count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::data_at(path, Some(at), format!("malformed metrics record: {e}")))?,
            );
        }
        Ok(Self { records })
    }
}

/// Masks a run trains under.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSet {
    None,
    Task(Vec<BitMask>),
    Group {
        assignment: GroupAssignment,
        masks: Vec<BitMask>,
    },
}

impl MaskSet {
    /// Mask applied to training task `local`, `None` meaning all ones.
    pub fn for_task(&self, local: usize) -> Option<&BitMask> {
        match self {
            MaskSet::None => None,
            MaskSet::Task(m) => Some(&m[local]),
            MaskSet::Group { assignment, masks } => Some(&masks[assignment.group_of(local)]),
        }
    }

    pub fn masks(&self) -> &[BitMask] {
        match self {
            MaskSet::None => &[],
            MaskSet::Task(m) => m,
            MaskSet::Group { masks, .. } => masks,
        }
    }
}

/// Everything a finished (or loaded) run holds.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub algo: Algo,
    pub config: RunConfig,
    pub seed: u64,
    /// Suite task id of each training task, indexed by local task index.
    pub task_ids: Vec<usize>,
    pub model: DtModel,
    pub theta: ParamVector,
    pub masks: MaskSet,
    pub gating: Option<GatingModel>,
    pub gating_report: Option<GatingReport>,
    pub log: MetricsLog,
    /// Conditioning target per training task.
    pub targets: Vec<f64>,
    /// Only present for runs trained in this process.
    pub init_theta: Option<ParamVector>,
    /// Coordinates active in some mask at some point of the run.
    pub ever_active: Option<Vec<bool>>,
}

impl TrainedRun {
    pub fn updates(&self) -> usize {
        self.log.mask_updates()
    }

    pub fn name(&self) -> String {
        run_name(self.algo, &self.config, self.seed)
    }
}

pub fn run_name(algo: Algo, cfg: &RunConfig, seed: u64) -> String {
    match algo {
        Algo::Gharmodt => format!("{algo}-g{}-s{seed}", cfg.n_groups),
        _ => format!("{algo}-s{seed}"),
    }
}

/// Datasets for every task of the configured suite, generated in memory.
pub fn generate_suite(cfg: &RunConfig) -> Result<Vec<OfflineDataset>> {
    let suite = cfg.suite()?;
    suite
        .tasks
        .iter()
        .map(|t| generate_dataset(t, cfg.quality, cfg.n_traj, cfg.data_seed))
        .collect()
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<OfflineDataset>> {
    let suite = cfg.suite()?;
    let data = load_suite_datasets(&cfg.data_dir, &suite)?;
    if let Some(d) = data.iter().find(|d| d.quality != cfg.quality) {
        return Err(Error::config(format!(
            "dataset for task {} is {}, config asks for {}",
            d.task_id,
            d.quality.as_str(),
            cfg.quality.as_str()
        )));
    }
    Ok(data)
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: &'a DtModel,
    tasks: &'a [TaskData],
    theta: ParamVector,
    adam: MaskedAdam,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    round_rng: ChaCha8Rng,
    ones: Vec<bool>,
    ever_active: Vec<bool>,
    log: MetricsLog,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, model: &'a DtModel, tasks: &'a [TaskData], seed: u64) -> Self {
        let theta = model.init_params(stream_seed(seed, Stream::Init));
        let n = theta.len();
        Self {
            cfg,
            model,
            tasks,
            theta,
            adam: MaskedAdam::new(n, cfg.lr),
            sample_rng: stream(seed, Stream::Sample),
            dropout_rng: stream(seed, Stream::Dropout),
            round_rng: stream(seed, Stream::Round),
            ones: vec![true; n],
            ever_active: vec![false; n],
            log: MetricsLog::default(),
            iteration: 0,
        }
    }

    fn mark_active(&mut self, masks: &MaskSet) {
        match masks {
            MaskSet::None => self.ever_active.iter_mut().for_each(|b| *b = true),
            _ => {
                for m in masks.masks() {
                    for (a, &b) in self.ever_active.iter_mut().zip(&m.bits) {
                        *a |= b;
                    }
                }
            }
        }
    }

    fn round(&mut self, masks: &MaskSet) -> Result<RoundGradients> {
        let mut obj = DtObjective::new(self.model, self.tasks, self.cfg.batch_size);
        obj.refresh(&mut self.round_rng)?;
        let per_task: Vec<&[bool]> = (0..self.tasks.len())
            .map(|i| masks.for_task(i).map_or(self.ones.as_slice(), |m| m.as_slice()))
            .collect();
        collect_round(&mut obj, &self.theta, &per_task)
    }

    /// `n` optimizer steps on uniformly sampled tasks.
    fn steps(&mut self, n: u64, masks: &MaskSet) -> Result<Vec<Option<f64>>> {
        self.mark_active(masks);
        let k = self.tasks.len();
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for _ in 0..n {
            let task = self.sample_rng.gen_range(0..k);
            let batch = self.tasks[task].sample_batch(&self.model.config, self.cfg.batch_size, &mut self.sample_rng)?;
            let mask = masks.for_task(task).map_or(self.ones.as_slice(), |m| m.as_slice());
            let dropout_seed: u64 = self.dropout_rng.gen();
            let (loss, grad) = self.model.loss_and_grad(&self.theta, mask, &batch, Some(dropout_seed))?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Run(format!(
                    "non-finite loss or gradient at iteration {} on task {}",
                    self.iteration,
                    self.tasks[task].task_id()
                )));
            }
            self.adam.step(&mut self.theta, &grad, mask)?;
            sum[task] += loss;
            count[task] += 1;
            self.iteration += 1;
        }
        Ok(sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect())
    }

    /// One logging interval: score, optionally update masks, then train.
    fn interval(
        &mut self,
        phase: Phase,
        masks: &mut MaskSet,
        steps: u64,
        update: Option<&dyn Fn(&RoundGradients, &MaskSet, &ParamVector, u64) -> Result<(usize, Vec<OwnerUpdate>)>>,
    ) -> Result<()> {
        let start = self.iteration;
        let round = self.round(masks)?;
        let h = averaged_harmony(&round.masked)?;
        let mut record = IntervalRecord {
            interval: self.log.records.len(),
            phase,
            iteration: start,
            steps,
            mask_updated: false,
            alpha: 0,
            averaged_harmony: h.score,
            harmony_pairs: h.pairs,
            task_loss: Vec::new(),
            popcounts: Vec::new(),
            removed: Vec::new(),
            added: Vec::new(),
        };
        if let Some(f) = update {
            let (alpha, ups) = f(&round, masks, &self.theta, start)?;
            record.mask_updated = true;
            record.alpha = alpha;
            record.removed = ups.iter().map(|u| u.stats.removed.len()).collect();
            record.added = ups.iter().map(|u| u.stats.added.len()).collect();
            let next: Vec<BitMask> = ups.into_iter().map(|u| u.mask).collect();
            match masks {
                MaskSet::Task(m) => *m = next,
                MaskSet::Group { masks: m, .. } => *m = next,
                MaskSet::None => return Err(Error::State("mask update without masks".into())),
            }
        }
        record.popcounts = masks.masks().iter().map(BitMask::popcount).collect();
        record.task_loss = self.steps(steps, masks)?;
        self.log.push(record);
        Ok(())
    }

    /// Intervals of `t_m` steps covering `[from, to)`. Every full interval
    /// starts with `update`; a shorter trailing interval trains only.
    fn blocks(
        &mut self,
        phase: Phase,
        masks: &mut MaskSet,
        to: u64,
        update: Option<&dyn Fn(&RoundGradients, &MaskSet, &ParamVector, u64) -> Result<(usize, Vec<OwnerUpdate>)>>,
    ) -> Result<()> {
        let tm = self.cfg.mask_interval;
        while self.iteration + tm <= to {
            self.interval(phase, masks, tm, update)?;
        }
        if self.iteration < to {
            let rest = to - self.iteration;
            self.interval(phase, masks, rest, None)?;
        }
        Ok(())
    }
}

fn training_data(suite: &Suite, datasets: &[OfflineDataset]) -> Result<(Vec<usize>, Vec<TaskData>, Vec<f64>)> {
    let ids = suite.training_tasks();
    let mut tasks = Vec::with_capacity(ids.len());
    let mut targets = Vec::with_capacity(ids.len());
    for &id in &ids {
        let ds = datasets
            .iter()
            .find(|d| d.task_id == id)
            .ok_or_else(|| Error::config(format!("no dataset for training task {id}")))?;
        targets.push(ds.target_return());
        tasks.push(TaskData::new(ds.clone())?);
    }
    Ok((ids, tasks, targets))
}

/// Trains one run of `algo` with `seed` on the given datasets.
pub fn train(cfg: &RunConfig, algo: Algo, seed: u64, datasets: &[OfflineDataset]) -> Result<TrainedRun> {
    cfg.validate()?;
    let suite = cfg.suite()?;
    let model = DtModel::new(cfg.dt_config())?;
    cfg.validate_for(model.num_params())?;
    let (task_ids, tasks, targets) = training_data(&suite, datasets)?;
    let mut tr = Trainer::new(cfg, &model, &tasks, seed);
    let init_theta = tr.theta.clone();
    let len = model.num_params();
    let schedule = FlipSchedule::new(
        cfg.eta_min,
        cfg.eta_max,
        cfg.iterations,
        cfg.mask_interval,
        active_count(len, cfg.sparsity),
    )?;
    let lambda = cfg.lambda;
    let importance = cfg.importance;
    let mut gating = None;
    let mut gating_report = None;
    let masks = match algo {
        Algo::Mtdt => {
            let mut masks = MaskSet::None;
            tr.blocks(Phase::Train, &mut masks, cfg.iterations, None)?;
            masks
        }
        Algo::Harmodt => {
            let erk_seed = stream_seed(seed, Stream::Erk);
            let init = task_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    erk_init(model.layout(), cfg.sparsity, erk_seed.wrapping_add(i as u64), Owner::Task(id))
                        .map(|(_, m)| m)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut masks = MaskSet::Task(init);
            let update = |round: &RoundGradients, masks: &MaskSet, theta: &ParamVector, t: u64| {
                let alpha = schedule.alpha(t);
                let ups = mask_update(round, masks.masks(), theta, alpha, lambda, importance)?;
                Ok((alpha, ups))
            };
            tr.blocks(Phase::Train, &mut masks, cfg.iterations, Some(&update))?;
            masks
        }
        Algo::Gharmodt => {
            let mut none = MaskSet::None;
            tr.blocks(Phase::Warmup, &mut none, cfg.warmup, None)?;
            let mut obj = DtObjective::new(&model, &tasks, cfg.batch_size);
            obj.refresh(&mut tr.round_rng)?;
            let (assignment, matrix) =
                warmup_and_cluster(&mut obj, &tr.theta, cfg.n_groups, lambda, stream_seed(seed, Stream::Cluster))?;
            let init = init_group_masks(&assignment, &matrix, cfg.sparsity)?;
            let mut masks = MaskSet::Group {
                assignment: assignment.clone(),
                masks: init,
            };
            let update = |round: &RoundGradients, masks: &MaskSet, _: &ParamVector, t: u64| {
                let alpha = schedule.alpha(t);
                let MaskSet::Group { assignment, masks } = masks else {
                    return Err(Error::State("group update without group masks".into()));
                };
                Ok((alpha, group_mask_update(round, assignment, masks, alpha, lambda)?))
            };
            tr.blocks(Phase::Train, &mut masks, cfg.iterations, Some(&update))?;
            let local: Vec<OfflineDataset> = tasks
                .iter()
                .enumerate()
                .map(|(i, t)| OfflineDataset {
                    task_id: i,
                    ..t.dataset.clone()
                })
                .collect();
            let gcfg = GatingTrainConfig {
                gn: cfg.gn,
                epochs: cfg.gating_epochs,
                windows_per_epoch: cfg.gating_windows,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                seed: stream_seed(seed, Stream::Gating),
            };
            let (g, report) = train_gating(&local, &assignment, &gcfg)?;
            gating = Some(g);
            gating_report = Some(report);
            masks
        }
    };
    let Trainer {
        theta, log, ever_active, ..
    } = tr;
    Ok(TrainedRun {
        algo,
        config: cfg.clone(),
        seed,
        task_ids,
        model,
        theta,
        masks,
        gating,
        gating_report,
        log,
        targets,
        init_theta: Some(init_theta),
        ever_active: Some(ever_active),
    })
}

/// Summary written next to a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algo: Algo,
    pub suite: String,
    pub seed: u64,
    pub n_groups: Option<usize>,
    pub iterations: u64,
    pub mask_updates: usize,
    pub task_ids: Vec<usize>,
    pub targets: Vec<f64>,
    pub num_params: usize,
    pub gating: Option<GatingReport>,
    pub complete: bool,
}

pub const RUN_FILE: &str = "run.json";
const MODEL_FILE: &str = "model.ckpt";
const GATING_FILE: &str = "gating.ckpt";
const GROUPS_FILE: &str = "groups.json";
const METRICS_FILE: &str = "metrics.jsonl";
const CONFIG_FILE: &str = "config.txt";

fn mask_file(dir: &Path, owner: Owner) -> PathBuf {
    let name = match owner {
        Owner::Task(i) => format!("task-{i}.mask"),
        Owner::Group(j) => format!("group-{j}.mask"),
        Owner::Unseen => "unseen.mask".into(),
    };
    dir.join("masks").join(name)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fsutil::write_atomic(path, s.as_bytes())
}

/// Marks `dir` as holding an unfinished run.
pub fn mark_started(dir: &Path, algo: Algo, cfg: &RunConfig, seed: u64) -> Result<()> {
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_json(
        &dir.join(RUN_FILE),
        &RunSummary {
            name: run_name(algo, cfg, seed),
            algo,
            suite: cfg.suite.clone(),
            seed,
            n_groups: (algo == Algo::Gharmodt).then_some(cfg.n_groups),
            iterations: cfg.iterations,
            mask_updates: 0,
            task_ids: Vec::new(),
            targets: Vec::new(),
            num_params: 0,
            gating: None,
            complete: false,
        },
    )
}

impl TrainedRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            name: self.name(),
            algo: self.algo,
            suite: self.config.suite.clone(),
            seed: self.seed,
            n_groups: match &self.masks {
                MaskSet::Group { assignment, .. } => Some(assignment.n_groups),
                _ => None,
            },
            iterations: self.config.iterations,
            mask_updates: self.updates(),
            task_ids: self.task_ids.clone(),
            targets: self.targets.clone(),
            num_params: self.theta.len(),
            gating: self.gating_report.clone(),
            complete: true,
        }
    }

    /// Writes every artifact; `run.json` goes last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.config.save(&dir.join(CONFIG_FILE))?;
        let mut extra = BTreeMap::new();
        extra.insert("algo".into(), self.algo.to_string());
        extra.insert("seed".into(), self.seed.to_string());
        save_checkpoint(
            &dir.join(MODEL_FILE),
            &Checkpoint {
                params: self.theta.clone(),
                extra,
            },
        )?;
        for m in self.masks.masks() {
            m.save(&mask_file(dir, m.owner), self.config.sparsity)?;
        }
        if let MaskSet::Group { assignment, .. } = &self.masks {
            assignment.save(&dir.join(GROUPS_FILE))?;
        }
        if let Some(g) = &self.gating {
            g.save(&dir.join(GATING_FILE))?;
        }
        self.log.save(&dir.join(METRICS_FILE))?;
        write_json(&dir.join(RUN_FILE), &self.summary())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let summary = load_summary(dir)?;
        if !summary.complete {
            return Err(Error::State(format!("run in {} did not finish", dir.display())));
        }
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let model = DtModel::new(config.dt_config())?;
        let ckpt = load_checkpoint(&dir.join(MODEL_FILE))?;
        if ckpt.params.layout() != model.layout() {
            return Err(Error::data_at(dir.join(MODEL_FILE), None, "checkpoint layout does not match config"));
        }
        let load_mask = |owner: Owner| -> Result<BitMask> {
            let (m, _) = BitMask::load(&mask_file(dir, owner))?;
            if m.len() != model.num_params() || m.owner != owner {
                return Err(Error::data_at(mask_file(dir, owner), None, "mask does not match the run"));
            }
            Ok(m)
        };
        let masks = match summary.algo {
            Algo::Mtdt => MaskSet::None,
            Algo::Harmodt => MaskSet::Task(
                summary
                    .task_ids
                    .iter()
                    .map(|&i| load_mask(Owner::Task(i)))
                    .collect::<Result<_>>()?,
            ),
            Algo::Gharmodt => {
                let assignment = GroupAssignment::load(&dir.join(GROUPS_FILE))?;
                let masks = (0..assignment.n_groups)
                    .map(|j| load_mask(Owner::Group(j)))
                    .collect::<Result<_>>()?;
                MaskSet::Group { assignment, masks }
            }
        };
        let gating = match summary.algo {
            Algo::Gharmodt => Some(GatingModel::load(&dir.join(GATING_FILE))?),
            _ => None,
        };
        Ok(Self {
            algo: summary.algo,
            config,
            seed: summary.seed,
            task_ids: summary.task_ids,
            model,
            theta: ckpt.params,
            masks,
            gating,
            gating_report: summary.gating,
            log: MetricsLog::load(&dir.join(METRICS_FILE))?,
            targets: summary.targets,
            init_theta: None,
            ever_active: None,
        })
    }
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(RUN_FILE);
    let text = fsutil::read_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::data_at(&path, None, format!("malformed run summary: {e}")))
}
