use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Algo, Protocol};
use super::train::{stream_seed, MaskSet, Stream, TrainedRun};
use crate::error::{Error, Result};
use crate::gating::{identify_batch, probe_prompt};
use crate::harmony::{vote_unseen_mask, BitMask};
use crate::policy::{rollout_batch, EpisodeRecord, RolloutRequest, TargetReturn, TaskData};
use crate::taskenv::{OfflineDataset, Suite, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub std_return: f64,
    /// Share of episodes routed to the task's own group (task-agnostic only).
    pub identification_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub algo: Algo,
    pub protocol: Protocol,
    pub eval_seeds: Vec<u64>,
    pub episodes_per_task: usize,
    pub tasks: Vec<TaskEval>,
    /// Mean and population std over every episode of every task and seed.
    pub mean_success: f64,
    pub std_success: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub identification_accuracy: Option<f64>,
    /// Probes that ended early twice and were classified on a padded window.
    pub padded_probes: usize,
    pub warnings: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e4b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Start-state and goal seed of one evaluation episode.
pub fn episode_seed(eval_seed: u64, task_id: usize, episode: usize) -> u64 {
    splitmix(splitmix(splitmix(eval_seed) ^ task_id as u64) ^ episode as u64)
}

struct Episode {
    task_id: usize,
    record: EpisodeRecord,
    identified: Option<bool>,
}

fn local_index(run: &TrainedRun, task_id: usize) -> Result<usize> {
    run.task_ids
        .iter()
        .position(|&t| t == task_id)
        .ok_or_else(|| Error::config(format!("task {task_id} is not a training task of this run")))
}

fn masked_theta(run: &TrainedRun, mask: Option<&BitMask>) -> Result<crate::grad::ParamVector> {
    match mask {
        Some(m) => run.theta.masked(m.as_slice()),
        None => Ok(run.theta.clone()),
    }
}

fn dataset_for(datasets: &[OfflineDataset], task_id: usize) -> Result<&OfflineDataset> {
    datasets
        .iter()
        .find(|d| d.task_id == task_id)
        .ok_or_else(|| Error::config(format!("no dataset for task {task_id}")))
}

/// Rolls out every task in `task_ids` under a known mask, with prompts and
/// targets taken from that task's data.
fn known_mask_episodes(
    run: &TrainedRun,
    suite: &Suite,
    datasets: &[OfflineDataset],
    task_ids: &[usize],
    mask_of: &dyn Fn(usize) -> Result<Option<BitMask>>,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<Episode>> {
    let k = run.model.config.prompt_len;
    let mut out = Vec::new();
    for &task_id in task_ids {
        let task = &suite.tasks[task_id];
        let ds = dataset_for(datasets, task_id)?;
        let target = TargetReturn::new(ds.target_return())?;
        let data = TaskData::new(ds.clone())?;
        let effective = masked_theta(run, mask_of(task_id)?.as_ref())?;
        let mut requests = Vec::with_capacity(episodes * seeds.len());
        for &s in seeds {
            let mut prng = ChaCha8Rng::seed_from_u64(stream_seed(episode_seed(s, task_id, usize::MAX), Stream::Eval));
            for e in 0..episodes {
                requests.push(RolloutRequest {
                    task: task.clone(),
                    prompt: data.sample_prompt(k, &mut prng),
                    target,
                    seed: episode_seed(s, task_id, e),
                });
            }
        }
        for record in rollout_batch(&run.model, &effective, &requests, task.horizon)? {
            out.push(Episode {
                task_id,
                record,
                identified: None,
            });
        }
    }
    Ok(out)
}

/// Probes each episode, routes it to a group and rolls it out under that
/// group's mask, prompted by a demonstration from one of the group's member
/// tasks. The true task id only selects the environment and scores the
/// routing afterwards.
fn agnostic_episodes(
    run: &TrainedRun,
    suite: &Suite,
    datasets: &[OfflineDataset],
    episodes: usize,
    seeds: &[u64],
) -> Result<(Vec<Episode>, usize)> {
    let suite_target = run.targets.iter().sum::<f64>() / run.targets.len() as f64;
    let probe_target = TargetReturn::new(suite_target)?;
    let mut specs: Vec<(TaskSpec, u64)> = Vec::new();
    for &task_id in &run.task_ids {
        for &s in seeds {
            for e in 0..episodes {
                specs.push((suite.tasks[task_id].clone(), episode_seed(s, task_id, e)));
            }
        }
    }
    let data_of = |locals: &[usize]| -> Result<Vec<TaskData>> {
        locals
            .iter()
            .map(|&l| TaskData::new(dataset_for(datasets, run.task_ids[l])?.clone()))
            .collect()
    };
    let (probes, group_targets, group_data, truth, padded) = match &run.masks {
        MaskSet::Group { assignment, .. } => {
            let gating = run
                .gating
                .as_ref()
                .ok_or_else(|| Error::config("task-agnostic evaluation needs a gating model"))?;
            let ids = identify_batch(&run.model, &run.theta, gating, &specs, probe_target)?;
            let padded = ids.iter().filter(|i| i.padded).count();
            let targets = (0..assignment.n_groups)
                .map(|j| {
                    let m = assignment.members(j)?;
                    Ok(m.iter().map(|&i| run.targets[i]).sum::<f64>() / m.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            let group_data = (0..assignment.n_groups)
                .map(|j| data_of(&assignment.members(j)?))
                .collect::<Result<Vec<_>>>()?;
            let mut truth = Vec::with_capacity(specs.len());
            for local in 0..run.task_ids.len() {
                truth.extend(std::iter::repeat(assignment.group_of(local)).take(episodes * seeds.len()));
            }
            let probes: Vec<(usize, EpisodeRecord)> = ids.into_iter().map(|i| (i.group, i.probe)).collect();
            (probes, targets, group_data, Some(truth), padded)
        }
        MaskSet::None => {
            let reqs: Vec<RolloutRequest> = specs
                .iter()
                .map(|(t, s)| RolloutRequest {
                    task: t.clone(),
                    prompt: probe_prompt(&run.model),
                    target: probe_target,
                    seed: *s,
                })
                .collect();
            let probes = rollout_batch(&run.model, &run.theta, &reqs, run.config.gn)?;
            let all: Vec<usize> = (0..run.task_ids.len()).collect();
            (
                probes.into_iter().map(|p| (0, p)).collect(),
                vec![suite_target],
                vec![data_of(&all)?],
                None,
                0,
            )
        }
        MaskSet::Task(_) => {
            return Err(Error::config(
                "task-agnostic evaluation of per-task masks needs a gating model; train gharmodt with n_groups equal to the task count",
            ))
        }
    };
    let eps = route(run, &specs, probes, &group_targets, &group_data, truth)?;
    Ok((eps, padded))
}

fn route(
    run: &TrainedRun,
    specs: &[(TaskSpec, u64)],
    probes: Vec<(usize, EpisodeRecord)>,
    group_targets: &[f64],
    group_data: &[Vec<TaskData>],
    truth: Option<Vec<usize>>,
) -> Result<Vec<Episode>> {
    let k = run.model.config.prompt_len;
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); group_targets.len()];
    for (i, (g, _)) in probes.iter().enumerate() {
        by_group[*g].push(i);
    }
    let mut records: Vec<Option<EpisodeRecord>> = vec![None; specs.len()];
    for (g, idx) in by_group.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mask = match &run.masks {
            MaskSet::Group { masks, .. } => Some(&masks[g]),
            _ => None,
        };
        let effective = masked_theta(run, mask)?;
        let target = TargetReturn::new(group_targets[g])?;
        let reqs = idx
            .iter()
            .map(|&i| {
                let mut prng = ChaCha8Rng::seed_from_u64(stream_seed(specs[i].1, Stream::Eval));
                let members = &group_data[g];
                let source = &members[prng.gen_range(0..members.len())];
                RolloutRequest {
                    task: specs[i].0.clone(),
                    prompt: source.sample_prompt(k, &mut prng),
                    target,
                    seed: specs[i].1,
                }
            })
            .collect::<Vec<_>>();
        let horizon = specs[idx[0]].0.horizon;
        for (&i, rec) in idx.iter().zip(rollout_batch(&run.model, &effective, &reqs, horizon)?) {
            records[i] = Some(rec);
        }
    }
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Episode {
            task_id: specs[i].0.task_id,
            record: r.expect("every episode routed to a group"),
            identified: truth.as_ref().map(|t| t[i] == probes[i].0),
        })
        .collect())
}

/// Runs one evaluation protocol on a trained run. `datasets` covers every
/// task of the suite and supplies prompts and targets.
pub fn evaluate(
    run: &TrainedRun,
    datasets: &[OfflineDataset],
    protocol: Protocol,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::config("evaluation needs at least one episode and one seed"));
    }
    let suite = run.config.suite()?;
    let mut warnings = Vec::new();
    let mut padded = 0;
    let eps = match protocol {
        Protocol::Provided => {
            let mask_of = |task_id: usize| -> Result<Option<BitMask>> {
                let local = local_index(run, task_id)?;
                Ok(run.masks.for_task(local).cloned())
            };
            known_mask_episodes(run, &suite, datasets, &run.task_ids, &mask_of, episodes, seeds)?
        }
        Protocol::Agnostic => {
            let (e, p) = agnostic_episodes(run, &suite, datasets, episodes, seeds)?;
            padded = p;
            e
        }
        Protocol::Unseen => {
            if suite.held_out.is_empty() {
                return Err(Error::config(format!("suite {} has no held-out tasks", suite.name)));
            }
            let voted = match &run.masks {
                MaskSet::None => None,
                masks => {
                    let per_task: Vec<BitMask> = (0..run.task_ids.len())
                        .map(|i| masks.for_task(i).expect("masked run").clone())
                        .collect();
                    let v = vote_unseen_mask(&per_task, run.config.thresh)?;
                    if v.popcount() == 0 {
                        warnings.push(format!(
                            "voted mask is all zero at thresh {} over {} masks; the policy is degenerate",
                            run.config.thresh,
                            per_task.len()
                        ));
                    }
                    Some(v)
                }
            };
            let mask_of = |_: usize| -> Result<Option<BitMask>> { Ok(voted.clone()) };
            known_mask_episodes(run, &suite, datasets, &suite.held_out, &mask_of, episodes, seeds)?
        }
    };
    let mut task_order: Vec<usize> = eps.iter().map(|e| e.task_id).collect();
    task_order.dedup();
    let tasks: Vec<TaskEval> = task_order
        .iter()
        .map(|&t| {
            let mine: Vec<&Episode> = eps.iter().filter(|e| e.task_id == t).collect();
            let returns: Vec<f64> = mine.iter().map(|e| e.record.episode_return()).collect();
            let (mean_return, std_return) = mean_std(&returns);
            let ident: Vec<bool> = mine.iter().filter_map(|e| e.identified).collect();
            TaskEval {
                task_id: t,
                episodes: mine.len(),
                success_rate: mine.iter().filter(|e| e.record.success).count() as f64 / mine.len() as f64,
                mean_return,
                std_return,
                identification_accuracy: (!ident.is_empty())
                    .then(|| ident.iter().filter(|&&b| b).count() as f64 / ident.len() as f64),
            }
        })
        .collect();
    let succ: Vec<f64> = eps.iter().map(|e| e.record.success as u8 as f64).collect();
    let rets: Vec<f64> = eps.iter().map(|e| e.record.episode_return()).collect();
    let ident: Vec<bool> = eps.iter().filter_map(|e| e.identified).collect();
    let (mean_success, std_success) = mean_std(&succ);
    let (mean_return, std_return) = mean_std(&rets);
    if padded > 0 {
        warnings.push(format!("{padded} probes ended early and were classified on padded windows"));
    }
    Ok(EvalReport {
        run: run.name(),
        algo: run.algo,
        protocol,
        eval_seeds: seeds.to_vec(),
        episodes_per_task: episodes * seeds.len(),
        tasks,
        mean_success,
        std_success,
        mean_return,
        std_return,
        identification_accuracy: (!ident.is_empty())
            .then(|| ident.iter().filter(|&&b| b).count() as f64 / ident.len() as f64),
        padded_probes: padded,
        warnings,
    })
}
