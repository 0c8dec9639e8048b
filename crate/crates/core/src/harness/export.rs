use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Algo, Protocol};
use super::eval::EvalReport;
use super::train::{load_summary, IntervalRecord, MetricsLog, RunSummary, RUN_FILE};
use crate::error::{Error, Result};
use crate::fsutil;

pub const EXPORT_DIR: &str = "export";
pub const SUMMARY_HEADER: &str =
    "run,algo,suite,seed,n_groups,protocol,task,episodes,success_rate,mean_return,std_return,identification_accuracy";
pub const HARMONY_HEADER: &str =
    "run,algo,seed,n_groups,interval,phase,iteration,steps,alpha,averaged_harmony,mean_task_loss,min_popcount,flips";
pub const SWEEP_HEADER: &str = "n_groups,protocol,runs,mean_success,mean_return,mean_gating_accuracy";

const PROTOCOLS: [Protocol; 3] = [Protocol::Provided, Protocol::Agnostic, Protocol::Unseen];

pub fn eval_path(run_dir: &Path, protocol: Protocol) -> PathBuf {
    run_dir.join(format!("eval-{protocol}.json"))
}

pub fn save_eval(run_dir: &Path, report: &EvalReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    fsutil::write_atomic(&eval_path(run_dir, report.protocol), s.as_bytes())
}

pub fn load_eval(run_dir: &Path, protocol: Protocol) -> Result<Option<EvalReport>> {
    let p = eval_path(run_dir, protocol);
    if !p.exists() {
        return Ok(None);
    }
    let text = fsutil::read_string(&p)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::data_at(&p, None, format!("malformed evaluation report: {e}")))
}

/// Subdirectories of `results` that hold a run summary, sorted by name.
pub fn run_dirs(results: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(results).map_err(|e| Error::io(results, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(results, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(RUN_FILE).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRun {
    pub summary: RunSummary,
    pub evaluations: Vec<Protocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    /// False when a run is unfinished or a swept group count has no run.
    pub complete: bool,
    pub runs: Vec<ExportedRun>,
    pub incomplete_runs: Vec<String>,
    pub missing_group_counts: Vec<usize>,
    pub files: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn harmony_row(s: &RunSummary, r: &IntervalRecord) -> String {
    let losses: Vec<f64> = r.task_loss.iter().flatten().copied().collect();
    let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    let flips: usize = r.removed.iter().sum();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.name,
        s.algo,
        s.seed,
        opt_usize(s.n_groups),
        r.interval,
        match r.phase {
            super::train::Phase::Warmup => "warmup",
            super::train::Phase::Train => "train",
        },
        r.iteration,
        r.steps,
        r.alpha,
        r.averaged_harmony,
        opt(mean_loss),
        opt_usize(r.popcounts.iter().min().copied()),
        flips
    )
}

fn summary_rows(s: &RunSummary, e: &EvalReport, out: &mut String) {
    let prefix = format!(
        "{},{},{},{},{},{}",
        s.name,
        s.algo,
        s.suite,
        s.seed,
        opt_usize(s.n_groups),
        e.protocol
    );
    for t in &e.tasks {
        out.push_str(&format!(
            "{prefix},{},{},{},{},{},{}\n",
            t.task_id,
            t.episodes,
            t.success_rate,
            t.mean_return,
            t.std_return,
            opt(t.identification_accuracy)
        ));
    }
    let episodes: usize = e.tasks.iter().map(|t| t.episodes).sum();
    out.push_str(&format!(
        "{prefix},all,{episodes},{},{},{},{}\n",
        e.mean_success,
        e.mean_return,
        e.std_return,
        opt(e.identification_accuracy)
    ));
}

/// Writes `summary.csv`, `harmony_curve.csv`, `group_sweep.csv` and
/// `summary.json` under `<results>/export`.
pub fn export(results: &Path, group_sweep: &[usize]) -> Result<ExportSummary> {
    let mut summary_csv = format!("{SUMMARY_HEADER}\n");
    let mut harmony_csv = format!("{HARMONY_HEADER}\n");
    let mut runs = Vec::new();
    let mut incomplete = Vec::new();
    // (n_groups, protocol, success, return, gating accuracy)
    let mut sweep_points: Vec<(usize, Protocol, f64, f64, Option<f64>)> = Vec::new();
    for dir in run_dirs(results)? {
        let s = load_summary(&dir)?;
        if !s.complete {
            incomplete.push(s.name.clone());
            continue;
        }
        let log = MetricsLog::load(&dir.join("metrics.jsonl"))?;
        for r in &log.records {
            harmony_csv.push_str(&harmony_row(&s, r));
            harmony_csv.push('\n');
        }
        let mut evaluations = Vec::new();
        let mut sweep_eval = None;
        for p in PROTOCOLS {
            if let Some(e) = load_eval(&dir, p)? {
                summary_rows(&s, &e, &mut summary_csv);
                evaluations.push(p);
                if p != Protocol::Unseen && (sweep_eval.is_none() || p == Protocol::Agnostic) {
                    sweep_eval = Some(e);
                }
            }
        }
        if let (Algo::Gharmodt, Some(g), Some(e)) = (s.algo, s.n_groups, sweep_eval) {
            let acc = s.gating.as_ref().map(|r| r.heldout_accuracy);
            sweep_points.push((g, e.protocol, e.mean_success, e.mean_return, acc));
        }
        runs.push(ExportedRun { summary: s, evaluations });
    }
    let mut sweep_csv = format!("{SWEEP_HEADER}\n");
    let mut missing = Vec::new();
    let mut counts: Vec<usize> = group_sweep.to_vec();
    counts.sort_unstable();
    counts.dedup();
    for g in counts {
        let pts: Vec<_> = sweep_points.iter().filter(|p| p.0 == g).collect();
        let protocol = if pts.iter().any(|p| p.1 == Protocol::Agnostic) {
            Protocol::Agnostic
        } else {
            Protocol::Provided
        };
        let pts: Vec<_> = pts.into_iter().filter(|p| p.1 == protocol).collect();
        if pts.is_empty() {
            missing.push(g);
            sweep_csv.push_str(&format!("{g},,0,,,\n"));
            continue;
        }
        let n = pts.len() as f64;
        let accs: Vec<f64> = pts.iter().filter_map(|p| p.4).collect();
        sweep_csv.push_str(&format!(
            "{g},{protocol},{},{},{},{}\n",
            pts.len(),
            pts.iter().map(|p| p.2).sum::<f64>() / n,
            pts.iter().map(|p| p.3).sum::<f64>() / n,
            opt((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64))
        ));
    }
    let out = results.join(EXPORT_DIR);
    let files = ["summary.csv", "harmony_curve.csv", "group_sweep.csv", "summary.json"];
    fsutil::write_atomic(&out.join(files[0]), summary_csv.as_bytes())?;
    fsutil::write_atomic(&out.join(files[1]), harmony_csv.as_bytes())?;
    fsutil::write_atomic(&out.join(files[2]), sweep_csv.as_bytes())?;
    let summary = ExportSummary {
        complete: incomplete.is_empty() && missing.is_empty(),
        runs,
        incomplete_runs: incomplete,
        missing_group_counts: missing,
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fsutil::write_atomic(&out.join(files[3]), json.as_bytes())?;
    Ok(summary)
}
