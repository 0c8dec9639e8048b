//! Builds a voted mask for held-out Dir-8 directions at several thresholds.

use harmodt::harmony::vote_unseen_mask;
use harmodt::harness::{evaluate, generate_suite, train, Algo, Protocol, RunConfig};

fn main() -> harmodt::Result<()> {
    let cfg = RunConfig {
        suite: "dir-8".into(),
        n_traj: 30,
        embed: 16,
        context: 5,
        prompt_len: 2,
        batch_size: 16,
        iterations: 2000,
        mask_interval: 250,
        warmup: 500,
        lr: 1e-3,
        ..RunConfig::default()
    };
    let data = generate_suite(&cfg)?;
    let run = train(&cfg, Algo::Harmodt, 0, &data)?;
    let masks = run.masks.masks().to_vec();
    for thresh in 0..masks.len() {
        let v = vote_unseen_mask(&masks, thresh)?;
        println!("thresh {thresh}: {} of {} coordinates active", v.popcount(), v.len());
    }
    let baseline = train(&cfg, Algo::Mtdt, 0, &data)?;
    for r in [&baseline, &run] {
        let report = evaluate(r, &data, Protocol::Unseen, 10, &[0])?;
        let per_task: Vec<String> = report
            .tasks
            .iter()
            .map(|t| format!("task {} {:.2}", t.task_id, t.mean_return))
            .collect();
        println!("{:<8} unseen: {}", r.algo, per_task.join(", "));
    }
    Ok(())
}
