//! One scoring round by hand: ERK masks, per-task gradients, then a mask
//! update that removes and recovers the same number of coordinates.

use harmodt::harmony::{averaged_harmony, collect_round, erk_init, mask_update, FlipSchedule, ImportanceKind, Owner};
use harmodt::harness::{generate_suite, DtObjective, RunConfig};
use harmodt::policy::{DtModel, TaskData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> harmodt::Result<()> {
    let cfg = RunConfig {
        n_traj: 10,
        embed: 8,
        context: 3,
        prompt_len: 2,
        ..RunConfig::default()
    };
    let model = DtModel::new(cfg.dt_config())?;
    let tasks = generate_suite(&cfg)?
        .into_iter()
        .take(4)
        .map(TaskData::new)
        .collect::<harmodt::Result<Vec<_>>>()?;
    let params = model.init_params(0);
    let masks = (0..tasks.len())
        .map(|i| erk_init(model.layout(), cfg.sparsity, i as u64, Owner::Task(i)).map(|(_, m)| m))
        .collect::<harmodt::Result<Vec<_>>>()?;
    println!("{} parameters, {} active per mask", params.len(), masks[0].popcount());

    let mut objective = DtObjective::new(&model, &tasks, 8);
    objective.refresh(&mut ChaCha8Rng::seed_from_u64(0))?;
    let views: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
    let round = collect_round(&mut objective, &params, &views)?;
    println!("averaged harmony {:.4}", averaged_harmony(&round.masked)?.score);

    let schedule = FlipSchedule::new(0, 100, 4000, 500, masks[0].popcount())?;
    for t in [0, 1000, 2000] {
        let alpha = schedule.alpha(t);
        let updates = mask_update(&round, &masks, &params, alpha, cfg.lambda, ImportanceKind::Fisher)?;
        for (i, u) in updates.iter().enumerate() {
            let changed = u.mask.bits.iter().zip(&masks[i].bits).filter(|(a, b)| a != b).count();
            println!(
                "t={t:<5} alpha={alpha:<3} task {i}: removed {:>3} added {:>3} changed {:>3} popcount {}",
                u.stats.removed.len(),
                u.stats.added.len(),
                changed,
                u.mask.popcount()
            );
        }
    }
    Ok(())
}
