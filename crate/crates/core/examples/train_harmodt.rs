//! Trains the no-mask baseline and HarmoDT on PointGoal-8 and compares
//! task-provided success.

use harmodt::harness::{evaluate, generate_suite, train, Algo, Protocol, RunConfig};

fn main() -> harmodt::Result<()> {
    let cfg = RunConfig {
        n_traj: 40,
        embed: 16,
        context: 5,
        prompt_len: 2,
        batch_size: 16,
        iterations: 3000,
        mask_interval: 250,
        warmup: 500,
        lr: 1e-3,
        ..RunConfig::default()
    };
    let data = generate_suite(&cfg)?;
    for algo in [Algo::Mtdt, Algo::Harmodt] {
        let run = train(&cfg, algo, 0, &data)?;
        let report = evaluate(&run, &data, Protocol::Provided, 20, &[0])?;
        let last = run.log.records.last().expect("at least one interval");
        println!(
            "{algo:<8} updates {:>3}  harmony {:.4}  success {:.3}  return {:.2}",
            run.updates(),
            last.averaged_harmony,
            report.mean_success,
            report.mean_return
        );
    }
    Ok(())
}
