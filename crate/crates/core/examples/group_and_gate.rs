//! Clusters Dir-8 training tasks into groups, trains the gating classifier
//! and evaluates without task identity.

use harmodt::harness::{evaluate, generate_suite, train, Algo, MaskSet, Protocol, RunConfig};

fn main() -> harmodt::Result<()> {
    let mut cfg = RunConfig {
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
        gating_epochs: 10,
        gating_windows: 256,
        ..RunConfig::default()
    };
    let data = generate_suite(&cfg)?;
    for g in [2, 6] {
        cfg.n_groups = g;
        let run = train(&cfg, Algo::Gharmodt, 0, &data)?;
        if let MaskSet::Group { assignment, .. } = &run.masks {
            println!("N^G = {g}: tasks {:?} -> groups {:?}", run.task_ids, assignment.groups);
        }
        let gate = run.gating_report.as_ref().expect("grouped runs train a gate");
        println!("  gating held-out accuracy {:.3}", gate.heldout_accuracy);
        let report = evaluate(&run, &data, Protocol::Agnostic, 10, &[0])?;
        println!(
            "  agnostic return {:.2}, identification {:.3}",
            report.mean_return,
            report.identification_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
