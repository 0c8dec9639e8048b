//! Compares analytic gradients of the DT loss against central differences.

use harmodt::policy::{DtConfig, DtModel, TaskData};
use harmodt::taskenv::{generate_dataset, Quality, Suite};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> harmodt::Result<()> {
    let cfg = DtConfig {
        embed: 8,
        layers: 1,
        heads: 2,
        context: 3,
        prompt_len: 2,
        dropout: 0.0,
        ..DtConfig::default()
    };
    let model = DtModel::new(cfg)?;
    let suite = Suite::point_goal_8();
    let data = TaskData::new(generate_dataset(&suite.tasks[0], Quality::SubOptimal, 8, 0)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = data.sample_batch(&model.config, 4, &mut rng)?;
    let params = model.init_params(3);
    let ones = vec![true; params.len()];
    let (loss, grad) = model.loss_and_grad(&params, &ones, &batch, None)?;
    println!("{} parameters, loss {loss:.6}", params.len());

    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in (0..params.len()).step_by(7) {
        let mut plus = params.clone();
        plus.values_mut()[j] += h;
        let mut minus = params.clone();
        minus.values_mut()[j] -= h;
        let lp = model.loss_and_grad(&plus, &ones, &batch, None)?.0;
        let lm = model.loss_and_grad(&minus, &ones, &batch, None)?.0;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.values[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    println!("max relative error over sampled coordinates: {worst:.2e}");
    Ok(())
}
