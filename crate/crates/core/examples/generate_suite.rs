//! Generates both synthetic suites and writes them to a temporary directory.

use harmodt::taskenv::{generate_dataset, load_suite_datasets, save_suite_datasets, Quality, Suite};

fn main() -> harmodt::Result<()> {
    let root = std::env::temp_dir().join("harmodt-example-data");
    for suite in [Suite::point_goal_8(), Suite::dir_8()] {
        for quality in [Quality::NearOptimal, Quality::SubOptimal] {
            let data = suite
                .tasks
                .iter()
                .map(|t| generate_dataset(t, quality, 50, 0))
                .collect::<harmodt::Result<Vec<_>>>()?;
            let dir = root.join(quality.as_str());
            save_suite_datasets(&dir, &suite, &data)?;
            let back = load_suite_datasets(&dir, &suite)?;
            assert_eq!(back, data);
            let mean: f64 = data.iter().map(|d| d.mean_return()).sum::<f64>() / data.len() as f64;
            let success: f64 = data.iter().map(|d| d.success_rate()).sum::<f64>() / data.len() as f64;
            println!(
                "{:<12} {:<12} mean return {mean:>8.3}  success {success:.2}  held out {:?}",
                suite.name,
                quality.as_str(),
                suite.held_out
            );
        }
    }
    println!("written under {}", root.display());
    Ok(())
}
