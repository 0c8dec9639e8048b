use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use harmodt::harness::{
    evaluate, export, generate_suite, load_datasets, mark_started, run_dirs, run_name, save_eval, train, Algo, Protocol,
    RunConfig, TrainedRun, KEYS,
};
use harmodt::taskenv::save_suite_datasets;
use harmodt::{Error, Result};

/// `println!` that tolerates a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn cli() -> Command {
    let mut cmd = Command::new("harmodt")
        .about("Multi-task decision transformers with harmony masks")
        .subcommand_required(true)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value config file"),
        )
        .arg(
            Arg::new("full_scale")
                .long("full-scale")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("start from the full-size model and training budget"),
        );
    for &key in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).global(true).value_name("VALUE"));
    }
    cmd.subcommand(Command::new("gen-data").args_override_self(true).about("generate offline datasets for the configured suite"))
        .subcommand(
            Command::new("train").args_override_self(true)
                .about("train one run per seed")
                .arg(
                    Arg::new("algo")
                        .long("algo")
                        .required(true)
                        .value_parser(["mtdt", "harmodt", "gharmodt"]),
                )
                .arg(
                    Arg::new("sweep")
                        .long("sweep")
                        .action(ArgAction::SetTrue)
                        .help("with gharmodt, train every group count in group_sweep"),
                ),
        )
        .subcommand(
            Command::new("eval").args_override_self(true)
                .about("evaluate trained runs")
                .arg(
                    Arg::new("protocol")
                        .long("protocol")
                        .required(true)
                        .value_parser(["provided", "agnostic", "unseen"]),
                )
                .arg(
                    Arg::new("run")
                        .long("run")
                        .value_name("DIR")
                        .action(ArgAction::Append)
                        .help("run directory; defaults to every finished run under out_dir"),
                ),
        )
        .subcommand(
            Command::new("export").args_override_self(true).about("write CSV and JSON summaries").arg(
                Arg::new("results")
                    .long("results")
                    .value_name("DIR")
                    .help("results directory; defaults to out_dir"),
            ),
        )
}

fn build_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = if m.get_flag("full_scale") {
        RunConfig::full_scale()
    } else {
        RunConfig::default()
    };
    if let Some(path) = m.get_one::<String>("config") {
        let path = Path::new(path);
        cfg.apply_text(&harmodt::fsutil::read_string(path)?, path)?;
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let suite = cfg.suite()?;
    let data = generate_suite(cfg)?;
    save_suite_datasets(&cfg.data_dir, &suite, &data)?;
    for d in &data {
        say!(
            "{} task {}: {} trajectories, mean return {:.3}, success {:.2}",
            suite.name,
            d.task_id,
            d.trajectories.len(),
            d.mean_return(),
            d.success_rate()
        );
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, algo: Algo, sweep: bool) -> Result<()> {
    let data = load_datasets(cfg)?;
    let group_counts = if sweep && algo == Algo::Gharmodt {
        cfg.validate_sweep()?;
        cfg.group_sweep.clone()
    } else {
        vec![cfg.n_groups]
    };
    for g in group_counts {
        let mut c = cfg.clone();
        c.n_groups = g;
        for seed in c.seeds() {
            let dir = c.out_dir.join(run_name(algo, &c, seed));
            mark_started(&dir, algo, &c, seed)?;
            let run = train(&c, algo, seed, &data)?;
            run.save(&dir)?;
            let last = run.log.records.last();
            say!(
                "{}: {} mask updates, final harmony {:.4}, saved to {}",
                run.name(),
                run.updates(),
                last.map(|r| r.averaged_harmony).unwrap_or(f64::NAN),
                dir.display()
            );
            if let Some(g) = &run.gating_report {
                say!("  gating held-out accuracy {:.3}", g.heldout_accuracy);
            }
        }
    }
    Ok(())
}

fn applicable(run: &TrainedRun, protocol: Protocol) -> Result<bool> {
    Ok(match protocol {
        Protocol::Provided => true,
        Protocol::Agnostic => run.algo != Algo::Harmodt,
        Protocol::Unseen => !run.config.suite()?.held_out.is_empty(),
    })
}

fn eval_cmd(
    cfg: &RunConfig,
    protocol: Protocol,
    explicit: Option<Vec<PathBuf>>,
    thresh: Option<usize>,
) -> Result<()> {
    let strict = explicit.is_some();
    let dirs = match explicit {
        Some(d) => d,
        None if cfg.out_dir.is_dir() => run_dirs(&cfg.out_dir)?,
        None => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(Error::config(format!("no runs found under {}", cfg.out_dir.display())));
    }
    for dir in dirs {
        let mut run = match TrainedRun::load(&dir) {
            Ok(r) => r,
            Err(e) if !strict => {
                eprintln!("skipping {}: {e}", dir.display());
                continue;
            }
            Err(e) => return Err(e),
        };
        if !strict && !applicable(&run, protocol)? {
            eprintln!("skipping {}: {protocol} does not apply", run.name());
            continue;
        }
        if let Some(t) = thresh {
            run.config.thresh = t;
        }
        let mut data_cfg = run.config.clone();
        data_cfg.data_dir = cfg.data_dir.clone();
        let data = load_datasets(&data_cfg)?;
        let report = evaluate(&run, &data, protocol, cfg.eval_episodes, &cfg.seeds())?;
        save_eval(&dir, &report)?;
        for w in &report.warnings {
            eprintln!("warning: {}: {w}", run.name());
        }
        let ident = report
            .identification_accuracy
            .map(|a| format!(", identification {a:.3}"))
            .unwrap_or_default();
        say!(
            "{} {protocol}: success {:.3} +/- {:.3}, return {:.3}{ident}",
            run.name(),
            report.mean_success,
            report.std_success,
            report.mean_return
        );
    }
    Ok(())
}

fn export_cmd(cfg: &RunConfig, results: Option<&String>) -> Result<()> {
    let root = results.map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.clone());
    let s = export(&root, &cfg.group_sweep)?;
    say!("exported {} runs to {}", s.runs.len(), root.join("export").display());
    if !s.incomplete_runs.is_empty() {
        eprintln!("incomplete runs: {}", s.incomplete_runs.join(", "));
    }
    if !s.missing_group_counts.is_empty() {
        let g: Vec<String> = s.missing_group_counts.iter().map(|g| g.to_string()).collect();
        eprintln!("group counts without runs: {}", g.join(", "));
    }
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m)?;
    match m.subcommand() {
        Some(("gen-data", _)) => gen_data(&cfg),
        Some(("train", sub)) => {
            let algo: Algo = sub.get_one::<String>("algo").expect("required").parse()?;
            train_cmd(&cfg, algo, sub.get_flag("sweep"))
        }
        Some(("eval", sub)) => {
            let protocol: Protocol = sub.get_one::<String>("protocol").expect("required").parse()?;
            let runs = sub
                .get_many::<String>("run")
                .map(|v| v.map(PathBuf::from).collect());
            // a --thresh given at eval time replaces the one stored with each run
            let thresh = m.get_one::<String>("thresh").map(|_| cfg.thresh);
            eval_cmd(&cfg, protocol, runs, thresh)
        }
        Some(("export", sub)) => export_cmd(&cfg, sub.get_one::<String>("results")),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    match run(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
