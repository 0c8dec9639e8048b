use std::path::Path;
use std::process::{Command, Output};

use harmodt::harness::RunConfig;

const BASE: &str = "\
suite = pointgoal-8
n_traj = 6
embed = 8
heads = 1
context = 3
prompt_len = 2
batch_size = 4
iterations = 20
mask_interval = 10
warmup = 10
eta_max = 5
gn = 2
gating_epochs = 1
gating_windows = 8
eval_episodes = 1
";

fn harmodt(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_harmodt"));
    cmd.args(args).current_dir(dir).env_remove("HARMO_SEED");
    if let Some(s) = seed_env {
        cmd.env("HARMO_SEED", s);
    }
    cmd.output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.cfg"), BASE).unwrap();
    let out = harmodt(dir.path(), &["gen-data", "--config", "base.cfg"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn flags_override_file_and_env_overrides_seed() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("extra.cfg"), format!("{BASE}seed = 3\nlr = 0.01\n")).unwrap();
    let out = harmodt(
        p,
        &["train", "--algo", "mtdt", "--config", "extra.cfg", "--lr", "0.002", "--seed", "4"],
        Some("9"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::load(&p.join("runs/mtdt-s9/config.txt")).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.lr, 0.002);
    assert_eq!(cfg.iterations, 20);

    let out = harmodt(p, &["train", "--algo", "mtdt", "--config", "extra.cfg"], None);
    assert!(out.status.success());
    assert!(p.join("runs/mtdt-s3/run.json").exists());
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "iterations = 20\nbogus = 1\n").unwrap();
    let out = harmodt(p, &["train", "--algo", "mtdt", "--config", "bad.cfg"], None);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("bad.cfg"), "{err}");

    let out = harmodt(p, &["train", "--algo", "mtdt", "--config", "base.cfg"], Some("x"));
    assert!(!out.status.success());

    let out = harmodt(p, &["train", "--algo", "nope", "--config", "base.cfg"], None);
    assert!(!out.status.success());

    let out = harmodt(p, &["eval", "--protocol", "provided", "--config", "base.cfg"], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs"));

    let out = harmodt(p, &["train", "--algo", "harmodt", "--config", "base.cfg", "--sparsity", "1"], None);
    assert!(!out.status.success());
}

#[test]
fn full_scale_sets_full_budget() {
    let dir = setup();
    let p = dir.path();
    // the flag only seeds defaults; file and flags still win
    let out = harmodt(
        p,
        &[
            "train", "--algo", "mtdt", "--full-scale", "--config", "base.cfg", "--dropout", "0.2",
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::load(&p.join("runs/mtdt-s0/config.txt")).unwrap();
    assert_eq!(cfg.layers, 6);
    assert_eq!(cfg.thresh, 25);
    assert_eq!(cfg.embed, 8);
    assert_eq!(cfg.dropout, 0.2);
}

#[test]
fn sweep_eval_and_export() {
    let dir = setup();
    let p = dir.path();
    let c = ["--config", "base.cfg", "--group_sweep", "1,2"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = args.iter().chain(c.iter()).copied().collect();
        let out = harmodt(p, &all, None);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["train", "--algo", "gharmodt", "--sweep"]);
    run(&["train", "--algo", "harmodt"]);
    let out = run(&["eval", "--protocol", "agnostic"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping harmodt-s0"));
    run(&["export"]);
    let sweep = std::fs::read_to_string(p.join("runs/export/group_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.lines().nth(1).unwrap().starts_with("1,agnostic,1,"));
    let out = harmodt(
        p,
        &["eval", "--protocol", "agnostic", "--run", "runs/harmodt-s0", "--config", "base.cfg"],
        None,
    );
    assert!(!out.status.success());
}

#[test]
fn eval_thresh_overrides_the_stored_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("dir.cfg"), BASE.replace("pointgoal-8", "dir-8")).unwrap();
    for args in [&["gen-data"][..], &["train", "--algo", "harmodt"]] {
        let all: Vec<&str> = args.iter().copied().chain(["--config", "dir.cfg"]).collect();
        let out = harmodt(p, &all, None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--protocol", "unseen", "--config", "dir.cfg"];
        args.extend_from_slice(extra);
        let out = harmodt(p, &args, None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stderr).into_owned()
    };
    let out = harmodt(p, &["train", "--algo", "gharmodt", "--sweep", "--config", "dir.cfg"], None);
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_sweep entry 8 outside 1..=6"));
    assert!(!eval(&[]).contains("all zero"));
    // six training masks never all agree above a threshold of six
    assert!(eval(&["--thresh", "6"]).contains("voted mask is all zero"));
}
