use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grad::{ParamVector, Tape};
use crate::taskenv::{generate_dataset, Quality, TaskSpec};

fn tiny() -> DtConfig {
    DtConfig {
        embed: 8,
        layers: 2,
        heads: 2,
        context: 3,
        prompt_len: 2,
        dropout: 0.0,
        ..DtConfig::default()
    }
}

fn triplet(rng: &mut ChaCha8Rng, cfg: &DtConfig) -> Triplet {
    Triplet {
        rtg: rng.gen_range(-5.0..5.0),
        state: (0..cfg.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        action: (0..cfg.action_dim).map(|_| rng.gen_range(-0.9..0.9)).collect(),
    }
}

fn random_batch(cfg: &DtConfig, n: usize, hist: usize, seed: u64) -> TrajectoryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = TrajectoryBatch::default();
    for _ in 0..n {
        let prompt = PromptWindow {
            triplets: (0..cfg.prompt_len).map(|_| triplet(&mut rng, cfg)).collect(),
            task_source: 0,
        };
        let history = HistoryWindow {
            triplets: (0..hist).map(|_| triplet(&mut rng, cfg)).collect(),
        };
        b.push(cfg, &prompt, &history).unwrap();
    }
    b
}

fn loss(model: &DtModel, p: &ParamVector, mask: &[bool], b: &TrajectoryBatch) -> f64 {
    let mut tape = Tape::eval();
    let l = model.dt_loss(&mut tape, p, mask, b).unwrap();
    tape.scalar(l)
}

#[test]
fn token_layout_order() {
    let cfg = DtConfig {
        prompt_len: 1,
        context: 1,
        ..DtConfig::default()
    };
    let got: Vec<(Segment, Modality)> = token_layout(&cfg).iter().map(|t| (t.segment, t.modality)).collect();
    use Modality::*;
    use Segment::*;
    assert_eq!(
        got,
        vec![
            (Prompt, Rtg),
            (Prompt, State),
            (Prompt, Action),
            (History, Rtg),
            (History, State),
            (History, Action)
        ]
    );
    assert_eq!(token_layout(&DtConfig::default()).len(), 75);
    assert_eq!(DtConfig::default().tokens(), 75);
}

#[test]
fn empty_history_is_all_padding() {
    let cfg = tiny();
    let b = random_batch(&cfg, 1, 0, 1);
    assert_eq!(b.valid, vec![true, true, false, false, false]);
    assert!(b.weights.iter().all(|&w| w == 0.0));
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(0);
    let mut tape = Tape::eval();
    let err = model.dt_loss(&mut tape, &p, &vec![true; p.len()], &b).unwrap_err();
    assert!(matches!(err, crate::Error::Data { .. }));
}

#[test]
fn short_prompt_rejected() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = PromptWindow {
        triplets: vec![triplet(&mut rng, &cfg)],
        task_source: 0,
    };
    let err = build_input(&cfg, &prompt, &HistoryWindow::default()).unwrap_err();
    assert!(matches!(err, crate::Error::Data { .. }));
}

#[test]
fn loss_reduction_examples() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(3);
    let ones = vec![true; p.len()];
    let mut b = random_batch(&cfg, 2, 3, 5);
    let pred = model.predict(&p, &b).unwrap();
    b.targets = pred.data.clone();
    assert_eq!(loss(&model, &p, &ones, &b), 0.0);

    // zero head gives a zero action; one valid position with target [1, 1]
    let mut zero_head = p.clone();
    for name in ["head.action.w", "head.action.b"] {
        let seg = model.layout().find(name).unwrap().clone();
        zero_head.values_mut()[seg.range()].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompt = PromptWindow {
        triplets: (0..cfg.prompt_len).map(|_| triplet(&mut rng, &cfg)).collect(),
        task_source: 0,
    };
    let mut t = triplet(&mut rng, &cfg);
    t.action = vec![1.0, 1.0];
    let one = build_input(&cfg, &prompt, &HistoryWindow { triplets: vec![t] }).unwrap();
    assert_eq!(loss(&model, &zero_head, &ones, &one), 2.0);
}

#[test]
fn duplicating_batch_keeps_loss() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(4);
    let ones = vec![true; p.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prompt = PromptWindow {
        triplets: (0..cfg.prompt_len).map(|_| triplet(&mut rng, &cfg)).collect(),
        task_source: 0,
    };
    let hist = HistoryWindow {
        triplets: (0..2).map(|_| triplet(&mut rng, &cfg)).collect(),
    };
    let single = build_input(&cfg, &prompt, &hist).unwrap();
    let mut double = single.clone();
    double.push(&cfg, &prompt, &hist).unwrap();
    let (a, b) = (loss(&model, &p, &ones, &single), loss(&model, &p, &ones, &double));
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn causality() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(6);
    let base = random_batch(&cfg, 1, cfg.context, 9);
    let before = model.predict(&p, &base).unwrap();
    for slot in 0..cfg.context {
        // perturb this slot's action and everything in later slots
        let mut b = base.clone();
        let s = cfg.prompt_len + slot;
        for a in &mut b.actions[s * cfg.action_dim..] {
            *a += 0.37;
        }
        for r in &mut b.rtg[s + 1..] {
            *r -= 1.1;
        }
        for x in &mut b.states[(s + 1) * cfg.state_dim..] {
            *x *= -1.5;
        }
        let after = model.predict(&p, &b).unwrap();
        for q in 0..=slot {
            assert_eq!(before.row(q), after.row(q), "slot {slot} changed prediction {q}");
        }
        if slot + 1 < cfg.context {
            assert_ne!(before.row(slot + 1), after.row(slot + 1));
        }
    }
}

#[test]
fn mask_equivalence_is_exact() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(10);
    let b = random_batch(&cfg, 3, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mask: Vec<bool> = (0..p.len()).map(|_| rng.gen_bool(0.7)).collect();
    let ones = vec![true; p.len()];
    let a = loss(&model, &p, &mask, &b);
    let c = loss(&model, &p.masked(&mask).unwrap(), &ones, &b);
    assert_eq!(a.to_bits(), c.to_bits());
}

#[test]
fn padding_content_is_ignored() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = model.init_params(13);
    let ones = vec![true; p.len()];
    let b = random_batch(&cfg, 2, 1, 14);
    let mut garbage = b.clone();
    for (slot, &v) in b.valid.iter().enumerate() {
        if v {
            continue;
        }
        garbage.rtg[slot] = 42.0;
        garbage.states[slot * cfg.state_dim..(slot + 1) * cfg.state_dim].iter_mut().for_each(|x| *x = -7.0);
        garbage.actions[slot * cfg.action_dim..(slot + 1) * cfg.action_dim].iter_mut().for_each(|x| *x = 3.0);
    }
    for (t, w) in garbage.targets.chunks_mut(cfg.action_dim).zip(&b.weights) {
        if *w == 0.0 {
            t.iter_mut().for_each(|x| *x = 9.0);
        }
    }
    assert_eq!(loss(&model, &p, &ones, &b).to_bits(), loss(&model, &p, &ones, &garbage).to_bits());
}

pub(crate) fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = DtConfig {
        embed: 8,
        layers: 1,
        heads: 2,
        context: 2,
        prompt_len: 1,
        dropout: 0.0,
        ..DtConfig::default()
    };
    let model = DtModel::new(cfg).unwrap();
    assert!(model.num_params() <= 2000);
    let h = 1e-5;
    for seed in 0..5u64 {
        let p = model.init_params(seed);
        let b = random_batch(&cfg, 2, 2, 100 + seed);
        let ones = vec![true; p.len()];
        let (_, g) = model.loss_and_grad(&p, &ones, &b, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..25 {
            let j = rng.gen_range(0..p.len());
            let mut a = p.clone();
            a.values_mut()[j] += h;
            let mut c = p.clone();
            c.values_mut()[j] -= h;
            let fd = (loss(&model, &a, &ones, &b) - loss(&model, &c, &ones, &b)) / (2.0 * h);
            assert!(rel_err(g.values[j], fd) < 1e-4, "seed {seed} coord {j}: {} vs {fd}", g.values[j]);
        }
    }
}

#[test]
fn sampled_batches_come_from_own_task() {
    let task = TaskSpec::point_goal(3, 1.0);
    let ds = generate_dataset(&task, Quality::NearOptimal, 10, 1).unwrap();
    let data = TaskData::new(ds).unwrap();
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = data.sample_prompt(cfg.prompt_len, &mut rng);
    assert_eq!(prompt.task_source, 3);
    assert_eq!(prompt.triplets.len(), cfg.prompt_len);
    let b = data.sample_batch(&cfg, 4, &mut rng).unwrap();
    assert_eq!(b.len(), 4);
    assert!(b.weights.iter().any(|&w| w == 1.0));
}

fn zero_action_params(model: &DtModel) -> ParamVector {
    let mut p = model.init_params(1);
    for name in ["head.action.w", "head.action.b"] {
        let seg = model.layout().find(name).unwrap().clone();
        p.values_mut()[seg.range()].iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

#[test]
fn rollout_boundaries() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let p = zero_action_params(&model);
    let ones = vec![true; p.len()];
    let task = TaskSpec::direction(0, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = PromptWindow {
        triplets: (0..cfg.prompt_len).map(|_| triplet(&mut rng, &cfg)).collect(),
        task_source: 0,
    };
    let target = TargetReturn::new(7.5).unwrap();
    let ep = rollout(&model, &task, &p, &ones, &prompt, target, 1, 0).unwrap();
    assert_eq!(ep.len(), 1);
    // zero actions earn zero reward on direction tasks, so r̂ never moves
    let ep = rollout(&model, &task, &p, &ones, &prompt, target, 32, 0).unwrap();
    assert_eq!(ep.len(), 32);
    assert!(ep.rtgs.iter().all(|&r| r == 7.5));
    assert!(TargetReturn::new(f64::NAN).is_err());
}

#[test]
fn non_finite_action_is_run_error() {
    let cfg = tiny();
    let model = DtModel::new(cfg).unwrap();
    let mut p = model.init_params(1);
    let seg = model.layout().find("head.action.b").unwrap().clone();
    p.values_mut()[seg.range()][0] = f64::NAN;
    let task = TaskSpec::point_goal(0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = PromptWindow {
        triplets: (0..cfg.prompt_len).map(|_| triplet(&mut rng, &cfg)).collect(),
        task_source: 0,
    };
    let ones = vec![true; p.len()];
    let err = rollout(&model, &task, &p, &ones, &prompt, TargetReturn(0.0), 5, 0).unwrap_err();
    assert!(matches!(err, crate::Error::Run(_)));
}
