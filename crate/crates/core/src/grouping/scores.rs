use crate::error::{Error, Result};
use crate::grad::GradVector;
use crate::harmony::{
    agreement_score, arg_btm_k, active_count, fisher_importance, harmony_score, update_mask, BitMask,
    HarmonyReport, Importance, Owner, OwnerUpdate, RoundGradients, FISHER_EPS,
};

use super::assignment::GroupAssignment;

/// One row `GH(T_i, 1)` per task, scored with singleton groups and an
/// all-ones mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl HarmonyMatrix {
    /// `round` must hold gradients taken with all-ones masks.
    pub fn from_round(round: &RoundGradients, lambda: f64) -> Result<Self> {
        let n = round.masked.len();
        let len = round.masked.first().map(|g| g.len()).unwrap_or(0);
        let ones = vec![true; len];
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let a = agreement_score(&round.masked, i)?;
            let imp = fisher_importance(round.masked_loss[i], &round.masked[i], &ones);
            let r = harmony_score(Owner::Task(i), a, imp, &ones, lambda);
            rows.push(r.harmony);
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }
}

fn summed(grads: &[GradVector], members: &[usize], len: usize) -> Vec<f64> {
    let mut s = vec![0.0; len];
    for &i in members {
        for (a, b) in s.iter_mut().zip(&grads[i].values) {
            *a += b;
        }
    }
    s
}

/// `(1/N^G) Σ_k Σ_{i∈G_k} ḡ_i`.
fn group_mean(masked: &[GradVector], assignment: &GroupAssignment) -> Result<Vec<f64>> {
    if masked.len() != assignment.num_tasks() {
        return Err(Error::config("gradient count does not match the assignment"));
    }
    let len = masked.first().map(|g| g.len()).unwrap_or(0);
    let all: Vec<usize> = (0..masked.len()).collect();
    let inv = 1.0 / assignment.n_groups as f64;
    Ok(summed(masked, &all, len).into_iter().map(|v| v * inv).collect())
}

/// `(Σ_{i∈G_j} ḡ_i) ⊙ (1/N^G) Σ_k Σ_{i∈G_k} ḡ_i`.
pub fn group_agreement(masked: &[GradVector], assignment: &GroupAssignment, j: usize) -> Result<Vec<f64>> {
    let members = assignment.members(j)?;
    let mean = group_mean(masked, assignment)?;
    let s = summed(masked, &members, mean.len());
    Ok(s.iter().zip(&mean).map(|(a, b)| a * b).collect())
}

/// `(∇ log Σ_i L_i ⊙ M)²` from each member's masked loss and gradient.
pub fn group_importance(losses: &[f64], grads: &[&GradVector], mask: &[bool]) -> Importance {
    let total: f64 = losses.iter().sum();
    let mut g = GradVector::zeros(mask.len());
    for gi in grads {
        g.add_assign(gi);
    }
    let clamped = !(total > FISHER_EPS);
    let out = fisher_importance(if clamped { FISHER_EPS } else { total }, &g, mask);
    Importance {
        values: out.values,
        clamped,
    }
}

/// Group harmony `GA + λ·GI` on the group's active coordinates, `+∞` elsewhere.
pub fn group_harmony(
    round: &RoundGradients,
    assignment: &GroupAssignment,
    mask: &BitMask,
    j: usize,
    lambda: f64,
) -> Result<HarmonyReport> {
    let members = assignment.members(j)?;
    let ga = group_agreement(&round.masked, assignment, j)?;
    let losses: Vec<f64> = members.iter().map(|&i| round.masked_loss[i]).collect();
    let grads: Vec<&GradVector> = members.iter().map(|&i| &round.masked[i]).collect();
    let gi = group_importance(&losses, &grads, &mask.bits);
    Ok(harmony_score(Owner::Group(j), ga, gi, &mask.bits, lambda))
}

/// `(Σ_{i∈G_j} g_i) ⊙ (1/N^G) Σ_k Σ_{i∈G_k} ḡ_i`.
pub fn group_recovery(round: &RoundGradients, assignment: &GroupAssignment, j: usize) -> Result<Vec<f64>> {
    let members = assignment.members(j)?;
    let mean = group_mean(&round.masked, assignment)?;
    let s = summed(&round.plain, &members, mean.len());
    Ok(s.iter().zip(&mean).map(|(a, b)| a * b).collect())
}

/// Initial group masks: drop the bottom `|θ| − active` coordinates of each
/// group's summed harmony rows.
pub fn init_group_masks(assignment: &GroupAssignment, matrix: &HarmonyMatrix, sparsity: f64) -> Result<Vec<BitMask>> {
    if matrix.len() != assignment.num_tasks() {
        return Err(Error::config("harmony matrix rows do not match the assignment"));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let len = matrix.width();
    let drop = len - active_count(len, sparsity);
    (0..assignment.n_groups)
        .map(|j| {
            let members = assignment.members(j)?;
            let mut s = vec![0.0; len];
            for &i in &members {
                for (a, b) in s.iter_mut().zip(&matrix.rows[i]) {
                    *a += b;
                }
            }
            let sel = arg_btm_k(&s, drop);
            if sel.shortfall > 0 {
                return Err(Error::Run(format!(
                    "group {j} harmony has {} non-finite entries; cannot drop {drop}",
                    sel.shortfall
                )));
            }
            let bits = sel.indicator.iter().map(|&d| !d).collect();
            Ok(BitMask {
                bits,
                owner: Owner::Group(j),
            })
        })
        .collect()
}

/// Group-wise mask update over every group, all scored against the same
/// gradient snapshot. `round` holds per-task gradients taken under each
/// task's group mask.
pub fn group_mask_update(
    round: &RoundGradients,
    assignment: &GroupAssignment,
    masks: &[BitMask],
    alpha: usize,
    lambda: f64,
) -> Result<Vec<OwnerUpdate>> {
    if masks.len() != assignment.n_groups {
        return Err(Error::config(format!(
            "{} group masks for {} groups",
            masks.len(),
            assignment.n_groups
        )));
    }
    let mut out = Vec::with_capacity(masks.len());
    for (j, mask) in masks.iter().enumerate() {
        let report = group_harmony(round, assignment, mask, j, lambda)?;
        let recovery = group_recovery(round, assignment, j)?;
        let (next, stats) = update_mask(mask, &report.harmony, &recovery, alpha)?;
        out.push(OwnerUpdate {
            mask: next,
            stats,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::ParamVector;
    use crate::harmony::testkit::LinearTasks;
    use crate::harmony::{collect_round, fisher_importance, mask_update, ImportanceKind, TaskObjective};
    use crate::grad::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gv(v: Vec<f64>) -> GradVector {
        GradVector { values: v }
    }

    fn random_round(n: usize, len: usize, seed: u64) -> RoundGradients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || gv((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let plain: Vec<GradVector> = (0..n).map(|_| g()).collect();
        let masked: Vec<GradVector> = (0..n).map(|_| g()).collect();
        RoundGradients {
            plain,
            masked,
            masked_loss: (0..n).map(|i| 0.5 + i as f64).collect(),
        }
    }

    #[test]
    fn single_group_agreement_is_square() {
        let r = random_round(3, 6, 1);
        let a = GroupAssignment::new(vec![0, 0, 0], 1, 0).unwrap();
        let ga = group_agreement(&r.masked, &a, 0).unwrap();
        for j in 0..6 {
            let s: f64 = r.masked.iter().map(|g| g.values[j]).sum();
            assert!((ga[j] - s * s).abs() < 1e-12);
            assert!(ga[j] >= 0.0);
        }
    }

    #[test]
    fn two_group_agreement_brute_force() {
        let r = random_round(4, 8, 2);
        let a = GroupAssignment::new(vec![0, 1, 1, 0], 2, 0).unwrap();
        for j in 0..2 {
            let ga = group_agreement(&r.masked, &a, j).unwrap();
            for k in 0..8 {
                let mut own = 0.0;
                let mut all = 0.0;
                for t in 0..4 {
                    all += r.masked[t].values[k];
                    if a.groups[t] == j {
                        own += r.masked[t].values[k];
                    }
                }
                assert!((ga[k] - own * all / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_importance_degenerate_cases() {
        let g = gv(vec![0.3, -1.2, 0.0, 2.0]);
        let mask = [true, true, false, true];
        let single = group_importance(&[0.7], &[&g], &mask);
        assert_eq!(single, fisher_importance(0.7, &g, &mask));
        let twice = group_importance(&[0.7, 0.7], &[&g, &g], &mask);
        for (a, b) in twice.values.iter().zip(&single.values) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn group_importance_matches_log_sum_finite_differences() {
        let mut obj = LinearTasks::new(2, 31);
        let p = obj.init_params(4);
        let mask = vec![true, true, false, true, true, true, false, true];
        let round = collect_round(&mut obj, &p, &[&mask, &mask]).unwrap();
        let gi = group_importance(&round.masked_loss, &[&round.masked[0], &round.masked[1]], &mask);
        let log_sum = |q: &ParamVector| -> f64 {
            let masked = q.masked(&mask).unwrap();
            let mut s = 0.0;
            for t in 0..2 {
                let mut tape = Tape::eval();
                let x = tape.input(obj.input(t).clone());
                let w = tape.param(&masked, &obj.layout.segments()[0]).unwrap();
                let y = tape.matmul(x, w).unwrap();
                let l = tape.mse(y, obj.target(t), &[1.0; 6]).unwrap();
                s += tape.scalar(l);
            }
            s.ln()
        };
        let h = 1e-6;
        for j in 0..8 {
            let want = if mask[j] {
                let mut a = p.clone();
                a.values_mut()[j] += h;
                let mut b = p.clone();
                b.values_mut()[j] -= h;
                ((log_sum(&a) - log_sum(&b)) / (2.0 * h)).powi(2)
            } else {
                0.0
            };
            assert!((gi.values[j] - want).abs() <= 1e-4 * want.max(1e-12), "coord {j}");
        }
        let _ = obj.num_tasks();
    }

    #[test]
    fn init_masks_examples() {
        let a = GroupAssignment::new(vec![0, 1], 2, 0).unwrap();
        let m = HarmonyMatrix {
            rows: vec![vec![5.0, 1.0, 4.0, 0.5, 3.0, 6.0], vec![0.1, 9.0, 9.0, 9.0, 9.0, 0.2]],
        };
        let masks = init_group_masks(&a, &m, 1.0 / 3.0).unwrap();
        assert_eq!(masks[0].bits, vec![true, false, true, false, true, true]);
        assert_eq!(masks[1].bits, vec![false, true, true, true, true, false]);
        let dense = init_group_masks(&a, &m, 0.0).unwrap();
        assert!(dense.iter().all(|m| m.popcount() == 6));
    }

    #[test]
    fn singleton_groups_match_task_update() {
        let mut obj = LinearTasks::new(3, 41);
        let p = obj.init_params(5);
        let masks: Vec<BitMask> = (0..3)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                let mut bits = vec![true; 8];
                for _ in 0..3 {
                    bits[rng.gen_range(0..8)] = false;
                }
                BitMask {
                    bits,
                    owner: Owner::Task(i as usize),
                }
            })
            .collect();
        let refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let round = collect_round(&mut obj, &p, &refs).unwrap();
        let task = mask_update(&round, &masks, &p, 2, 10.0, ImportanceKind::Fisher).unwrap();
        let a = GroupAssignment::new(vec![0, 1, 2], 3, 0).unwrap();
        let group_masks: Vec<BitMask> = masks
            .iter()
            .enumerate()
            .map(|(j, m)| BitMask {
                bits: m.bits.clone(),
                owner: Owner::Group(j),
            })
            .collect();
        let grp = group_mask_update(&round, &a, &group_masks, 2, 10.0).unwrap();
        for (t, g) in task.iter().zip(&grp) {
            assert_eq!(t.mask.bits, g.mask.bits);
            assert_eq!(t.report.harmony, g.report.harmony);
        }
    }

    fn brute_group_update(
        round: &RoundGradients,
        groups: &[usize],
        ng: usize,
        masks: &[Vec<bool>],
        alpha: usize,
        lambda: f64,
    ) -> Vec<Vec<bool>> {
        let len = masks[0].len();
        let mut out = Vec::new();
        for j in 0..ng {
            let m = &masks[j];
            let mut harm = vec![f64::INFINITY; len];
            let mut rec = vec![f64::NEG_INFINITY; len];
            let loss: f64 = (0..groups.len()).filter(|&i| groups[i] == j).map(|i| round.masked_loss[i]).sum();
            for k in 0..len {
                let mut own = 0.0;
                let mut all = 0.0;
                let mut own_plain = 0.0;
                for i in 0..groups.len() {
                    all += round.masked[i].values[k];
                    if groups[i] == j {
                        own += round.masked[i].values[k];
                        own_plain += round.plain[i].values[k];
                    }
                }
                if m[k] {
                    harm[k] = own * all / ng as f64 + lambda * (own / loss).powi(2);
                } else {
                    rec[k] = own_plain * all / ng as f64;
                }
            }
            let mut act: Vec<usize> = (0..len).filter(|&k| m[k]).collect();
            act.sort_by(|&a, &b| harm[a].partial_cmp(&harm[b]).unwrap().then(a.cmp(&b)));
            let mut ina: Vec<usize> = (0..len).filter(|&k| !m[k]).collect();
            ina.sort_by(|&a, &b| rec[b].partial_cmp(&rec[a]).unwrap().then(a.cmp(&b)));
            let kk = alpha.min(act.len()).min(ina.len());
            let mut next = m.clone();
            for &k in &act[..kk] {
                next[k] = false;
            }
            for &k in &ina[..kk] {
                next[k] = true;
            }
            out.push(next);
        }
        out
    }

    #[test]
    fn two_group_ten_coordinate_instance() {
        let round = random_round(4, 10, 77);
        let groups = vec![0, 1, 0, 1];
        let masks = vec![
            vec![true, true, false, true, true, false, true, true, false, true],
            vec![false, true, true, true, false, true, true, false, true, true],
        ];
        let a = GroupAssignment::new(groups.clone(), 2, 0).unwrap();
        let bm: Vec<BitMask> = masks
            .iter()
            .enumerate()
            .map(|(j, b)| BitMask {
                bits: b.clone(),
                owner: Owner::Group(j),
            })
            .collect();
        let got = group_mask_update(&round, &a, &bm, 2, 10.0).unwrap();
        let want = brute_group_update(&round, &groups, 2, &masks, 2, 10.0);
        for j in 0..2 {
            assert_eq!(got[j].mask.bits, want[j]);
        }
        let same = group_mask_update(&round, &a, &bm, 0, 10.0).unwrap();
        for j in 0..2 {
            assert_eq!(same[j].mask, bm[j]);
        }
    }

    proptest! {
        #[test]
        fn group_update_matches_brute_force(
            seed in 0u64..10_000,
            n in 1usize..5,
            len in 2usize..40,
            alpha in 0usize..10,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ng = rng.gen_range(1..=n);
            let mut groups: Vec<usize> = (0..n).map(|i| if i < ng { i } else { rng.gen_range(0..ng) }).collect();
            groups.sort_unstable();
            let round = random_round(n, len, seed ^ 0xabc);
            let masks: Vec<Vec<bool>> = (0..ng).map(|_| (0..len).map(|_| rng.gen_bool(0.6)).collect()).collect();
            let a = GroupAssignment::new(groups.clone(), ng, 0).unwrap();
            let bm: Vec<BitMask> = masks.iter().enumerate().map(|(j, b)| BitMask { bits: b.clone(), owner: Owner::Group(j) }).collect();
            let got = group_mask_update(&round, &a, &bm, alpha, 10.0).unwrap();
            let want = brute_group_update(&round, &groups, ng, &masks, alpha, 10.0);
            for j in 0..ng {
                prop_assert_eq!(&got[j].mask.bits, &want[j]);
                prop_assert_eq!(got[j].mask.popcount(), bm[j].popcount());
            }
        }
    }
}
