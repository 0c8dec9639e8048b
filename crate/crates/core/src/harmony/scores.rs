use serde::{Deserialize, Serialize};

use super::mask::Owner;
use crate::error::{Error, Result};
use crate::grad::{GradVector, ParamVector};

/// Loss floor used before dividing by `L` in the Fisher score.
pub const FISHER_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceKind {
    Magnitude,
    Fisher,
}

impl ImportanceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "magnitude" => Some(Self::Magnitude),
            "fisher" => Some(Self::Fisher),
            _ => None,
        }
    }
}

/// Coordinatewise mean of equally long gradient vectors.
pub fn mean_gradient(grads: &[GradVector]) -> Result<Vec<f64>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::config("no task gradients supplied"))?;
    let n = first.len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::config("task gradients differ in length"));
    }
    let mut mean = vec![0.0; n];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(&g.values) {
            *m += v;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// `ḡ_i ⊙ mean_j ḡ_j` over masked task gradients.
pub fn agreement_score(masked_grads: &[GradVector], i: usize) -> Result<Vec<f64>> {
    let mean = mean_gradient(masked_grads)?;
    let gi = masked_grads
        .get(i)
        .ok_or_else(|| Error::config(format!("task index {i} out of range")))?;
    Ok(gi.values.iter().zip(&mean).map(|(a, b)| a * b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Importance {
    pub values: Vec<f64>,
    /// Set when the loss was at or below [`FISHER_EPS`] and got clamped.
    pub clamped: bool,
}

/// Magnitude `|θ ⊙ M|`.
pub fn magnitude_importance(params: &ParamVector, mask: &[bool]) -> Vec<f64> {
    params
        .values()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v.abs() } else { 0.0 })
        .collect()
}

/// Fisher `((∇L / L) ⊙ M)²` from the masked loss and gradient.
pub fn fisher_importance(loss: f64, grad: &GradVector, mask: &[bool]) -> Importance {
    let clamped = !(loss > FISHER_EPS);
    let l = if clamped { FISHER_EPS } else { loss };
    let values = grad
        .values
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { (g / l).powi(2) } else { 0.0 })
        .collect();
    Importance { values, clamped }
}

/// Importance of either kind. `loss` and `grad` are `L(θ ⊙ M)` and its
/// gradient; they are ignored for the magnitude form.
pub fn importance_score(
    kind: ImportanceKind,
    params: &ParamVector,
    mask: &[bool],
    loss: f64,
    grad: &GradVector,
) -> Importance {
    match kind {
        ImportanceKind::Magnitude => Importance {
            values: magnitude_importance(params, mask),
            clamped: false,
        },
        ImportanceKind::Fisher => fisher_importance(loss, grad, mask),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonyReport {
    pub owner: Owner,
    pub agreement: Vec<f64>,
    pub importance: Vec<f64>,
    /// `A + λ·I` on active coordinates, `+∞` elsewhere.
    pub harmony: Vec<f64>,
    pub importance_clamped: bool,
}

pub fn harmony_score(
    owner: Owner,
    agreement: Vec<f64>,
    importance: Importance,
    mask: &[bool],
    lambda: f64,
) -> HarmonyReport {
    let harmony = agreement
        .iter()
        .zip(&importance.values)
        .zip(mask)
        .map(|((&a, &i), &m)| if m { a + lambda * i } else { f64::INFINITY })
        .collect();
    HarmonyReport {
        owner,
        agreement,
        importance: importance.values,
        harmony,
        importance_clamped: importance.clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedHarmony {
    pub score: f64,
    /// Number of (task, coordinate) pairs that entered the average.
    pub pairs: usize,
    /// True when every pair was degenerate and the score defaulted to 0.
    pub degenerate: bool,
}

/// Mean sign agreement between each task gradient and the average gradient,
/// skipping pairs where either factor is zero.
pub fn averaged_harmony(grads: &[GradVector]) -> Result<AveragedHarmony> {
    let mean = mean_gradient(grads)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for g in grads {
        for (&a, &b) in g.values.iter().zip(&mean) {
            if a == 0.0 || b == 0.0 {
                continue;
            }
            total += (a * b) / (a.abs() * b.abs());
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(AveragedHarmony {
            score: 0.0,
            pairs: 0,
            degenerate: true,
        });
    }
    Ok(AveragedHarmony {
        score: total / pairs as f64,
        pairs,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Layout, SegmentKind, Tape};
    use crate::harmony::testkit::LinearTasks;
    use crate::harmony::{masked_gradient, TaskObjective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gv(v: &[f64]) -> GradVector {
        GradVector { values: v.to_vec() }
    }

    fn random_grads(n: usize, len: usize, seed: u64) -> Vec<GradVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| gv(&(0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn agreement_hand_cases() {
        let g = [gv(&[1.0, -1.0]), gv(&[1.0, 1.0])];
        assert_eq!(agreement_score(&g, 0).unwrap(), vec![1.0, 0.0]);
        let single = [gv(&[-2.0, 0.5])];
        assert_eq!(agreement_score(&single, 0).unwrap(), vec![4.0, 0.25]);
        assert!(agreement_score(&[], 0).is_err());
    }

    #[test]
    fn agreement_matches_brute_force() {
        let g = random_grads(3, 8, 11);
        for i in 0..3 {
            let a = agreement_score(&g, i).unwrap();
            for j in 0..8 {
                let mut s = 0.0;
                for t in &g {
                    s += t.values[j];
                }
                let want = g[i].values[j] * s / 3.0;
                assert!((a[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn importance_hand_cases() {
        let mut l = Layout::new();
        l.push("w", 1, 2, SegmentKind::LinearWeight);
        let p = ParamVector::from_values(l, vec![-2.0, 3.0]).unwrap();
        assert_eq!(magnitude_importance(&p, &[true, false]), vec![2.0, 0.0]);
        let f = fisher_importance(2.0, &gv(&[4.0, 0.0]), &[true, true]);
        assert_eq!(f.values, vec![4.0, 0.0]);
        assert!(!f.clamped);
        let f = fisher_importance(0.0, &gv(&[1e-9, 0.0]), &[true, true]);
        assert!(f.clamped);
        assert!((f.values[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn fisher_matches_log_loss_finite_differences() {
        let mut obj = LinearTasks::new(1, 21);
        let p = obj.init_params(3);
        let mask = vec![true, false, true, true, false, true, true, true];
        let mg = masked_gradient(&mut obj, 0, &p, &mask).unwrap();
        let fisher = fisher_importance(mg.loss, &mg.grad, &mask);
        let seg = obj.layout.segments()[0].clone();
        let log_loss = |params: &ParamVector| {
            let mut tape = Tape::eval();
            let x = tape.input(obj_input(&obj));
            let w = tape.param(&params.masked(&mask).unwrap(), &seg).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let l = tape.mse(y, &obj_target(&obj), &[1.0; 6]).unwrap();
            let ll = tape.ln(l).unwrap();
            (tape.scalar(ll), tape.backward(ll).unwrap())
        };
        let (_, dlog) = log_loss(&p);
        let h = 1e-6;
        for j in 0..8 {
            let want = if mask[j] {
                let mut a = p.clone();
                a.values_mut()[j] += h;
                let mut b = p.clone();
                b.values_mut()[j] -= h;
                ((log_loss(&a).0 - log_loss(&b).0) / (2.0 * h)).powi(2)
            } else {
                0.0
            };
            let got = fisher.values[j];
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1e-12), "coord {j}: {got} vs {want}");
            let tape_val = if mask[j] { dlog.values[j].powi(2) } else { 0.0 };
            assert!((got - tape_val).abs() <= 1e-9 * tape_val.max(1e-12));
        }
    }

    fn obj_input(obj: &LinearTasks) -> crate::grad::Tensor {
        obj.input(0).clone()
    }

    fn obj_target(obj: &LinearTasks) -> crate::grad::Tensor {
        obj.target(0).clone()
    }

    #[test]
    fn harmony_composition() {
        let a = vec![1.0, 0.0];
        let imp = Importance {
            values: vec![0.7, 0.0],
            clamped: false,
        };
        let h = harmony_score(Owner::Task(0), a.clone(), imp.clone(), &[true, true], 0.0);
        assert_eq!(h.harmony, a);
        let theta = [-0.7f64, 0.4];
        let h = harmony_score(Owner::Task(0), a, imp, &[true, false], 10.0);
        assert_eq!(h.harmony[0], 1.0 + 10.0 * theta[0].abs());
        assert_eq!(h.harmony[1], f64::INFINITY);
    }

    #[test]
    fn averaged_harmony_cases() {
        let g = gv(&[0.3, -1.0, 2.0]);
        let r = averaged_harmony(&[g.clone(), g.clone(), g.clone()]).unwrap();
        assert_eq!(r.score, 1.0);
        let neg = gv(&[-0.3, 1.0, -2.0]);
        let r = averaged_harmony(&[g, neg]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn averaged_harmony_matches_double_loop() {
        let g = random_grads(3, 16, 5);
        let r = averaged_harmony(&g).unwrap();
        let mut hat = [0.0; 16];
        for t in &g {
            for j in 0..16 {
                hat[j] += t.values[j] / 3.0;
            }
        }
        let mut s = 0.0;
        for t in &g {
            for j in 0..16 {
                s += t.values[j] * hat[j] / (t.values[j].abs() * hat[j].abs());
            }
        }
        assert!((r.score - s / 48.0).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&r.score));
        assert_eq!(r.pairs, 48);
    }

    #[test]
    fn objective_shapes() {
        let mut obj = LinearTasks::new(2, 1);
        let p = obj.init_params(0);
        assert_eq!(obj.loss_and_grad(1, &p).unwrap().1.len(), 8);
    }
}
