use super::gradients::RoundGradients;
use super::mask::BitMask;
use super::scores::{agreement_score, harmony_score, importance_score, mean_gradient, HarmonyReport, ImportanceKind};
use super::select::{arg_btm_k, arg_top_k};
use crate::error::{Error, Result};
use crate::grad::{GradVector, ParamVector};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskUpdateStats {
    pub requested: usize,
    pub removed: Vec<usize>,
    pub added: Vec<usize>,
    /// `requested − removed.len()`.
    pub shortfall: usize,
}

/// `g ⊙ mean ḡ`, the score used to pick coordinates to reactivate.
pub fn recovery_score(plain: &GradVector, mean_masked: &[f64]) -> Vec<f64> {
    plain.values.iter().zip(mean_masked).map(|(a, b)| a * b).collect()
}

/// Swaps up to `alpha` active coordinates for inactive ones.
///
/// Removes the lowest-harmony active coordinates, then activates the same
/// number of coordinates with the highest recovery score among those that
/// were inactive before the call.
pub fn update_mask(
    mask: &BitMask,
    harmony: &[f64],
    recovery: &[f64],
    alpha: usize,
) -> Result<(BitMask, MaskUpdateStats)> {
    let n = mask.len();
    if harmony.len() != n || recovery.len() != n {
        return Err(Error::config("score vectors do not match mask length"));
    }
    let candidates: Vec<f64> = recovery
        .iter()
        .zip(&mask.bits)
        .map(|(&r, &m)| if m { f64::NEG_INFINITY } else { r })
        .collect();
    let removable = harmony
        .iter()
        .zip(&mask.bits)
        .filter(|(h, &m)| m && h.is_finite())
        .count();
    let addable = candidates.iter().filter(|r| r.is_finite()).count();
    let k = alpha.min(removable).min(addable);

    let removed = arg_btm_k(harmony, k);
    let added = arg_top_k(&candidates, k);
    debug_assert!(removed.chosen.iter().all(|&j| mask.bits[j]));

    let mut next = mask.clone();
    for &j in &removed.chosen {
        next.bits[j] = false;
    }
    for &j in &added.chosen {
        next.bits[j] = true;
    }
    Ok((
        next,
        MaskUpdateStats {
            requested: alpha,
            removed: removed.chosen,
            added: added.chosen,
            shortfall: alpha - k,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct OwnerUpdate {
    pub mask: BitMask,
    pub stats: MaskUpdateStats,
    pub report: HarmonyReport,
}

/// One scoring round over every task mask, all scored against the same
/// gradient snapshot.
pub fn mask_update(
    round: &RoundGradients,
    masks: &[BitMask],
    params: &ParamVector,
    alpha: usize,
    lambda: f64,
    kind: ImportanceKind,
) -> Result<Vec<OwnerUpdate>> {
    if masks.len() != round.masked.len() || masks.len() != round.plain.len() {
        return Err(Error::config("mask count does not match gradient count"));
    }
    let mean = mean_gradient(&round.masked)?;
    let mut out = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let agreement = agreement_score(&round.masked, i)?;
        let importance = importance_score(
            kind,
            params,
            &mask.bits,
            round.masked_loss[i],
            &round.masked[i],
        );
        let report = harmony_score(mask.owner, agreement, importance, &mask.bits, lambda);
        let recovery = recovery_score(&round.plain[i], &mean);
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
    use crate::harmony::Owner;
    use crate::grad::{Layout, SegmentKind};
    use proptest::prelude::*;

    fn brute(mask: &[bool], harmony: &[f64], recovery: &[f64], alpha: usize) -> Vec<bool> {
        let mut act: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        act.sort_by(|&a, &b| harmony[a].partial_cmp(&harmony[b]).unwrap().then(a.cmp(&b)));
        let mut ina: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
        ina.sort_by(|&a, &b| recovery[b].partial_cmp(&recovery[a]).unwrap().then(a.cmp(&b)));
        let k = alpha.min(act.len()).min(ina.len());
        let mut out = mask.to_vec();
        for &j in &act[..k] {
            out[j] = false;
        }
        for &j in &ina[..k] {
            out[j] = true;
        }
        out
    }

    fn gv(v: &[f64]) -> GradVector {
        GradVector { values: v.to_vec() }
    }

    #[test]
    fn alpha_zero_is_noop() {
        let m = BitMask::from_runs(&[1, 2, 3], Owner::Task(0));
        let (next, st) = update_mask(&m, &[0.0; 6], &[1.0; 6], 0).unwrap();
        assert_eq!(next, m);
        assert!(st.removed.is_empty());
    }

    #[test]
    fn two_task_hand_instance() {
        let mut l = Layout::new();
        l.push("w", 2, 3, SegmentKind::LinearWeight);
        let p = ParamVector::from_values(l, vec![0.5, -0.1, 2.0, 0.3, -1.0, 0.05]).unwrap();
        let m0 = BitMask {
            bits: vec![true, true, true, true, false, false],
            owner: Owner::Task(0),
        };
        let m1 = BitMask {
            bits: vec![false, true, true, true, true, false],
            owner: Owner::Task(1),
        };
        let plain = vec![
            gv(&[1.0, -2.0, 0.5, 0.1, 3.0, -1.0]),
            gv(&[-1.0, 1.0, 0.5, -0.2, 1.0, 2.0]),
        ];
        let masked: Vec<GradVector> = plain
            .iter()
            .zip([&m0, &m1])
            .map(|(g, m)| {
                let mut g = g.clone();
                g.apply_mask(&m.bits);
                g
            })
            .collect();
        let round = RoundGradients {
            plain: plain.clone(),
            masked: masked.clone(),
            masked_loss: vec![1.0, 1.0],
        };
        let ups = mask_update(&round, &[m0.clone(), m1.clone()], &p, 2, 0.1, ImportanceKind::Magnitude).unwrap();
        for (i, m) in [&m0, &m1].into_iter().enumerate() {
            let mean: Vec<f64> = (0..6).map(|j| (masked[0].values[j] + masked[1].values[j]) / 2.0).collect();
            let h: Vec<f64> = (0..6)
                .map(|j| {
                    if m.bits[j] {
                        masked[i].values[j] * mean[j] + 0.1 * p.values()[j].abs()
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            let r: Vec<f64> = (0..6).map(|j| plain[i].values[j] * mean[j]).collect();
            assert_eq!(ups[i].mask.bits, brute(&m.bits, &h, &r, 2));
            assert_eq!(ups[i].mask.popcount(), m.popcount());
        }
        assert_eq!(ups[0].mask.bits, vec![true, true, false, false, true, true]);
    }

    proptest! {
        #[test]
        fn update_invariants(
            bits in prop::collection::vec(any::<bool>(), 1..40),
            h in prop::collection::vec(-4i32..4, 40),
            r in prop::collection::vec(-4i32..4, 40),
            alpha in 0usize..50,
        ) {
            let n = bits.len();
            let mask = BitMask { bits: bits.clone(), owner: Owner::Task(0) };
            let harmony: Vec<f64> = (0..n).map(|j| if bits[j] { h[j] as f64 } else { f64::INFINITY }).collect();
            let recovery: Vec<f64> = r[..n].iter().map(|&v| v as f64).collect();
            let (next, st) = update_mask(&mask, &harmony, &recovery, alpha).unwrap();
            prop_assert_eq!(next.popcount(), mask.popcount());
            prop_assert_eq!(st.removed.len(), st.added.len());
            for &j in &st.removed {
                prop_assert!(bits[j]);
                prop_assert!(!next.bits[j]);
            }
            for &j in &st.added {
                prop_assert!(!bits[j]);
            }
            prop_assert_eq!(next.bits, brute(&bits, &harmony, &recovery, alpha));
        }
    }
}
