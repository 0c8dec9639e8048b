use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::{active_count, BitMask, Owner};
use crate::error::{Error, Result};
use crate::grad::{LayerSegment, Layout, SegmentKind};

/// Raw ERK ratio `(fan_in + fan_out) / (fan_in · fan_out)`.
pub fn erk_ratio(fan_in: usize, fan_out: usize) -> f64 {
    (fan_in + fan_out) as f64 / (fan_in * fan_out) as f64
}

fn is_sparsifiable(seg: &LayerSegment) -> bool {
    matches!(seg.kind, SegmentKind::LinearWeight | SegmentKind::Embedding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErkPlan {
    /// Global scale applied to every raw ratio; 0 when nothing is sparsified.
    pub epsilon: f64,
    /// Active coordinates per segment, summing to the global budget.
    pub counts: Vec<usize>,
}

impl ErkPlan {
    pub fn densities(&self, layout: &Layout) -> Vec<f64> {
        self.counts
            .iter()
            .zip(layout.segments())
            .map(|(&c, s)| c as f64 / s.size as f64)
            .collect()
    }
}

/// Largest-remainder rounding of real targets to integers summing to `total`,
/// ties going to the lowest index.
fn apportion(targets: &[f64], caps: &[usize], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets
        .iter()
        .zip(caps)
        .map(|(&t, &c)| ((t + 1e-9).floor().max(0.0) as usize).min(c))
        .collect();
    let assigned: usize = counts.iter().sum();
    // remainders quantized so targets equal up to rounding noise tie exactly
    let key = |l: usize| ((targets[l] - counts[l] as f64) * 1e9).round() as i64;
    let mut order: Vec<usize> = (0..targets.len()).filter(|&l| counts[l] < caps[l]).collect();
    order.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
    let mut left = total.saturating_sub(assigned);
    while left > 0 {
        let mut progressed = false;
        for &l in &order {
            if left == 0 {
                break;
            }
            if counts[l] < caps[l] {
                counts[l] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    counts
}

/// Per-segment active counts for sparsity `s`.
///
/// Linear and embedding matrices share one scale on their raw ratio, capped
/// at density 1 with the scale re-solved over the uncapped rest. Bias and
/// norm segments stay dense.
pub fn erk_plan(layout: &Layout, sparsity: f64) -> Result<ErkPlan> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let segs = layout.segments();
    let budget = active_count(layout.len(), sparsity);
    if budget == layout.len() {
        return Ok(ErkPlan {
            epsilon: 0.0,
            counts: segs.iter().map(|s| s.size).collect(),
        });
    }
    let dense: usize = segs.iter().filter(|s| !is_sparsifiable(s)).map(|s| s.size).sum();
    if dense > budget {
        return Err(Error::config(format!(
            "sparsity {sparsity} leaves {budget} active coordinates but {dense} belong to dense segments"
        )));
    }
    let remaining = (budget - dense) as f64;
    let raw: Vec<f64> = segs.iter().map(|s| erk_ratio(s.fan_in, s.fan_out)).collect();
    let mut capped: Vec<bool> = segs.iter().map(|s| !is_sparsifiable(s)).collect();
    let mut epsilon = 0.0;
    loop {
        let capped_sum: f64 = segs
            .iter()
            .zip(&capped)
            .filter(|(s, &c)| c && is_sparsifiable(s))
            .map(|(s, _)| s.size as f64)
            .sum();
        let denom: f64 = segs
            .iter()
            .enumerate()
            .filter(|(l, _)| !capped[*l])
            .map(|(l, s)| raw[l] * s.size as f64)
            .sum();
        if denom == 0.0 {
            break;
        }
        epsilon = (remaining - capped_sum) / denom;
        let mut changed = false;
        for l in 0..segs.len() {
            if !capped[l] && epsilon * raw[l] >= 1.0 {
                capped[l] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let targets: Vec<f64> = segs
        .iter()
        .enumerate()
        .map(|(l, s)| {
            if capped[l] {
                s.size as f64
            } else {
                epsilon * raw[l] * s.size as f64
            }
        })
        .collect();
    let caps: Vec<usize> = segs.iter().map(|s| s.size).collect();
    let counts = apportion(&targets, &caps, budget);
    if counts.iter().sum::<usize>() != budget {
        return Err(Error::config("ERK budget cannot be met"));
    }
    Ok(ErkPlan { epsilon, counts })
}

/// Samples a mask following [`erk_plan`], uniformly without replacement within
/// each segment.
pub fn erk_init(layout: &Layout, sparsity: f64, seed: u64, owner: Owner) -> Result<(ErkPlan, BitMask)> {
    let plan = erk_plan(layout, sparsity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = BitMask::zeros(layout.len(), owner);
    for (seg, &count) in layout.segments().iter().zip(&plan.counts) {
        if count == seg.size {
            mask.bits[seg.range()].iter_mut().for_each(|b| *b = true);
            continue;
        }
        for j in sample(&mut rng, seg.size, count) {
            mask.bits[seg.offset + j] = true;
        }
    }
    Ok((plan, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layers() -> Layout {
        let mut l = Layout::new();
        l.push("a", 4, 8, SegmentKind::LinearWeight);
        l.push("b", 8, 2, SegmentKind::LinearWeight);
        l
    }

    fn bisect_counts(layout: &Layout, sparsity: f64) -> Vec<usize> {
        let n = layout.len();
        let budget = ((1.0 - sparsity) * n as f64).round() as usize;
        let segs = layout.segments();
        let fill = |eps: f64| -> f64 {
            segs.iter()
                .map(|s| {
                    if is_sparsifiable(s) {
                        (eps * erk_ratio(s.fan_in, s.fan_out)).min(1.0) * s.size as f64
                    } else {
                        s.size as f64
                    }
                })
                .sum()
        };
        let (mut lo, mut hi) = (0.0, 1e6);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if fill(mid) < budget as f64 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eps = 0.5 * (lo + hi);
        let targets: Vec<f64> = segs
            .iter()
            .map(|s| {
                if is_sparsifiable(s) {
                    (eps * erk_ratio(s.fan_in, s.fan_out)).min(1.0) * s.size as f64
                } else {
                    s.size as f64
                }
            })
            .collect();
        // independent largest-remainder rounding
        let mut counts: Vec<usize> = targets.iter().map(|t| (t + 1e-9).floor() as usize).collect();
        let mut rem: Vec<(i64, usize)> = targets
            .iter()
            .enumerate()
            .map(|(l, t)| (((t - counts[l] as f64) * 1e9).round() as i64, l))
            .collect();
        rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut left = budget - counts.iter().sum::<usize>();
        for (_, l) in rem {
            if left == 0 {
                break;
            }
            if counts[l] < segs[l].size {
                counts[l] += 1;
                left -= 1;
            }
        }
        counts
    }

    #[test]
    fn raw_ratio_single_layer() {
        assert_eq!(erk_ratio(4, 8), 0.375);
    }

    #[test]
    fn zero_sparsity_is_dense() {
        let (_, m) = erk_init(&two_layers(), 0.0, 3, Owner::Task(0)).unwrap();
        assert!(m.bits.iter().all(|&b| b));
    }

    #[test]
    fn two_layer_budget_matches_bisection() {
        let l = two_layers();
        let plan = erk_plan(&l, 0.2).unwrap();
        assert_eq!(plan.counts, bisect_counts(&l, 0.2));
        assert_eq!(plan.counts.iter().sum::<usize>(), 38);
        assert_eq!(plan.counts, vec![22, 16]);
    }

    #[test]
    fn dense_segments_stay_dense() {
        let mut l = two_layers();
        l.push("b_bias", 1, 2, SegmentKind::Bias);
        l.push("ln", 1, 8, SegmentKind::NormScale);
        let (plan, m) = erk_init(&l, 0.3, 1, Owner::Task(2)).unwrap();
        assert_eq!(plan.counts[2], 2);
        assert_eq!(plan.counts[3], 8);
        assert_eq!(m.popcount(), active_count(l.len(), 0.3));
        assert!(erk_plan(&l, 0.9).is_err());
        assert!(erk_plan(&l, 1.0).is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let l = two_layers();
        let a = erk_init(&l, 0.5, 7, Owner::Task(0)).unwrap().1;
        let b = erk_init(&l, 0.5, 7, Owner::Task(0)).unwrap().1;
        let c = erk_init(&l, 0.5, 8, Owner::Task(0)).unwrap().1;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn popcount_and_bisection(
            dims in prop::collection::vec((1usize..12, 1usize..12), 1..5),
            s in 0.0f64..0.95,
            seed in 0u64..1000,
        ) {
            let mut l = Layout::new();
            for (i, (a, b)) in dims.iter().enumerate() {
                l.push(format!("w{i}"), *a, *b, SegmentKind::LinearWeight);
            }
            let (plan, m) = erk_init(&l, s, seed, Owner::Task(0)).unwrap();
            prop_assert_eq!(m.popcount(), active_count(l.len(), s));
            for (seg, &c) in l.segments().iter().zip(&plan.counts) {
                prop_assert_eq!(m.bits[seg.range()].iter().filter(|&&b| b).count(), c);
            }
            prop_assert_eq!(plan.counts, bisect_counts(&l, s));
        }
    }
}
