use std::cmp::Ordering;

/// Result of a bottom-k or top-k selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indicator: Vec<bool>,
    /// Chosen coordinates in ascending index order.
    pub chosen: Vec<usize>,
    /// How many of the requested `k` could not be selected.
    pub shortfall: usize,
}

fn select(scores: &[f64], k: usize, eligible: impl Fn(f64) -> bool, descending: bool) -> Selection {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| eligible(scores[j])).collect();
    let take = k.min(idx.len());
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        let o = scores[a].partial_cmp(&scores[b]).expect("finite scores");
        let o = if descending { o.reverse() } else { o };
        o.then(a.cmp(&b))
    };
    if take > 0 && take < idx.len() {
        idx.select_nth_unstable_by(take - 1, cmp);
    }
    idx.truncate(take);
    idx.sort_unstable();
    let mut indicator = vec![false; scores.len()];
    for &j in &idx {
        indicator[j] = true;
    }
    Selection {
        indicator,
        chosen: idx,
        shortfall: k - take,
    }
}

/// The `k` smallest finite scores; `+∞` and NaN entries are never chosen.
pub fn arg_btm_k(scores: &[f64], k: usize) -> Selection {
    select(scores, k, f64::is_finite, false)
}

/// The `k` largest finite scores; `−∞` and NaN entries are never chosen.
pub fn arg_top_k(scores: &[f64], k: usize) -> Selection {
    select(scores, k, f64::is_finite, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn signed_zeros_tie_by_index() {
        assert_eq!(arg_top_k(&[-0.0, 0.0, -0.0], 1).chosen, vec![0]);
        assert_eq!(arg_btm_k(&[0.0, -0.0], 1).chosen, vec![0]);
    }

    const INF: f64 = f64::INFINITY;

    fn brute(scores: &[f64], k: usize, top: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| scores[j].is_finite()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (scores[a], scores[b]);
            let o = if top { y.partial_cmp(&x) } else { x.partial_cmp(&y) };
            o.unwrap().then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.sort();
        idx
    }

    #[test]
    fn hand_cases() {
        assert_eq!(arg_btm_k(&[3.0, 1.0, 2.0], 1).indicator, vec![false, true, false]);
        assert_eq!(arg_btm_k(&[INF, 1.0, 2.0], 2).indicator, vec![false, true, true]);
        assert_eq!(arg_top_k(&[5.0, 5.0, 1.0], 1).indicator, vec![true, false, false]);
        assert_eq!(arg_btm_k(&[2.0, 2.0, 2.0], 2).chosen, vec![0, 1]);
    }

    #[test]
    fn shortfall_reported() {
        let s = arg_btm_k(&[INF, 1.0, INF], 3);
        assert_eq!(s.chosen, vec![1]);
        assert_eq!(s.shortfall, 2);
        let s = arg_top_k(&[f64::NEG_INFINITY, 0.0], 2);
        assert_eq!(s.chosen, vec![1]);
        assert_eq!(s.shortfall, 1);
        assert_eq!(arg_top_k(&[], 0).shortfall, 0);
    }

    proptest! {
        #[test]
        fn matches_full_sort(
            raw in prop::collection::vec(prop_oneof![Just(INF), Just(-INF), (-3i32..3).prop_map(f64::from)], 0..40),
            k in 0usize..45,
        ) {
            let btm = arg_btm_k(&raw, k);
            let top = arg_top_k(&raw, k);
            prop_assert_eq!(&btm.chosen, &brute(&raw, k, false));
            prop_assert_eq!(&top.chosen, &brute(&raw, k, true));
            prop_assert_eq!(btm.chosen.len() + btm.shortfall, k);
            for &j in &btm.chosen {
                prop_assert!(raw[j].is_finite());
            }
        }
    }
}
