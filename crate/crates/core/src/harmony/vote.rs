use super::mask::{BitMask, Owner};
use crate::error::{Error, Result};

/// Bit `j` is set iff strictly more than `thresh` masks have it set.
pub fn vote_unseen_mask(masks: &[BitMask], thresh: usize) -> Result<BitMask> {
    let first = masks.first().ok_or_else(|| Error::config("no masks to vote over"))?;
    let n = first.len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::config("masks differ in length"));
    }
    let mut counts = vec![0usize; n];
    for m in masks {
        for (c, &b) in counts.iter_mut().zip(&m.bits) {
            *c += b as usize;
        }
    }
    Ok(BitMask {
        bits: counts.into_iter().map(|c| c > thresh).collect(),
        owner: Owner::Unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(ones: usize, n: usize) -> Vec<BitMask> {
        (0..n)
            .map(|i| BitMask {
                bits: vec![i < ones],
                owner: Owner::Task(i),
            })
            .collect()
    }

    #[test]
    fn strict_threshold() {
        assert!(vote_unseen_mask(&column(30, 50), 25).unwrap().bits[0]);
        assert!(!vote_unseen_mask(&column(25, 50), 25).unwrap().bits[0]);
        assert!(vote_unseen_mask(&column(26, 50), 25).unwrap().bits[0]);
        assert!(vote_unseen_mask(&[], 1).is_err());
    }
}
