use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Who a mask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Task(usize),
    Group(usize),
    /// Built by voting for a task not seen during training.
    Unseen,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Task(i) => write!(f, "task:{i}"),
            Owner::Group(i) => write!(f, "group:{i}"),
            Owner::Unseen => write!(f, "unseen"),
        }
    }
}

impl FromStr for Owner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::data(format!("bad mask owner {s:?}"));
        if s == "unseen" {
            return Ok(Owner::Unseen);
        }
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let id: usize = id.parse().map_err(|_| bad())?;
        match kind {
            "task" => Ok(Owner::Task(id)),
            "group" => Ok(Owner::Group(id)),
            _ => Err(bad()),
        }
    }
}

/// Number of active coordinates, `round((1 − s)·len)`, for sparsity `s`.
pub fn active_count(len: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * len as f64).round().max(0.0) as usize).min(len)
}

/// Binary mask over every parameter coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub bits: Vec<bool>,
    pub owner: Owner,
}

impl BitMask {
    pub fn ones(len: usize, owner: Owner) -> Self {
        Self {
            bits: vec![true; len],
            owner,
        }
    }

    pub fn zeros(len: usize, owner: Owner) -> Self {
        Self {
            bits: vec![false; len],
            owner,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    /// Run lengths, alternating and starting with a (possibly empty) run of zeros.
    pub fn runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut n = 0;
        for &b in &self.bits {
            if b == current {
                n += 1;
            } else {
                runs.push(n);
                current = b;
                n = 1;
            }
        }
        runs.push(n);
        runs
    }

    pub fn from_runs(runs: &[usize], owner: Owner) -> Self {
        let mut bits = Vec::with_capacity(runs.iter().sum());
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat(i % 2 == 1).take(r));
        }
        Self { bits, owner }
    }

    /// Serialized form: one JSON header line followed by one line of
    /// space-separated run lengths.
    pub fn to_rle_string(&self, sparsity: f64) -> String {
        let header = MaskHeader {
            owner: self.owner.to_string(),
            sparsity,
            popcount: self.popcount(),
            len: self.len(),
            encoding: "rle-v1".into(),
        };
        let runs: Vec<String> = self.runs().iter().map(|r| r.to_string()).collect();
        format!(
            "{}\n{}\n",
            serde_json::to_string(&header).expect("header serializes"),
            runs.join(" ")
        )
    }

    pub fn from_rle_str(text: &str) -> Result<(Self, f64)> {
        let mut lines = text.lines();
        let header_line = lines.next().ok_or_else(|| Error::data("empty mask file"))?;
        let header: MaskHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::data(format!("malformed mask header: {e}")))?;
        if header.encoding != "rle-v1" {
            return Err(Error::data(format!("unknown mask encoding {}", header.encoding)));
        }
        let body = lines.next().unwrap_or("");
        let runs = body
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("malformed run length: {e}")))?;
        let mask = BitMask::from_runs(&runs, header.owner.parse()?);
        if mask.len() != header.len {
            return Err(Error::data(format!(
                "runs cover {} bits but header says {}",
                mask.len(),
                header.len
            )));
        }
        if mask.popcount() != header.popcount {
            return Err(Error::data(format!(
                "runs hold {} ones but header says {}",
                mask.popcount(),
                header.popcount
            )));
        }
        Ok((mask, header.sparsity))
    }

    pub fn save(&self, path: &Path, sparsity: f64) -> Result<()> {
        fsutil::write_atomic(path, self.to_rle_string(sparsity).as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let text = fsutil::read_string(path)?;
        Self::from_rle_str(&text).map_err(|e| match e {
            Error::Data { message, .. } => Error::data_at(path, None, message),
            other => other,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskHeader {
    owner: String,
    sparsity: f64,
    popcount: usize,
    len: usize,
    encoding: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn active_count_examples() {
        assert_eq!(active_count(100, 0.2), 80);
        assert_eq!(active_count(6, 1.0 / 3.0), 4);
        assert_eq!(active_count(7, 0.0), 7);
    }

    #[test]
    fn header_validation() {
        let m = BitMask::from_runs(&[2, 3, 1], Owner::Group(2));
        let text = m.to_rle_string(0.5);
        let tampered = text.replace("\"popcount\":3", "\"popcount\":4");
        assert!(BitMask::from_rle_str(&tampered).is_err());
        let tampered = text.replace("2 3 1", "2 3 2");
        assert!(BitMask::from_rle_str(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in prop::collection::vec(any::<bool>(), 0..200), s in 0.0f64..1.0) {
            let m = BitMask { bits, owner: Owner::Task(7) };
            let (back, sp) = BitMask::from_rle_str(&m.to_rle_string(s)).unwrap();
            prop_assert_eq!(back, m);
            prop_assert_eq!(sp.to_bits(), s.to_bits());
        }
    }
}
