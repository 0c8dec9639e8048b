use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine flip-budget schedule over a run of `total` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipSchedule {
    pub eta_min: usize,
    pub eta_max: usize,
    pub total: u64,
    pub interval: u64,
}

impl FlipSchedule {
    pub fn new(eta_min: usize, eta_max: usize, total: u64, interval: u64, budget: usize) -> Result<Self> {
        if eta_min > eta_max {
            return Err(Error::config(format!("eta_min {eta_min} exceeds eta_max {eta_max}")));
        }
        if eta_max > budget {
            return Err(Error::config(format!(
                "eta_max {eta_max} exceeds the active budget {budget}"
            )));
        }
        if interval == 0 || total == 0 {
            return Err(Error::config("total iterations and update interval must be positive"));
        }
        Ok(Self {
            eta_min,
            eta_max,
            total,
            interval,
        })
    }

    pub fn alpha(&self, t: u64) -> usize {
        cosine_alpha(t, self)
    }
}

/// `⌈η_max + ½(η_min − η_max)(1 + cos(2πt/E))⌉`.
pub fn cosine_alpha(t: u64, s: &FlipSchedule) -> usize {
    let (lo, hi) = (s.eta_min as f64, s.eta_max as f64);
    let phase = 2.0 * std::f64::consts::PI * t as f64 / s.total as f64;
    let v = hi + 0.5 * (lo - hi) * (1.0 + phase.cos());
    let nearest = v.round();
    // cos(π/2) and friends land a few ulps off an integer
    let v = if (v - nearest).abs() < 1e-9 * (1.0 + hi) { nearest } else { v };
    (v.ceil().max(lo) as usize).min(s.eta_max)
}
