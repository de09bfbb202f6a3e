use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base: f64,
    warmup: usize,
    total: usize,
    floor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: usize, total: usize, floor: f64) -> Result<Self> {
        if total <= warmup {
            return Err(Error::Config(format!(
                "total steps ({total}) must exceed warmup steps ({warmup})"
            )));
        }
        if !(floor >= 0.0 && base >= floor) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= floor ({floor}) <= base ({base})"
            )));
        }
        Ok(Self {
            base,
            warmup,
            total,
            floor,
        })
    }

    /// Warmup of 5% of `total` (rounded), decaying to zero.
    pub fn with_default_warmup(base: f64, total: usize) -> Result<Self> {
        let warmup = ((total as f64) * 0.05).round() as usize;
        Self::new(base, warmup.min(total.saturating_sub(1)), total, 0.0)
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Rate at step `t`; steps past the end return the floor.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t > self.total {
            return self.floor;
        }
        if t < self.warmup {
            return self.base * t as f64 / self.warmup as f64;
        }
        let progress = (t - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (PI * progress).cos())
    }
}
