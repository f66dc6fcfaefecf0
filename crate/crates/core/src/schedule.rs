//! Which objective feeds each step, and the learning rate at each step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of an objective. Two-objective runs use [`ObjectiveId::FORGET`]
/// and [`ObjectiveId::RETAIN`]; N-objective runs number them `0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectiveId(pub usize);

impl ObjectiveId {
    pub const FORGET: ObjectiveId = ObjectiveId(0);
    pub const RETAIN: ObjectiveId = ObjectiveId(1);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("forget"),
            1 => f.write_str("retain"),
            i => write!(f, "objective{i}"),
        }
    }
}

/// Round-robin plan: objective `i` owns `frequencies[i]` consecutive steps of
/// each period. The two-objective case is `[F_f, F_r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlternationSchedule {
    frequencies: Vec<u64>,
    total_steps: u64,
}

impl AlternationSchedule {
    /// Forget/retain alternation. `retain_frequency == 0` means forget-only.
    pub fn new(forget_frequency: u64, retain_frequency: u64, total_steps: u64) -> Result<Self> {
        Self::round_robin(vec![forget_frequency, retain_frequency], total_steps)
    }

    pub fn round_robin(frequencies: Vec<u64>, total_steps: u64) -> Result<Self> {
        match frequencies.first() {
            None => return Err(Error::invalid("frequencies", "at least one objective")),
            Some(0) => return Err(Error::invalid("forget_frequency", "must be >= 1")),
            Some(_) => {}
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be >= 1"));
        }
        Ok(Self {
            frequencies,
            total_steps,
        })
    }

    pub fn forget_frequency(&self) -> u64 {
        self.frequencies[0]
    }

    pub fn retain_frequency(&self) -> u64 {
        self.frequencies.get(1).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn n_objectives(&self) -> usize {
        self.frequencies.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn period(&self) -> u64 {
        self.frequencies.iter().sum()
    }

    /// Objective for 1-indexed step `t`: position `(t - 1) mod period`
    /// within the period picks the owner.
    pub fn objective_at(&self, t: u64) -> Result<ObjectiveId> {
        self.check_step(t)?;
        let mut pos = (t - 1) % self.period();
        for (i, &f) in self.frequencies.iter().enumerate() {
            if pos < f {
                return Ok(ObjectiveId(i));
            }
            pos -= f;
        }
        unreachable!("position is always inside the period")
    }

    /// True when step `t` closes a full period.
    pub fn is_period_end(&self, t: u64) -> bool {
        t > 0 && t.is_multiple_of(self.period())
    }

    fn check_step(&self, t: u64) -> Result<()> {
        if t == 0 || t > self.total_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.total_steps,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrShape {
    /// Linear ramp to the peak over the warmup, then linear decay to zero.
    #[default]
    WarmupLinearDecay,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub shape: LrShape,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(Error::invalid("peak_lr", "must be finite and >= 0"));
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be >= 1"));
        }
        if warmup_steps > total_steps {
            return Err(Error::invalid("warmup_steps", "must not exceed total_steps"));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
            shape: LrShape::WarmupLinearDecay,
        })
    }

    pub fn constant(lr: f64, total_steps: u64) -> Result<Self> {
        let mut s = Self::new(lr, 0, total_steps)?;
        s.shape = LrShape::Constant;
        Ok(s)
    }

    /// Warmup covering the first `1 / epochs` of the run.
    pub fn warmup_first_epoch(peak_lr: f64, total_steps: u64, epochs: u64) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        Self::new(peak_lr, total_steps / epochs, total_steps)
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.total_steps,
            });
        }
        if self.shape == LrShape::Constant {
            return Ok(self.peak_lr);
        }
        if t <= self.warmup_steps {
            return Ok(self.peak_lr * t as f64 / self.warmup_steps as f64);
        }
        // Decay segment anchored at max(warmup, 1) so that a zero warmup still
        // starts at the peak.
        let start = self.warmup_steps.max(1);
        if self.total_steps == start {
            return Ok(self.peak_lr);
        }
        let remaining = (self.total_steps - t) as f64 / (self.total_steps - start) as f64;
        Ok(self.peak_lr * remaining)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &AlternationSchedule, n: u64) -> String {
        (1..=n)
            .map(|t| match s.objective_at(t).unwrap() {
                ObjectiveId::FORGET => 'F',
                _ => 'R',
            })
            .collect()
    }

    #[test]
    fn one_forget_five_retain() {
        let s = AlternationSchedule::new(1, 5, 12).unwrap();
        assert_eq!(labels(&s, 12), "FRRRRRFRRRRR");
    }

    #[test]
    fn strict_alternation() {
        let s = AlternationSchedule::new(1, 1, 8).unwrap();
        assert_eq!(labels(&s, 8), "FRFRFRFR");
    }

    #[test]
    fn retain_free_schedule_is_forget_only() {
        let s = AlternationSchedule::new(2, 0, 50).unwrap();
        assert!((1..=50).all(|t| s.objective_at(t).unwrap() == ObjectiveId::FORGET));
    }

    #[test]
    fn out_of_range_steps_rejected() {
        let s = AlternationSchedule::new(1, 5, 10).unwrap();
        assert!(s.objective_at(0).is_err());
        assert!(s.objective_at(11).is_err());
        assert!(AlternationSchedule::new(0, 5, 10).is_err());
    }

    #[test]
    fn forget_steps_per_period_exhaustive() {
        for ff in 1..64u64 {
            for fr in 0..=(64 - ff) {
                let period = ff + fr;
                let s = AlternationSchedule::new(ff, fr, 3 * period).unwrap();
                for p in 0..3 {
                    let count = (1..=period)
                        .filter(|&k| s.objective_at(p * period + k).unwrap() == ObjectiveId::FORGET)
                        .count() as u64;
                    assert_eq!(count, ff, "F_f={ff} F_r={fr}");
                }
            }
        }
    }

    #[test]
    fn three_way_round_robin() {
        let s = AlternationSchedule::round_robin(vec![1, 2, 1], 8).unwrap();
        let got: Vec<usize> = (1..=8).map(|t| s.objective_at(t).unwrap().0).collect();
        assert_eq!(got, vec![0, 1, 1, 2, 0, 1, 1, 2]);
        assert!(s.is_period_end(4) && !s.is_period_end(5));
    }

    #[test]
    fn lr_without_warmup_starts_at_peak_and_ends_at_zero() {
        let s = LrSchedule::new(0.1, 0, 11).unwrap();
        assert_eq!(s.lr_at(1).unwrap(), 0.1);
        assert_eq!(s.lr_at(11).unwrap(), 0.0);
        assert!((s.lr_at(6).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn lr_pure_ramp() {
        let s = LrSchedule::new(0.2, 10, 10).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 0.2);
        assert!((s.lr_at(5).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lr_zero_peak() {
        let s = LrSchedule::new(0.0, 3, 20).unwrap();
        assert!((1..=20).all(|t| s.lr_at(t).unwrap() == 0.0));
    }

    #[test]
    fn lr_continuous_at_warmup_boundary() {
        let s = LrSchedule::new(1e-2, 60, 300).unwrap();
        assert_eq!(s.lr_at(60).unwrap(), 1e-2);
        let left = s.lr_at(59).unwrap();
        let right = s.lr_at(61).unwrap();
        // one-step slopes on both sides are bounded, so the jump at the
        // boundary is at most one step's worth of change
        assert!((s.lr_at(60).unwrap() - left - 1e-2 / 60.0).abs() < 1e-12);
        assert!((s.lr_at(60).unwrap() - right - 1e-2 / 240.0).abs() < 1e-12);
        assert!((1..=300).all(|t| s.lr_at(t).unwrap() >= 0.0));
        assert!(s.lr_at(301).is_err());
    }

    #[test]
    fn warmup_from_epochs() {
        let s = LrSchedule::warmup_first_epoch(1.0, 300, 5).unwrap();
        assert_eq!(s.warmup_steps, 60);
    }
}
