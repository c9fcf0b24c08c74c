//! Linear temperature and learning-rate schedules over optimizer steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

/// `tau_start = tau_end = 1` leaves cross-attention untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: u64,
    pub base_lr: f64,
}

impl ScheduleSpec {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: u64, base_lr: f64) -> Result<Self, ScheduleError> {
        let spec = ScheduleSpec { tau_start, tau_end, total_steps, base_lr };
        spec.validate()?;
        Ok(spec)
    }

    /// Constant unit temperature.
    pub fn without_temperature(total_steps: u64, base_lr: f64) -> Result<Self, ScheduleError> {
        Self::new(1.0, 1.0, total_steps, base_lr)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start && self.tau_start.is_finite()) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < tau_end <= tau_start, got tau_start={} tau_end={}",
                self.tau_start, self.tau_end
            )));
        }
        if self.total_steps == 0 {
            return Err(ScheduleError::Invalid("total_steps must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(ScheduleError::Invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    fn check(&self, step: u64) -> Result<f64, ScheduleError> {
        if step > self.total_steps {
            return Err(ScheduleError::StepOutOfRange { step, total: self.total_steps });
        }
        Ok(step as f64 / self.total_steps as f64)
    }

    /// `(tau_end - tau_start) · step / total_steps + tau_start`
    pub fn temperature_at(&self, step: u64) -> Result<f64, ScheduleError> {
        let frac = self.check(step)?;
        if step == self.total_steps {
            return Ok(self.tau_end);
        }
        Ok((self.tau_end - self.tau_start) * frac + self.tau_start)
    }

    /// `base_lr · (1 - step / total_steps)`, no warmup.
    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        let frac = self.check(step)?;
        if step == self.total_steps {
            return Ok(0.0);
        }
        Ok(self.base_lr * (1.0 - frac))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn temperature_endpoints_and_midpoint() {
        let s = ScheduleSpec::new(1.0, 0.5, 100, 1e-4).unwrap();
        assert_eq!(s.temperature_at(0).unwrap(), 1.0);
        assert_eq!(s.temperature_at(100).unwrap(), 0.5);
        assert_eq!(s.temperature_at(50).unwrap(), 0.75);
        assert_eq!(s.temperature_at(101), Err(ScheduleError::StepOutOfRange { step: 101, total: 100 }));
    }

    #[test]
    fn lr_endpoints_and_quarter() {
        let s = ScheduleSpec::new(1.0, 0.7, 400, 1e-4).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(400).unwrap(), 0.0);
        assert!((s.lr_at(100).unwrap() - 7.5e-5).abs() < 1e-18);
        assert!(s.lr_at(401).is_err());
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec::new(1.0, 1.2, 10, 1e-4).is_err());
        assert!(ScheduleSpec::new(1.0, 0.0, 10, 1e-4).is_err());
        assert!(ScheduleSpec::new(1.0, 0.5, 0, 1e-4).is_err());
        assert!(ScheduleSpec::new(1.0, 0.5, 10, 0.0).is_err());
        assert!(ScheduleSpec::without_temperature(10, 1e-3).is_ok());
    }

    proptest! {
        #[test]
        fn affine_and_monotone(tau_end in 0.05f64..1.0, total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
            let s = ScheduleSpec::new(1.0, tau_end, total, 1e-4).unwrap();
            let (a, b) = (a % (total + 1), b % (total + 1));
            if (a + b) % 2 == 0 {
                let mid = s.temperature_at((a + b) / 2).unwrap();
                prop_assert!((s.temperature_at(a).unwrap() + s.temperature_at(b).unwrap() - 2.0 * mid).abs() < 1e-12);
            }
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.temperature_at(lo).unwrap() >= s.temperature_at(hi).unwrap());
            prop_assert!(s.lr_at(lo).unwrap() >= s.lr_at(hi).unwrap());
        }

        #[test]
        fn constant_when_disabled(total in 1u64..1000, step in 0u64..1000) {
            let s = ScheduleSpec::without_temperature(total, 1e-3).unwrap();
            prop_assert_eq!(s.temperature_at(step % (total + 1)).unwrap(), 1.0);
        }
    }
}
