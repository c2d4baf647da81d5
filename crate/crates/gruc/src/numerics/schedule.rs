//! Learning-rate schedule: linear warmup into a cosine decay.
//!
//! Time is measured in fractional epochs. During `[0, warmup_epochs)` the rate
//! climbs linearly from `warmup_factor * base_lr` to `base_lr`; from there to
//! `total_epochs` it follows a half cosine down to `eta_min`, and past the end
//! it stays at `eta_min`. The two segments agree exactly at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    pub eta_min: f64,
    pub total_epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-3,
            warmup_epochs: 2.0,
            warmup_factor: 0.2,
            eta_min: 3.6e-4,
            total_epochs: 10.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.eta_min > 0.0
            && self.eta_min <= self.base_lr
            && (0.0..=1.0).contains(&self.warmup_factor)
            && self.warmup_epochs >= 0.0
            && self.total_epochs > self.warmup_epochs
            && [
                self.base_lr,
                self.warmup_factor,
                self.eta_min,
                self.warmup_epochs,
                self.total_epochs,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::domain("lr schedule", format!("{self:?}")))
        }
    }

    /// Learning rate at fractional epoch `t`.
    pub fn lr_at(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::domain("lr_at", format!("epoch {t}")));
        }
        let lr = if t < self.warmup_epochs {
            let frac = t / self.warmup_epochs;
            self.base_lr * (self.warmup_factor + (1.0 - self.warmup_factor) * frac)
        } else if t < self.total_epochs {
            let span = self.total_epochs - self.warmup_epochs;
            let s = (t - self.warmup_epochs) / span;
            self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + (std::f64::consts::PI * s).cos())
        } else {
            self.eta_min
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points_are_exact() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.0).unwrap(), 2e-4);
        assert_eq!(s.lr_at(2.0).unwrap(), 1e-3);
        assert_eq!(s.lr_at(10.0).unwrap(), 3.6e-4);
        assert_eq!(s.lr_at(11.5).unwrap(), 3.6e-4);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = LrSchedule::default();
        let before = s.lr_at(2.0 - 1e-9).unwrap();
        let after = s.lr_at(2.0).unwrap();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn midpoint_of_cosine_is_average() {
        let s = LrSchedule::default();
        // At s = 1/2 the cosine term vanishes.
        let mid = s.lr_at(6.0).unwrap();
        assert!((mid - 0.5 * (1e-3 + 3.6e-4)).abs() < 1e-15);
    }

    #[test]
    fn negative_epoch_rejected() {
        assert!(LrSchedule::default().lr_at(-0.1).is_err());
    }

    #[test]
    fn degenerate_schedules_rejected() {
        let mut s = LrSchedule::default();
        s.total_epochs = 1.0; // less than warmup
        assert!(s.validate().is_err());
        let mut s = LrSchedule::default();
        s.eta_min = 2e-3; // above base
        assert!(s.validate().is_err());
    }
}
