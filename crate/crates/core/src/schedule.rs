//! Per-epoch learning-rate and consistency-weight schedules.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Peak learning rate, reached at the end of the ramp-up.
    pub alpha_lr: f64,
    pub rampup_epochs: u32,
    pub total_epochs: u32,
    /// Consistency-weight ceiling.
    pub gamma_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha_lr: 1e-3,
            rampup_epochs: 50,
            total_epochs: 350,
            gamma_max: 10.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rampup_epochs == 0 || self.rampup_epochs > self.total_epochs {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "need 0 < rampup_epochs <= total_epochs, got {} and {}",
                    self.rampup_epochs, self.total_epochs
                ),
            ));
        }
        if !(self.alpha_lr > 0.0) || !self.alpha_lr.is_finite() {
            return Err(Error::invalid("schedule", format!("alpha_lr {}", self.alpha_lr)));
        }
        if !(self.gamma_max >= 0.0) || !self.gamma_max.is_finite() {
            return Err(Error::invalid("schedule", format!("gamma_max {}", self.gamma_max)));
        }
        Ok(())
    }
}

/// `e^(-5 (1 - m)^2)`, the sigmoid-shaped ramp for `m` in `[0, 1]`.
pub fn sigmoid_rampup(m: f64) -> f64 {
    let d = 1.0 - m.clamp(0.0, 1.0);
    (-5.0 * d * d).exp()
}

/// `(cos(π r) + 1) / 2` for `r` in `[0, 1]`.
pub fn cosine_rampdown(r: f64) -> f64 {
    ((std::f64::consts::PI * r.clamp(0.0, 1.0)).cos() + 1.0) / 2.0
}

pub fn lr_at_epoch(epoch: u32, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if epoch > cfg.total_epochs {
        return Err(Error::invalid(
            "lr_at_epoch",
            format!("epoch {epoch} beyond total {}", cfg.total_epochs),
        ));
    }
    if epoch <= cfg.rampup_epochs {
        return Ok(cfg.alpha_lr * sigmoid_rampup(epoch as f64 / cfg.rampup_epochs as f64));
    }
    let r = (epoch - cfg.rampup_epochs) as f64 / (cfg.total_epochs - cfg.rampup_epochs) as f64;
    Ok(cfg.alpha_lr * cosine_rampdown(r))
}

pub fn consistency_weight_at_epoch(epoch: u32, cfg: &ScheduleConfig) -> f64 {
    let m = (epoch as f64 / cfg.rampup_epochs.max(1) as f64).min(1.0);
    cfg.gamma_max * sigmoid_rampup(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            alpha_lr: 0.01,
            rampup_epochs: 50,
            total_epochs: 350,
            gamma_max: 10.0,
        }
    }

    #[test]
    fn learning_rate_landmarks() {
        let c = cfg();
        assert_eq!(lr_at_epoch(50, &c).unwrap(), 0.01);
        assert!((lr_at_epoch(0, &c).unwrap() - 0.01 * (-5.0f64).exp()).abs() < 1e-15);
        assert!(lr_at_epoch(350, &c).unwrap().abs() < 1e-15);
        assert!((lr_at_epoch(200, &c).unwrap() - 0.005).abs() < 1e-15);
        assert!(lr_at_epoch(351, &c).is_err());
    }

    #[test]
    fn consistency_weight_landmarks() {
        let c = cfg();
        assert_eq!(consistency_weight_at_epoch(50, &c), 10.0);
        assert_eq!(consistency_weight_at_epoch(300, &c), 10.0);
        assert!((consistency_weight_at_epoch(0, &c) - 10.0 * (-5.0f64).exp()).abs() < 1e-12);
        assert!((consistency_weight_at_epoch(25, &c) - 2.865048).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_rampup() {
        let c = ScheduleConfig { rampup_epochs: 0, ..cfg() };
        assert!(lr_at_epoch(0, &c).is_err());
        let c = ScheduleConfig { rampup_epochs: 400, ..cfg() };
        assert!(c.validate().is_err());
    }
}
