//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleConfig {
    pub peak_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            peak_lr: 1e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl OneCycleConfig {
    pub fn initial_lr(&self) -> f64 {
        self.peak_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.peak_lr / self.final_div_factor
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && (0.0..=1.0).contains(&self.pct_start)
            && self.div_factor >= 1.0
            && self.final_div_factor >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid one-cycle settings {self:?}")))
        }
    }
}

/// Cosine interpolation written so both endpoints are hit exactly.
fn cosine(from: f64, to: f64, t: f64) -> f64 {
    let c = (PI * t).cos();
    from * (1.0 + c) / 2.0 + to * (1.0 - c) / 2.0
}

/// Cosine warmup from `peak/div_factor` to `peak` over the first
/// `pct_start·total` steps, then cosine decay to `peak/final_div_factor` at
/// the last step.
pub fn onecycle_lr(step: usize, total: usize, cfg: &OneCycleConfig) -> Result<f64> {
    if step >= total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warm = cfg.pct_start * total as f64;
    let s = step as f64;
    if s < warm {
        return Ok(cosine(cfg.initial_lr(), cfg.peak_lr, s / warm));
    }
    let span = (total - 1) as f64 - warm;
    let t = if span > 0.0 { (s - warm) / span } else { 0.0 };
    Ok(cosine(cfg.peak_lr, cfg.final_lr(), t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    OneCycle(OneCycleConfig),
    Constant { lr: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::OneCycle(OneCycleConfig::default())
    }
}

impl LrSchedule {
    pub fn lr(&self, step: usize, total: usize) -> Result<f64> {
        match self {
            LrSchedule::OneCycle(c) => onecycle_lr(step, total, c),
            LrSchedule::Constant { lr } if step < total => Ok(*lr),
            LrSchedule::Constant { .. } => Err(Error::StepOutOfRange { step, total }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::OneCycle(c) => c.validate(),
            LrSchedule::Constant { lr } if *lr >= 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::Constant { lr } => Err(Error::Config(format!("invalid constant lr {lr}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_exactly_at_warmup_end() {
        let cfg = OneCycleConfig::default();
        assert_eq!(onecycle_lr(300, 1000, &cfg).unwrap(), 1e-4);
        assert_eq!(onecycle_lr(30, 100, &cfg).unwrap(), 1e-4);
        assert_eq!(onecycle_lr(0, 1000, &cfg).unwrap(), 1e-4 / 25.0);
        assert_eq!(onecycle_lr(999, 1000, &cfg).unwrap(), 1e-4 / 1e4);
        assert!(matches!(
            onecycle_lr(1000, 1000, &cfg),
            Err(Error::StepOutOfRange { step: 1000, total: 1000 })
        ));
    }

    #[test]
    fn monotone_phases_and_continuity() {
        let cfg = OneCycleConfig::default();
        let lrs: Vec<f64> = (0..1000).map(|s| onecycle_lr(s, 1000, &cfg).unwrap()).collect();
        for s in 1..1000 {
            if s <= 300 {
                assert!(lrs[s] >= lrs[s - 1], "warmup step {s}");
            } else {
                assert!(lrs[s] <= lrs[s - 1], "anneal step {s}");
            }
            assert!((lrs[s] - lrs[s - 1]).abs() < 1e-4 * 0.02);
        }
        assert!(lrs.iter().all(|&l| l <= 1e-4));
    }

    #[test]
    fn tiny_schedules_stay_in_range() {
        let cfg = OneCycleConfig::default();
        assert_eq!(onecycle_lr(0, 1, &cfg).unwrap(), cfg.initial_lr());
        for total in 1..6 {
            for s in 0..total {
                let lr = onecycle_lr(s, total, &cfg).unwrap();
                assert!(lr > 0.0 && lr <= cfg.peak_lr);
            }
        }
    }

    #[test]
    fn constant_schedule() {
        let s = LrSchedule::Constant { lr: 0.0 };
        assert_eq!(s.lr(3, 10).unwrap(), 0.0);
        assert!(s.validate().is_ok());
        assert!(LrSchedule::Constant { lr: -1.0 }.validate().is_err());
        let bad = OneCycleConfig {
            peak_lr: 0.0,
            ..OneCycleConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
