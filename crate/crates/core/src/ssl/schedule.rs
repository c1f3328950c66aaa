//! Momentum and temperature schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn progress(step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::config(format!("step {step} beyond total_steps {total_steps}")));
    }
    Ok(step as f64 / total_steps as f64)
}

/// `m_t = 1 − (1 − m₀)·(cos(π·step/T) + 1)/2`, rising from `m₀` to 1.
pub fn momentum_schedule(momentum_0: f64, step: usize, total_steps: usize) -> Result<f64> {
    let s = progress(step, total_steps)?;
    Ok(1.0 - (1.0 - momentum_0) * ((PI * s).cos() + 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRule {
    /// Half-cosine ramp from `tau_min` to `tau_max`.
    #[default]
    CosineRamp,
    /// Straight line from `tau_min` to `tau_max`.
    Linear,
    /// `tau_min` throughout.
    Constant,
}

pub fn tau_schedule(rule: TauRule, tau_min: f64, tau_max: f64, step: usize, total_steps: usize) -> Result<f64> {
    let s = progress(step, total_steps)?;
    Ok(match rule {
        TauRule::CosineRamp => tau_max - (tau_max - tau_min) * (1.0 + (PI * s).cos()) / 2.0,
        TauRule::Linear => tau_min + (tau_max - tau_min) * s,
        TauRule::Constant => tau_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_endpoints() {
        assert_eq!(momentum_schedule(0.996, 0, 100).unwrap(), 0.996);
        assert_eq!(momentum_schedule(0.996, 100, 100).unwrap(), 1.0);
        assert!((momentum_schedule(0.996, 50, 100).unwrap() - 0.998).abs() < 1e-15);
        assert!(momentum_schedule(0.996, 101, 100).is_err());
    }

    #[test]
    fn tau_ramp() {
        let r = TauRule::CosineRamp;
        assert!((tau_schedule(r, 0.1, 0.2, 0, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!((tau_schedule(r, 0.1, 0.2, 10, 10).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tau_schedule(r, 0.15, 0.15, 3, 10).unwrap(), 0.15);
        let mut prev = 0.0;
        for s in 0..=40 {
            let t = tau_schedule(r, 0.1, 0.2, s, 40).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }
}
