use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineAnnealing,
    LinearWarmupThenCosine,
    Constant,
}

/// Learning-rate schedule over `0..=total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub floor: f64,
}

impl ScheduleConfig {
    pub fn cosine(total_steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::CosineAnnealing,
            total_steps,
            warmup_steps: 0,
            floor: 0.0,
        }
    }

    pub fn warmup_cosine(total_steps: usize, warmup_steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearWarmupThenCosine,
            total_steps,
            warmup_steps,
            floor: 0.0,
        }
    }

    pub fn constant(total_steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            total_steps,
            warmup_steps: 0,
            floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(NumericsError::InvalidConfig("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(NumericsError::InvalidConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.floor >= 0.0) {
            return Err(NumericsError::InvalidConfig("floor must be >= 0".into()));
        }
        Ok(())
    }

    /// Scheduled value at `step` for a schedule peaking at `peak`.
    pub fn value(&self, peak: f64, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(NumericsError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Constant => peak,
            ScheduleKind::CosineAnnealing => cosine(peak, self.floor, step, self.total_steps),
            ScheduleKind::LinearWarmupThenCosine => {
                if step < self.warmup_steps {
                    peak * step as f64 / self.warmup_steps as f64
                } else if self.total_steps == self.warmup_steps {
                    peak
                } else {
                    cosine(
                        peak,
                        self.floor,
                        step - self.warmup_steps,
                        self.total_steps - self.warmup_steps,
                    )
                }
            }
        })
    }
}

fn cosine(peak: f64, floor: f64, step: usize, total: usize) -> f64 {
    if step == total {
        return floor;
    }
    let progress = step as f64 / total as f64;
    floor + (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = ScheduleConfig::cosine(100);
        assert_eq!(s.value(0.12, 0).unwrap(), 0.12);
        assert_eq!(s.value(0.12, 100).unwrap(), 0.0);
        assert!((s.value(0.12, 50).unwrap() - 0.06).abs() < 1e-15);
        let floored = ScheduleConfig { floor: 0.01, ..s };
        assert_eq!(floored.value(0.12, 100).unwrap(), 0.01);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = ScheduleConfig::warmup_cosine(100, 10);
        assert_eq!(s.value(1.0, 0).unwrap(), 0.0);
        assert!((s.value(1.0, 5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(s.value(1.0, 10).unwrap(), 1.0);
        assert_eq!(s.value(1.0, 100).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        assert!(ScheduleConfig::cosine(10).value(1.0, 11).is_err());
        let bad = ScheduleConfig::warmup_cosine(10, 11);
        assert!(bad.value(1.0, 0).is_err());
    }
}
