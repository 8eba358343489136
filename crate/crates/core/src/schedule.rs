//! DDPM noise schedule: cumulative products of (1 - beta_t) for a linear
//! beta ramp, indexed 0..=T with the convention alphas_cumprod[0] = 1.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    total_steps: usize,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.total_steps;
        if t == 0 {
            return Err(CoreError::Config("schedule needs total_steps >= 1".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end) {
            return Err(CoreError::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{}, {}]",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(t + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for i in 0..t {
            let beta = if t == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(NoiseSchedule {
            total_steps: t,
            alphas_cumprod,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Cumulative alpha at timestep `t` (0..=T); alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_strictly_decreasing_from_one() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alphas_cumprod().len(), 1001);
        for w in s.alphas_cumprod().windows(2) {
            assert!(w[1] < w[0], "alphas_cumprod must strictly decrease");
            assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = ScheduleConfig {
            beta_start: 0.0,
            ..Default::default()
        };
        assert!(NoiseSchedule::new(&cfg).is_err());
    }
}
