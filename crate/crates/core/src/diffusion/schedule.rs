use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear per-step variances and their cumulative signal retention.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    zeta_start: f64,
    zeta_end: f64,
    /// `zeta[t - 1]` is the variance added at step `t`.
    zeta: Vec<f64>,
    /// `alpha_bar[0] == 1`; `alpha_bar[t]` for `t` in `1..=T`.
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub zeta_start: f64,
    pub zeta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            zeta_start: 1e-4,
            zeta_end: 0.02,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(steps: usize, zeta_start: f64, zeta_end: f64) -> Result<Self, DiffusionError> {
        if steps < 1 {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        if !(zeta_start > 0.0 && zeta_start <= zeta_end && zeta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < start <= end < 1, got start {zeta_start}, end {zeta_end}"
            )));
        }
        let zeta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    zeta_start
                } else {
                    zeta_start + (zeta_end - zeta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for z in &zeta {
            acc *= 1.0 - z;
            alpha_bar.push(acc);
        }
        Ok(Self {
            zeta_start,
            zeta_end,
            zeta,
            alpha_bar,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self, DiffusionError> {
        Self::new(p.steps, p.zeta_start, p.zeta_end)
    }

    /// Schedule given directly by its cumulative products (index 0 excluded).
    /// Values must lie in (0, 1] and not increase; equal neighbours are
    /// allowed so tests can pin `alpha_bar == 1`.
    pub fn from_alpha_bar(values: &[f64]) -> Result<Self, DiffusionError> {
        if values.is_empty() {
            return Err(DiffusionError::InvalidSchedule("empty schedule".into()));
        }
        let mut alpha_bar = vec![1.0];
        let mut zeta = Vec::with_capacity(values.len());
        for &a in values {
            let prev = *alpha_bar.last().unwrap();
            if !(a > 0.0 && a <= prev) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "alpha_bar must lie in (0, {prev}], got {a}"
                )));
            }
            zeta.push(1.0 - a / prev);
            alpha_bar.push(a);
        }
        Ok(Self {
            zeta_start: zeta[0],
            zeta_end: *zeta.last().unwrap(),
            zeta,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps(),
            zeta_start: self.zeta_start,
            zeta_end: self.zeta_end,
        }
    }

    pub fn steps(&self) -> usize {
        self.zeta.len()
    }

    pub fn zeta(&self, t: usize) -> f64 {
        self.zeta[t - 1]
    }

    /// Valid for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::InvalidTimestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::new(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_product() {
        let s = DiffusionSchedule::new(1000, 1e-4, 0.02).unwrap();
        // independent log-space product
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 0.01);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!((s.zeta(1) - 1e-4).abs() < 1e-18);
        assert!((s.zeta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        assert!(matches!(
            DiffusionSchedule::new(10, 1e-4, 1.0),
            Err(DiffusionError::InvalidSchedule(_))
        ));
        assert!(DiffusionSchedule::new(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::new(10, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::new(0, 0.1, 0.1).is_err());
        assert!(DiffusionSchedule::from_alpha_bar(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn explicit_alpha_bar() {
        let s = DiffusionSchedule::from_alpha_bar(&[1.0, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
        assert_eq!(s.alpha_bar(2), 0.5);
        assert_eq!(s.zeta(2), 0.5);
    }
}
