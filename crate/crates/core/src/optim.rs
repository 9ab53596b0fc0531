//! Adam with coupled L2 regularization and a constant-then-exponential
//! learning-rate schedule.

use crate::error::{invalid_config, invalid_input, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Added to the gradient as `l2_weight · θ` before the moment updates.
    pub l2_weight: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            l2_weight: 1e-6,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(invalid_config!("adam betas must lie in (0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) || !(self.l2_weight >= 0.0) || !self.l2_weight.is_finite() {
            return Err(invalid_config!("adam epsilon must be > 0 and l2 weight >= 0"));
        }
        Ok(())
    }
}

/// Constant `start` until `decay_start`, then exponential interpolation
/// reaching `end` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_start: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(invalid_config!("learning rates must be positive and finite"));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        if step <= self.decay_start || self.total_steps <= self.decay_start {
            return self.start;
        }
        let span = (self.total_steps - self.decay_start) as f64;
        let frac = ((step - self.decay_start) as f64 / span).min(1.0);
        self.start * (self.end / self.start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix<f64>>,
    pub v: Vec<Matrix<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [Matrix<f64>], grads: &[Matrix<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(invalid_input!("parameter, gradient and moment counts differ"));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let c2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(invalid_input!("gradient shape {:?} != parameter {:?}", g.shape(), p.shape()));
            }
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let g = g + cfg.l2_weight * *p;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Matrix<f64>> {
        vec![
            Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap(),
            Matrix::from_vec(2, 1, vec![0.0, 3.0]).unwrap(),
        ]
    }

    #[test]
    fn zero_gradient_without_l2_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let g: Vec<_> = p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            l2_weight: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            st.step(&cfg, 1e-3, &mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_l2_shrinks_towards_zero() {
        let mut p = params();
        let before = p.clone();
        let g: Vec<_> = p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let mut st = AdamState::new(&p);
        st.step(&AdamConfig::default(), 1e-3, &mut p, &g).unwrap();
        for (a, b) in p.iter().zip(&before) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                // first bias-corrected step moves each non-zero entry by
                // about lr against its sign
                if *y == 0.0 {
                    assert_eq!(x, y);
                } else {
                    assert!(x.abs() < y.abs());
                    assert!((y - x).abs() <= 1e-3 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap()];
        let g = vec![Matrix::from_vec(1, 1, vec![0.5]).unwrap()];
        let cfg = AdamConfig {
            l2_weight: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&p);
        st.step(&cfg, 0.1, &mut p, &g).unwrap();
        // m̂ = 0.5, v̂ = 0.25
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-6);
        assert!((p[0].as_slice()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            start: 1e-3,
            end: 1e-5,
            decay_start: 100,
            total_steps: 1000,
        };
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(100), 1e-3);
        assert!((s.at(550) - 1e-4).abs() < 1e-15);
        assert!((s.at(1000) - 1e-5).abs() < 1e-18);
        assert!((s.at(5000) - 1e-5).abs() < 1e-18);
        assert!(s.at(300) < s.at(200));
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 0.0, ..Default::default() }.validate().is_err());
    }
}
