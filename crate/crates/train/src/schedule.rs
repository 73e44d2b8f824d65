//! Epoch plan: critic updates per epoch, noise-square phases and the epochs
//! at which checkpoints are taken.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub total_epochs: usize,
    pub critic_steps_normal: usize,
    pub critic_steps_boosted: usize,
    /// Epochs `[0, boost_head_epochs)` use the boosted critic count.
    pub boost_head_epochs: usize,
    /// Epochs divisible by this use the boosted critic count.
    pub boost_every: usize,
    /// Fractions of `total_epochs` at which the noise square moves, then disappears.
    pub noise_phase_bounds: [f64; 3],
    /// Fractional `(x, y)` centre of the square in each phase.
    pub noise_positions: [(f64, f64); 3],
    pub noise_square_px: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 1000,
            critic_steps_normal: 5,
            critic_steps_boosted: 100,
            boost_head_epochs: 25,
            boost_every: 100,
            noise_phase_bounds: [0.4, 0.6, 0.8],
            noise_positions: [(0.5, 0.5), (0.35, 0.35), (0.65, 0.65)],
            noise_square_px: 10,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if self.critic_steps_normal == 0 || self.critic_steps_boosted == 0 {
            return bad("critic step counts must be positive".into());
        }
        if self.boost_every == 0 {
            return bad("boost_every must be positive".into());
        }
        let b = self.noise_phase_bounds;
        if !(0.0 < b[0] && b[0] < b[1] && b[1] < b[2] && b[2] < 1.0) {
            return bad(format!("noise_phase_bounds must be strictly increasing inside (0, 1), got {b:?}"));
        }
        for &(x, y) in &self.noise_positions {
            if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return bad(format!("noise position ({x}, {y}) lies outside the unit square"));
            }
        }
        if self.noise_square_px == 0 {
            return bad("noise_square_px must be positive".into());
        }
        let c = self.checkpoint_epochs();
        if c[0] == 0 || c.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("total_epochs {} is too small to separate the checkpoints {c:?}", self.total_epochs));
        }
        Ok(())
    }

    pub fn is_boosted(&self, epoch: usize) -> bool {
        epoch < self.boost_head_epochs || epoch % self.boost_every == 0
    }

    pub fn critic_steps(&self, epoch: usize) -> usize {
        if self.is_boosted(epoch) {
            self.critic_steps_boosted
        } else {
            self.critic_steps_normal
        }
    }

    /// Number of completed epochs after which each checkpoint is taken: one
    /// per phase bound plus the end of training.
    pub fn checkpoint_epochs(&self) -> [usize; 4] {
        let t = self.total_epochs;
        let at = |f: f64| (f * t as f64).round() as usize;
        [at(self.noise_phase_bounds[0]), at(self.noise_phase_bounds[1]), at(self.noise_phase_bounds[2]), t]
    }

    /// Noise phase active during epoch index `epoch`, `None` once the square
    /// has been removed.
    pub fn phase(&self, epoch: usize) -> Option<usize> {
        self.checkpoint_epochs()[..3].iter().position(|&c| epoch < c)
    }

    /// Total critic updates over the whole run.
    pub fn total_critic_steps(&self) -> usize {
        (0..self.total_epochs).map(|e| self.critic_steps(e)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_lambda: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.0, beta2: 0.9, gp_lambda: 10.0, batch_size: 4 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.gp_lambda >= 0.0 && self.gp_lambda.is_finite()) {
            return bad(format!("gp_lambda must be non-negative, got {}", self.gp_lambda));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> pairgan_nets::AdamConfig {
        pairgan_nets::AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_counts() {
        let s = TrainingSchedule::default();
        assert_eq!(s.critic_steps(10), 100);
        assert_eq!(s.critic_steps(24), 100);
        assert_eq!(s.critic_steps(25), 5);
        assert_eq!(s.critic_steps(300), 100);
        assert_eq!(s.critic_steps(301), 5);
        assert_eq!(s.checkpoint_epochs(), [400, 600, 800, 1000]);
    }

    #[test]
    fn phases_follow_checkpoints() {
        let s = TrainingSchedule { total_epochs: 10, ..Default::default() };
        assert_eq!(s.checkpoint_epochs(), [4, 6, 8, 10]);
        let phases: Vec<_> = (0..10).map(|e| s.phase(e)).collect();
        let want = [Some(0), Some(0), Some(0), Some(0), Some(1), Some(1), Some(2), Some(2), None, None];
        assert_eq!(phases, want);
    }

    #[test]
    fn tiny_runs_are_rejected() {
        assert!(TrainingSchedule { total_epochs: 2, ..Default::default() }.validate().is_err());
        assert!(TrainingSchedule { total_epochs: 5, ..Default::default() }.validate().is_ok());
        let s = TrainingSchedule { noise_phase_bounds: [0.4, 0.4, 0.8], ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn optimizer_bounds() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { gp_lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { gp_lambda: 0.0, ..Default::default() }.validate().is_ok());
    }
}
