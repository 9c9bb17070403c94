use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    #[default]
    None,
    /// `lr0 * factor` from `decay_at` on.
    StepMult,
    /// `lr0 * factor^(epoch - decay_at)` from `decay_at` on.
    PerEpochMult,
}

/// The `[schedule]` section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs_base: usize,
    pub epochs_inc: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_mode: DecayMode,
    pub decay_at: usize,
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs_base: 100,
            epochs_inc: 60,
            batch_size: 32,
            lr0: 0.05,
            momentum: 0.9,
            decay_mode: DecayMode::None,
            decay_at: 20,
            decay_factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_base == 0 {
            return Err(Error::config("schedule.epochs_base", "must be positive"));
        }
        if self.epochs_inc == 0 {
            return Err(Error::config("schedule.epochs_inc", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("schedule.lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("schedule.momentum", "must lie in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::config("schedule.decay_factor", "must be positive"));
        }
        Ok(())
    }
}

/// Everything the training loop needs besides the model and the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()
    }

    pub fn epochs(&self, stage: usize) -> usize {
        if stage == 0 {
            self.schedule.epochs_base
        } else {
            self.schedule.epochs_inc
        }
    }
}

/// Learning rate at `epoch` (0-based, restarting every stage).
pub fn lr_at(sched: &ScheduleConfig, epoch: usize) -> f64 {
    let past = epoch.saturating_sub(sched.decay_at);
    match sched.decay_mode {
        DecayMode::None => sched.lr0,
        DecayMode::StepMult if epoch >= sched.decay_at => sched.lr0 * sched.decay_factor,
        DecayMode::StepMult => sched.lr0,
        DecayMode::PerEpochMult => sched.lr0 * sched.decay_factor.powi(past.min(i32::MAX as usize) as i32),
    }
}
