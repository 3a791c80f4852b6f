use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Learning-rate policy applied once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    Constant,
    /// Multiplies the rate by `factor` after `patience` epochs without a
    /// new best monitored loss, never going below `min_lr`.
    Plateau { factor: f32, patience: usize, min_lr: f32 },
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy::Plateau {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub initial_lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_policy: LrPolicy,
    /// Side of the square random crops fed to the network; `None` trains
    /// on whole (equally sized, square when augmenting) images.
    pub patch_size: Option<usize>,
    /// Random dihedral transforms of each training sample.
    pub augment: bool,
    /// Caps the number of validation images scored per epoch.
    pub max_val_images: Option<usize>,
    pub seed: u64,
}

impl TrainSchedule {
    /// Full-size schedule: 200 epochs of 400 steps, batch 128, lr 4e-4.
    pub fn paper(seed: u64) -> Self {
        Self {
            initial_lr: 0.0004,
            batch_size: 128,
            epochs: 200,
            steps_per_epoch: 400,
            lr_policy: LrPolicy::default(),
            patch_size: None,
            augment: true,
            max_val_images: None,
            seed,
        }
    }

    /// Reduced schedule for a single CPU: 20 epochs of 50 steps, batch 16,
    /// 48×48 crops.
    pub fn desk(seed: u64) -> Self {
        Self {
            initial_lr: 0.0004,
            batch_size: 16,
            epochs: 20,
            steps_per_epoch: 50,
            lr_policy: LrPolicy::Plateau {
                factor: 0.5,
                patience: 3,
                min_lr: 1e-7,
            },
            patch_size: Some(48),
            augment: true,
            max_val_images: Some(64),
            seed,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.initial_lr > 0.0
            && self.initial_lr.is_finite()
            && self.batch_size > 0
            && self.epochs > 0
            && self.steps_per_epoch > 0
            && self.patch_size != Some(0)
            && self.max_val_images != Some(0);
        if !positive {
            return Err(Error::invalid(format!("schedule values must be positive: {self:?}")));
        }
        if let LrPolicy::Plateau { factor, patience, min_lr } = self.lr_policy {
            if !(factor > 0.0 && factor < 1.0) || patience == 0 || !(min_lr >= 0.0) {
                return Err(Error::invalid(format!(
                    "plateau policy needs 0 < factor < 1, patience > 0, min_lr >= 0: {:?}",
                    self.lr_policy
                )));
            }
        }
        Ok(())
    }
}

/// Tracks the monitored loss and yields the rate for the next epoch.
#[derive(Debug, Clone)]
pub(crate) struct LrScheduler {
    policy: LrPolicy,
    lr: f32,
    best: f64,
    wait: usize,
}

impl LrScheduler {
    pub fn new(policy: LrPolicy, lr: f32) -> Self {
        Self {
            policy,
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn observe(&mut self, monitored: f64) -> f32 {
        if let LrPolicy::Plateau { factor, patience, min_lr } = self.policy {
            if monitored < self.best {
                self.best = monitored;
                self.wait = 0;
            } else {
                self.wait += 1;
                if self.wait >= patience {
                    self.lr = (self.lr * factor).max(min_lr.min(self.lr));
                    self.wait = 0;
                }
            }
        }
        self.lr
    }
}
