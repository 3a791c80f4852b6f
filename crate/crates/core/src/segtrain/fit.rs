use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{LrScheduler, TrainSchedule};
use crate::dataio::Dihedral;
use crate::network::{UNet, WeightSnapshot};
use crate::nn::Adam;
use crate::{Error, Result};

/// One row of a training curve. Epoch 0 holds the scores before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    /// Mean training loss over the epoch (`None` for epoch 0).
    pub train_loss: Option<f64>,
    /// Mean of the secondary training term (distance loss for star heads).
    pub train_aux: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from("epoch,lr,train_loss,train_aux,val_loss,val_ap\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                opt(r.train_loss),
                opt(r.train_aux),
                opt(r.val_loss),
                opt(r.val_ap)
            ));
        }
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.train_loss).collect()
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation criterion.
    pub best: WeightSnapshot,
    pub best_epoch: usize,
    pub last: WeightSnapshot,
    pub curve: LossCurve,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepLoss {
    pub total: f64,
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Validation {
    pub loss: Option<f64>,
    /// Higher is better; takes precedence over the loss for model selection.
    pub score: Option<f64>,
}

pub(crate) trait Objective {
    /// Draws a batch, runs forward and backward (accumulating gradients) and
    /// returns the batch loss.
    fn step(&mut self, net: &mut UNet, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<StepLoss>;

    fn validate(&mut self, net: &mut UNet) -> Result<Validation>;
}

/// Runs `schedule` on `net`, selecting the snapshot with the best
/// validation score (or lowest validation loss, or lowest training loss).
pub(crate) fn fit(
    net: &mut UNet,
    objective: &mut dyn Objective,
    schedule: &TrainSchedule,
    provenance: &str,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(schedule.initial_lr);
    let mut lr_sched = LrScheduler::new(schedule.lr_policy, schedule.initial_lr);
    let mut curve = LossCurve::default();

    let v0 = objective.validate(net)?;
    curve.records.push(EpochRecord {
        epoch: 0,
        lr: schedule.initial_lr,
        train_loss: None,
        train_aux: None,
        val_loss: v0.loss,
        val_ap: v0.score,
    });
    let mut best = WeightSnapshot::capture(net, provenance, 0);
    let mut best_key = selection_key(&v0, f64::INFINITY);
    let mut best_epoch = 0;

    for epoch in 1..=schedule.epochs {
        adam.lr = lr_sched.lr();
        let (mut sum, mut aux_sum, mut aux_n) = (0.0, 0.0, 0usize);
        for step in 0..schedule.steps_per_epoch {
            let loss = objective.step(net, &mut rng, schedule.batch_size)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            adam.step(&mut net.params_mut());
            sum += loss.total;
            if let Some(a) = loss.aux {
                aux_sum += a;
                aux_n += 1;
            }
        }
        let train_loss = sum / schedule.steps_per_epoch as f64;
        let v = objective.validate(net)?;
        let lr_used = adam.lr;
        lr_sched.observe(v.loss.unwrap_or(train_loss));
        curve.records.push(EpochRecord {
            epoch,
            lr: lr_used,
            train_loss: Some(train_loss),
            train_aux: (aux_n > 0).then(|| aux_sum / aux_n as f64),
            val_loss: v.loss,
            val_ap: v.score,
        });
        log::info!(
            "{provenance} epoch {epoch}/{}: train {train_loss:.5} val_loss {:?} val_ap {:?} lr {lr_used:e}",
            schedule.epochs,
            v.loss,
            v.score
        );
        let key = selection_key(&v, train_loss);
        if key > best_key {
            best_key = key;
            best_epoch = epoch;
            best = WeightSnapshot::capture(net, provenance, epoch);
        }
    }
    let last = WeightSnapshot::capture(net, provenance, schedule.epochs);
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        curve,
    })
}

/// Lexicographic "larger is better" key: score, then negative loss.
fn selection_key(v: &Validation, train_loss: f64) -> (f64, f64) {
    let loss = v.loss.unwrap_or(train_loss);
    let loss = if loss.is_finite() { loss } else { f64::INFINITY };
    (v.score.unwrap_or(0.0), -loss)
}

/// Picks a random square window of side `size` (or the whole image).
pub(crate) fn random_window(rng: &mut ChaCha8Rng, dim: (usize, usize), size: Option<usize>) -> (usize, usize, usize, usize) {
    match size {
        None => (0, 0, dim.0, dim.1),
        Some(s) => {
            let r = rng.random_range(0..=dim.0 - s);
            let c = rng.random_range(0..=dim.1 - s);
            (r, c, s, s)
        }
    }
}

pub(crate) fn random_dihedral(rng: &mut ChaCha8Rng, augment: bool) -> Dihedral {
    if augment {
        *Dihedral::all().choose(rng).expect("eight elements")
    } else {
        Dihedral::IDENTITY
    }
}

/// Checks that every image can provide a training window and, for whole
/// images, that they share one (square, when augmenting) shape.
pub(crate) fn check_sample_shapes(dims: &[(usize, usize)], schedule: &TrainSchedule, multiple: usize) -> Result<()> {
    match schedule.patch_size {
        Some(s) => {
            if s % multiple != 0 {
                return Err(Error::invalid(format!("patch size {s} must be a multiple of {multiple}")));
            }
            if let Some(d) = dims.iter().find(|d| d.0 < s || d.1 < s) {
                return Err(Error::invalid(format!("image {}x{} is smaller than the {s}px patch", d.0, d.1)));
            }
        }
        None => {
            let first = dims[0];
            if dims.iter().any(|&d| d != first) {
                return Err(Error::invalid("whole-image training needs equally sized images; set a patch size"));
            }
            if schedule.augment && first.0 != first.1 {
                return Err(Error::invalid("dihedral augmentation needs square images; set a patch size"));
            }
            if !first.0.is_multiple_of(multiple) || !first.1.is_multiple_of(multiple) {
                return Err(Error::invalid(format!(
                    "image {}x{} must be a multiple of {multiple}; set a patch size",
                    first.0, first.1
                )));
            }
        }
    }
    Ok(())
}

/// Largest top-left window whose sides are multiples of `multiple`,
/// optionally capped at `cap`.
pub(crate) fn eval_window(dim: (usize, usize), multiple: usize, cap: Option<usize>) -> (usize, usize) {
    let fit = |n: usize| {
        let n = cap.map_or(n, |c| n.min(c.max(multiple)));
        n / multiple * multiple
    };
    (fit(dim.0), fit(dim.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_score_then_loss() {
        let a = Validation { loss: Some(1.0), score: Some(0.5) };
        let b = Validation { loss: Some(0.1), score: Some(0.4) };
        assert!(selection_key(&a, 0.0) > selection_key(&b, 0.0));
        let c = Validation { loss: Some(0.2), score: None };
        let d = Validation { loss: Some(0.3), score: None };
        assert!(selection_key(&c, 0.0) > selection_key(&d, 0.0));
        let e = Validation::default();
        assert!(selection_key(&e, 0.1) > selection_key(&e, 0.2));
    }

    #[test]
    fn windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (r, c, h, w) = random_window(&mut rng, (70, 65), Some(64));
            assert!(r + h <= 70 && c + w <= 65);
        }
        assert_eq!(random_window(&mut rng, (8, 9), None), (0, 0, 8, 9));
        assert_eq!(eval_window((130, 70), 4, None), (128, 68));
        assert_eq!(eval_window((130, 70), 4, Some(64)), (64, 64));
    }

    #[test]
    fn curve_csv() {
        let curve = LossCurve {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 0.5,
                train_loss: None,
                train_aux: None,
                val_loss: Some(1.5),
                val_ap: None,
            }],
        };
        assert_eq!(curve.to_csv(), "epoch,lr,train_loss,train_aux,val_loss,val_ap\n0,0.5,,,1.5,\n");
    }
}
