use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{blind_pixels, sample_mask_with_radius, DEFAULT_MASK_FRACTION, DEFAULT_REPLACEMENT_RADIUS};
use crate::infer::run_padded;
use crate::network::{Head, NetworkSpec, UNet};
use crate::nn::Tensor;
use crate::segtrain::fit::{check_sample_shapes, eval_window, fit, random_dihedral, random_window, Objective, StepLoss, Validation};
use crate::segtrain::{TrainOutcome, TrainSchedule};
use crate::{Error, RawImage, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct N2VConfig {
    pub mask_fraction: f64,
    pub replacement_radius: usize,
    /// Share of the imagery held out for the masked validation loss.
    pub val_fraction: f64,
}

impl Default for N2VConfig {
    fn default() -> Self {
        Self {
            mask_fraction: DEFAULT_MASK_FRACTION,
            replacement_radius: DEFAULT_REPLACEMENT_RADIUS,
            val_fraction: 0.1,
        }
    }
}

/// Blinded inputs, their original values and the blinded-pixel masks.
#[derive(Debug, Clone, PartialEq)]
pub struct N2VBatch {
    pub inputs: Vec<RawImage>,
    pub targets: Vec<RawImage>,
    pub masks: Vec<ndarray::Array2<bool>>,
}

impl N2VBatch {
    pub fn from_patches(patches: Vec<RawImage>, config: &N2VConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut inputs = Vec::with_capacity(patches.len());
        let mut masks = Vec::with_capacity(patches.len());
        for p in &patches {
            let plan = sample_mask_with_radius(p.dim(), config.mask_fraction, config.replacement_radius, rng.random())?;
            inputs.push(blind_pixels(p, &plan, rng.random()));
            masks.push(plan.to_mask(p.dim()));
        }
        Ok(Self {
            inputs,
            targets: patches,
            masks,
        })
    }

    /// Loss summed over masked pixels and the masked-pixel count.
    fn sum_sq(&self, out: &Tensor, ch: usize, grad: Option<&mut Tensor>) -> (f64, usize) {
        let n: usize = self.masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
        let mut sum = 0.0;
        let mut grad = grad;
        for (i, (t, m)) in self.targets.iter().zip(&self.masks).enumerate() {
            let pred = out.plane(ch, i);
            for (k, (&tv, &mv)) in t.iter().zip(m.iter()).enumerate() {
                if mv {
                    let d = pred[k] as f64 - tv as f64;
                    sum += d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g.plane_mut(ch, i)[k] = (2.0 * d / n as f64) as f32;
                    }
                }
            }
        }
        (sum, n)
    }
}

struct N2VObjective<'a> {
    train: Vec<&'a RawImage>,
    val: Vec<N2VBatch>,
    config: N2VConfig,
    patch: Option<usize>,
    augment: bool,
    channel: usize,
}

impl Objective for N2VObjective<'_> {
    fn step(&mut self, net: &mut UNet, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<StepLoss> {
        let mut patches = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let img = self.train[rng.random_range(0..self.train.len())];
            let (r, c, h, w) = random_window(rng, img.dim(), self.patch);
            let d = random_dihedral(rng, self.augment);
            patches.push(d.apply(&img.slice(s![r..r + h, c..c + w]).to_owned()));
        }
        let batch = N2VBatch::from_patches(patches, &self.config, rng)?;
        let x = Tensor::from_images(batch.inputs.iter().map(|a| a.view()));
        let out = net.forward(&x, true)?;
        let mut grad = Tensor::zeros(out.c, out.n, out.h, out.w);
        let (sum, n) = batch.sum_sq(&out, self.channel, Some(&mut grad));
        net.backward(&grad);
        Ok(StepLoss {
            total: sum / n as f64,
            aux: None,
        })
    }

    fn validate(&mut self, net: &mut UNet) -> Result<Validation> {
        if self.val.is_empty() {
            return Ok(Validation::default());
        }
        let (mut sum, mut n) = (0.0, 0);
        for b in &self.val {
            let out = run_padded(net, &b.inputs[0])?;
            let (s, k) = b.sum_sq(&out, self.channel, None);
            sum += s;
            n += k;
        }
        Ok(Validation {
            loss: Some(sum / n as f64),
            score: None,
        })
    }
}

/// Trains a blind-spot denoiser on unlabeled (normalized) images. Only the
/// regression channel of the head receives gradient. The returned outcome
/// holds the snapshot with the lowest masked validation loss, measured on a
/// seeded holdout of the imagery with fixed masks.
pub fn train_n2v(
    data: &[RawImage],
    spec: NetworkSpec,
    config: &N2VConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    let mut net = UNet::new(spec, schedule.seed)?;
    train_n2v_from(&mut net, data, config, schedule)
}

/// As [`train_n2v`], continuing from the weights already in `net`.
pub fn train_n2v_from(
    net: &mut UNet,
    data: &[RawImage],
    config: &N2VConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("denoiser training needs at least one image"));
    }
    let channel = match net.head_kind() {
        Head::Denoise | Head::Joint => net.head_kind().regression_channel().expect("regression head"),
        Head::Star => return Err(Error::invalid("denoiser training needs a denoise or joint head")),
    };
    if !(config.val_fraction >= 0.0 && config.val_fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction must lie in [0, 1), got {}", config.val_fraction)));
    }
    schedule.validate()?;
    let multiple = net.spec().size_multiple();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5e_ed0f_da7a);
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 && config.val_fraction > 0.0 {
        ((config.val_fraction * data.len() as f64).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let train: Vec<&RawImage> = train_idx.iter().map(|&i| &data[i]).collect();
    let dims: Vec<_> = train.iter().map(|im| im.dim()).collect();
    check_sample_shapes(&dims, schedule, multiple)?;

    let mut val = Vec::new();
    for &i in val_idx.iter().take(schedule.max_val_images.unwrap_or(usize::MAX)) {
        let (h, w) = eval_window(data[i].dim(), multiple, schedule.patch_size);
        if h == 0 || w == 0 {
            continue;
        }
        let crop = data[i].slice(s![..h, ..w]).to_owned();
        val.push(N2VBatch::from_patches(vec![crop], config, &mut rng)?);
    }

    let mut objective = N2VObjective {
        train,
        val,
        config: *config,
        patch: schedule.patch_size,
        augment: schedule.augment,
        channel,
    };
    fit(net, &mut objective, schedule, "n2v")
}

/// Applies a denoiser (any head with a regression channel) to one image.
pub fn denoise_image(net: &mut UNet, image: &RawImage) -> Result<RawImage> {
    let ch = net
        .head_kind()
        .regression_channel()
        .ok_or_else(|| Error::invalid("network has no regression channel"))?;
    Ok(run_padded(net, image)?.to_array(ch, 0))
}
