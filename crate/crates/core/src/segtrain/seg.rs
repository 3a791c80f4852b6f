use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::{check_sample_shapes, fit, random_dihedral, random_window, Objective, StepLoss, TrainOutcome, Validation};
use super::TrainSchedule;
use crate::dataio::ImagePair;
use crate::eval::{MetricsReport, DEFAULT_IOU_MIN};
use crate::infer::{activate, run_padded, sigmoid, softmax3, DEFAULT_NMS_OVERLAP, DEFAULT_THRESHOLD};
use crate::network::{transfer_weights, Head, NetworkSpec, TransferPolicy, UNet, WeightSnapshot};
use crate::nn::Tensor;
use crate::targets::{class_weight_map, star_distances, to_three_class, StarTarget, DEFAULT_N_RAYS};
use crate::{Error, RawImage, Result};

/// Loss weights of the segmentation objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossConfig {
    /// Cross-entropy weight of border pixels relative to the other classes.
    pub border_weight: f32,
    /// Weight of the distance term in the star-convex loss.
    pub distance_weight: f32,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        Self {
            border_weight: 5.0,
            distance_weight: 1.0,
        }
    }
}

/// Class map and per-pixel weights for one training image.
struct ClassTarget {
    classes: Array2<u8>,
    weights: Array2<f32>,
}

fn class_target(pair: &ImagePair, border_weight: f32) -> Result<ClassTarget> {
    let tc = to_three_class(&pair.labels);
    let w = class_weight_map(&tc, border_weight)?;
    Ok(ClassTarget {
        classes: tc.classes,
        weights: w.weights,
    })
}

/// Weighted cross-entropy over the three class channels of sample `n`,
/// divided by `norm`. Writes `∂loss/∂logits` into `grad` when given.
fn class_loss(
    out: &Tensor,
    n: usize,
    classes: &[u8],
    weights: &[f32],
    norm: f64,
    grad: Option<&mut Tensor>,
) -> f64 {
    let hw = out.h * out.w;
    let (l0, l1, l2) = (out.plane(0, n), out.plane(1, n), out.plane(2, n));
    let mut loss = 0.0;
    let mut g = vec![[0.0f32; 3]; if grad.is_some() { hw } else { 0 }];
    for i in 0..hw {
        let p = softmax3([l0[i], l1[i], l2[i]]);
        let y = classes[i] as usize;
        let w = weights[i] as f64;
        loss -= w * (p[y].max(1e-30) as f64).ln();
        if !g.is_empty() {
            for k in 0..3 {
                let t = if k == y { 1.0 } else { 0.0 };
                g[i][k] = (w * (p[k] as f64 - t) / norm) as f32;
            }
        }
    }
    if let Some(grad) = grad {
        for k in 0..3 {
            let plane = grad.plane_mut(k, n);
            for i in 0..hw {
                plane[i] = g[i][k];
            }
        }
    }
    loss / norm
}

/// Binary cross-entropy on the probability logit plus the probability-
/// weighted absolute error of the rectified distances. Returns
/// `(bce, distance term)`, both averaged.
fn star_loss(
    out: &Tensor,
    n: usize,
    target: &StarTarget,
    norm: f64,
    distance_weight: f32,
    mut grad: Option<&mut Tensor>,
) -> (f64, f64) {
    let k = target.n_rays();
    let hw = out.h * out.w;
    let prob = target.object_prob.as_slice().expect("standard layout");
    let dist = target.distances.as_slice().expect("standard layout");
    let logits = out.plane(k, n);
    let mut bce = 0.0;
    let mut dl = 0.0;
    let dnorm = norm * k as f64;
    for i in 0..hw {
        let (z, t) = (logits[i] as f64, prob[i] as f64);
        // softplus(z) - t z, stable for both signs.
        bce += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
        if let Some(g) = grad.as_deref_mut() {
            g.plane_mut(k, n)[i] = ((sigmoid(z as f32) as f64 - t) / norm) as f32;
        }
    }
    for ray in 0..k {
        let d = out.plane(ray, n);
        for i in 0..hw {
            let t = prob[i] as f64;
            if t == 0.0 {
                continue;
            }
            let pred = (d[i] as f64).max(0.0);
            let diff = pred - dist[i * k + ray] as f64;
            dl += t * diff.abs();
            if let Some(g) = grad.as_deref_mut() {
                if d[i] > 0.0 && diff != 0.0 {
                    g.plane_mut(ray, n)[i] = (distance_weight as f64 * t * diff.signum() / dnorm) as f32;
                }
            }
        }
    }
    (bce / norm, dl / dnorm)
}

struct SegObjective<'a> {
    train: &'a [ImagePair],
    class_targets: Vec<ClassTarget>,
    val: Vec<ValItem<'a>>,
    head: Head,
    cfg: SegLossConfig,
    patch: Option<usize>,
    augment: bool,
}

struct ValItem<'a> {
    pair: &'a ImagePair,
    classes: Option<ClassTarget>,
    star: Option<StarTarget>,
}

impl Objective for SegObjective<'_> {
    fn step(&mut self, net: &mut UNet, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<StepLoss> {
        let mut images: Vec<RawImage> = Vec::with_capacity(batch_size);
        let mut classes = Vec::new();
        let mut weights = Vec::new();
        let mut stars = Vec::new();
        for _ in 0..batch_size {
            let idx = rng.random_range(0..self.train.len());
            let pair = &self.train[idx];
            let (r, c, h, w) = random_window(rng, pair.dim(), self.patch);
            let d = random_dihedral(rng, self.augment);
            let win = s![r..r + h, c..c + w];
            images.push(d.apply(&pair.image.slice(win).to_owned()));
            match self.head {
                Head::Joint => {
                    let ct = &self.class_targets[idx];
                    classes.push(d.apply(&ct.classes.slice(win).to_owned()));
                    weights.push(d.apply(&ct.weights.slice(win).to_owned()));
                }
                _ => {
                    let labels = d.apply(&pair.labels.slice(win).to_owned());
                    stars.push(star_distances(&labels, DEFAULT_N_RAYS)?);
                }
            }
        }
        let x = Tensor::from_images(images.iter().map(|a| a.view()));
        let out = net.forward(&x, true)?;
        let mut grad = Tensor::zeros(out.c, out.n, out.h, out.w);
        let norm = (out.n * out.h * out.w) as f64;
        let loss = match self.head {
            Head::Joint => {
                let mut total = 0.0;
                for n in 0..out.n {
                    let (c, w): (&Array2<u8>, &Array2<f32>) = (&classes[n], &weights[n]);
                    total += class_loss(
                        &out,
                        n,
                        c.as_slice().expect("standard layout"),
                        w.as_slice().expect("standard layout"),
                        norm,
                        Some(&mut grad),
                    );
                }
                StepLoss { total, aux: None }
            }
            _ => {
                let (mut bce, mut dl) = (0.0, 0.0);
                for (n, st) in stars.iter().enumerate() {
                    let (b, d) = star_loss(&out, n, st, norm, self.cfg.distance_weight, Some(&mut grad));
                    bce += b;
                    dl += d;
                }
                StepLoss {
                    total: bce + self.cfg.distance_weight as f64 * dl,
                    aux: Some(dl),
                }
            }
        };
        net.backward(&grad);
        Ok(loss)
    }

    fn validate(&mut self, net: &mut UNet) -> Result<Validation> {
        if self.val.is_empty() {
            return Ok(Validation::default());
        }
        let mut loss = 0.0;
        let mut pixels = 0usize;
        let mut preds = Vec::with_capacity(self.val.len());
        for item in &self.val {
            let out = run_padded(net, &item.pair.image)?;
            let np = (out.h * out.w) as f64;
            let l = match (&item.classes, &item.star) {
                (Some(ct), _) => class_loss(
                    &out,
                    0,
                    ct.classes.as_slice().expect("standard layout"),
                    ct.weights.as_slice().expect("standard layout"),
                    1.0,
                    None,
                ),
                (None, Some(st)) => {
                    let (b, d) = star_loss(&out, 0, st, 1.0, self.cfg.distance_weight, None);
                    b + self.cfg.distance_weight as f64 * d
                }
                _ => unreachable!("validation targets match the head"),
            };
            loss += l;
            pixels += np as usize;
            preds.push(activate(self.head, &out)?.instances(DEFAULT_THRESHOLD, DEFAULT_NMS_OVERLAP)?);
        }
        let report = MetricsReport::evaluate(
            self.val
                .iter()
                .zip(&preds)
                .map(|(item, p)| (item.pair.name.as_str(), &item.pair.labels, p)),
            DEFAULT_THRESHOLD,
            DEFAULT_IOU_MIN,
        )?;
        Ok(Validation {
            loss: Some(loss / pixels as f64),
            score: Some(report.ap),
        })
    }
}

/// Fresh three-class network, optionally initialized from `init` (body
/// plus any compatible head channel; class channels stay freshly drawn).
pub fn init_unet_seg(spec: NetworkSpec, init: Option<&WeightSnapshot>, seed: u64) -> Result<UNet> {
    let mut net = UNet::new(spec.with_head(Head::Joint), seed)?;
    if let Some(src) = init {
        transfer_weights(src, &mut net, TransferPolicy::BodyAndCompatibleHead)?;
    }
    Ok(net)
}

/// Trains a three-class U-Net with border-weighted cross-entropy; the
/// regression channel receives no gradient. The best snapshot maximizes
/// validation AP at the default threshold.
pub fn train_unet_seg(
    train: &[ImagePair],
    val: &[ImagePair],
    spec: NetworkSpec,
    init: Option<&WeightSnapshot>,
    schedule: &TrainSchedule,
    cfg: &SegLossConfig,
) -> Result<TrainOutcome> {
    let mut net = init_unet_seg(spec, init, schedule.seed)?;
    train_seg_from(&mut net, train, val, schedule, cfg, "unet_seg")
}

/// Trains a star-convex polygon network: BCE on the object probability
/// plus `distance_weight` times the probability-weighted distance error.
pub fn train_stardist(
    train: &[ImagePair],
    val: &[ImagePair],
    spec: NetworkSpec,
    schedule: &TrainSchedule,
    cfg: &SegLossConfig,
) -> Result<TrainOutcome> {
    let mut net = UNet::new(spec.with_head(Head::Star), schedule.seed)?;
    train_seg_from(&mut net, train, val, schedule, cfg, "stardist")
}

/// Continues segmentation training of `net` (joint or star head).
pub fn train_seg_from(
    net: &mut UNet,
    train: &[ImagePair],
    val: &[ImagePair],
    schedule: &TrainSchedule,
    cfg: &SegLossConfig,
    provenance: &str,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("segmentation training needs at least one labeled image"));
    }
    let head = net.head_kind();
    if head == Head::Denoise {
        return Err(Error::invalid("segmentation training needs a joint or star head"));
    }
    if !(cfg.distance_weight >= 0.0) {
        return Err(Error::invalid(format!("distance weight must be non-negative, got {}", cfg.distance_weight)));
    }
    schedule.validate()?;
    let dims: Vec<_> = train.iter().map(ImagePair::dim).collect();
    check_sample_shapes(&dims, schedule, net.spec().size_multiple())?;
    let class_targets = if head == Head::Joint {
        train
            .iter()
            .map(|p| class_target(p, cfg.border_weight))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let val = val
        .iter()
        .take(schedule.max_val_images.unwrap_or(usize::MAX))
        .map(|pair| {
            Ok(ValItem {
                pair,
                classes: if head == Head::Joint { Some(class_target(pair, cfg.border_weight)?) } else { None },
                star: if head == Head::Star { Some(star_distances(&pair.labels, DEFAULT_N_RAYS)?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut objective = SegObjective {
        train,
        class_targets,
        val,
        head,
        cfg: *cfg,
        patch: schedule.patch_size,
        augment: schedule.augment,
    };
    fit(net, &mut objective, schedule, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segtrain::LrPolicy;
    use crate::InstanceLabelMap;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    /// Small images with a few non-touching bright disks.
    fn disks(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05f32).unwrap();
        (0..n)
            .map(|i| {
                let mut labels = InstanceLabelMap::zeros((size, size));
                let mut id = 0;
                for _ in 0..6 {
                    let rad = rng.random_range(3.0..5.5f64);
                    let cy = rng.random_range(rad..size as f64 - rad);
                    let cx = rng.random_range(rad..size as f64 - rad);
                    let free = labels.indexed_iter().all(|((r, c), &v)| {
                        v == 0 || (r as f64 - cy).hypot(c as f64 - cx) > rad + 2.0
                    });
                    if !free {
                        continue;
                    }
                    id += 1;
                    for ((r, c), v) in labels.indexed_iter_mut() {
                        if (r as f64 - cy).hypot(c as f64 - cx) <= rad {
                            *v = id;
                        }
                    }
                }
                let image = labels.mapv(|v| if v > 0 { 0.8 } else { 0.1 } + noise.sample(&mut rng));
                ImagePair::new(format!("d{i}"), image, labels)
            })
            .collect()
    }

    fn spec() -> NetworkSpec {
        NetworkSpec {
            depth: 2,
            base_features: 8,
            batch_norm: true,
            head: Head::Joint,
        }
    }

    fn schedule(epochs: usize, steps: usize) -> TrainSchedule {
        TrainSchedule {
            initial_lr: 0.004,
            batch_size: 4,
            epochs,
            steps_per_epoch: steps,
            lr_policy: LrPolicy::Constant,
            patch_size: None,
            augment: true,
            max_val_images: None,
            seed: 7,
        }
    }

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(c, n, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        t
    }

    #[test]
    fn class_loss_gradient_matches_finite_differences() {
        let out = random_tensor(4, 2, 3, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let classes: Vec<u8> = (0..9).map(|_| rng.random_range(0..3)).collect();
        let weights: Vec<f32> = classes.iter().map(|&c| if c == 2 { 5.0 } else { 1.0 }).collect();
        let mut grad = Tensor::zeros(4, 2, 3, 3);
        class_loss(&out, 1, &classes, &weights, 18.0, Some(&mut grad));
        for (i, &g) in grad.data.iter().enumerate() {
            let mut up = out.clone();
            up.data[i] += 1e-3;
            let mut dn = out.clone();
            dn.data[i] -= 1e-3;
            let fd = (class_loss(&up, 1, &classes, &weights, 18.0, None)
                - class_loss(&dn, 1, &classes, &weights, 18.0, None))
                / (up.data[i] as f64 - dn.data[i] as f64);
            assert!((fd - g as f64).abs() < 1e-4, "index {i}: fd {fd} vs {g}");
        }
        // Sample 0 and the regression channel are untouched.
        assert!(grad.plane(3, 1).iter().all(|&v| v == 0.0));
        assert!(grad.plane(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn star_loss_gradient_matches_finite_differences() {
        let mut labels = InstanceLabelMap::zeros((6, 6));
        labels.slice_mut(s![1..5, 1..4]).fill(1);
        let target = star_distances(&labels, 4).unwrap();
        let mut out = random_tensor(5, 1, 6, 6, 3);
        // Keep distance predictions away from the kinks at 0 and the targets.
        for v in out.data[..4 * 36].iter_mut() {
            *v = v.abs() * 3.0 + 0.05;
            if (*v - v.round()).abs() < 0.05 {
                *v += 0.1;
            }
        }
        let mut grad = Tensor::zeros(5, 1, 6, 6);
        star_loss(&out, 0, &target, 36.0, 0.7, Some(&mut grad));
        let total = |t: &Tensor| {
            let (b, d) = star_loss(t, 0, &target, 36.0, 0.7, None);
            b + 0.7 * d
        };
        for (i, &g) in grad.data.iter().enumerate() {
            let mut up = out.clone();
            up.data[i] += 1e-3;
            let mut dn = out.clone();
            dn.data[i] -= 1e-3;
            let fd = (total(&up) - total(&dn)) / (up.data[i] as f64 - dn.data[i] as f64);
            assert!((fd - g as f64).abs() < 1e-4, "index {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn background_patch_has_no_distance_loss() {
        let target = star_distances(&InstanceLabelMap::zeros((8, 8)), 32).unwrap();
        let out = random_tensor(33, 1, 8, 8, 4);
        let mut grad = Tensor::zeros(33, 1, 8, 8);
        let (_, d) = star_loss(&out, 0, &target, 64.0, 1.0, Some(&mut grad));
        assert_eq!(d, 0.0);
        assert!(grad.data[..32 * 64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unet_training_loss_decreases() {
        let data = disks(10, 32, 1);
        let out = train_unet_seg(&data, &data[..3], spec(), None, &schedule(5, 20), &SegLossConfig::default()).unwrap();
        let l = out.curve.train_losses();
        assert_eq!(l.len(), 5);
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
        assert!(out.curve.records.iter().all(|r| r.val_ap.is_some()));
    }

    #[test]
    fn init_copies_the_denoiser_body() {
        let mut den = UNet::new(spec().with_head(Head::Denoise), 99).unwrap();
        let snap = WeightSnapshot::capture(&mut den, "n2v", 1);
        let mut net = init_unet_seg(spec(), Some(&snap), 5).unwrap();
        let got = WeightSnapshot::capture(&mut net, "", 0);
        for (k, v) in snap.body() {
            assert_eq!(&got.tensors[k], v, "{k}");
        }
    }

    #[test]
    fn empty_training_set_errors() {
        assert!(train_unet_seg(&[], &[], spec(), None, &schedule(1, 1), &SegLossConfig::default()).is_err());
        assert!(train_stardist(&[], &[], spec(), &schedule(1, 1), &SegLossConfig::default()).is_err());
    }

    #[test]
    fn stardist_distance_error_decreases() {
        let data = disks(10, 32, 2);
        let out = train_stardist(&data, &data[..2], spec(), &schedule(5, 20), &SegLossConfig::default()).unwrap();
        let aux: Vec<f64> = out.curve.records.iter().filter_map(|r| r.train_aux).collect();
        assert_eq!(aux.len(), 5);
        assert!(aux[4] < aux[0], "{aux:?}");
    }

    #[test]
    fn zero_distance_weight_is_pure_detection() {
        let data = disks(4, 16, 3);
        let cfg = SegLossConfig {
            border_weight: 5.0,
            distance_weight: 0.0,
        };
        let out = train_stardist(&data, &[], spec(), &schedule(1, 2), &cfg).unwrap();
        // Distance channels of the head never move without a distance loss.
        let init = WeightSnapshot::capture(&mut UNet::new(spec().with_head(Head::Star), 7).unwrap(), "", 0);
        let (w0, w1) = (&init.tensors["head.weight"], &out.last.tensors["head.weight"]);
        let cin = w0.shape[1];
        assert_eq!(w0.data[..32 * cin], w1.data[..32 * cin]);
        assert_ne!(w0.data[32 * cin..], w1.data[32 * cin..]);
    }

    #[test]
    fn deterministic_trajectories() {
        let data = disks(4, 16, 5);
        let a = train_unet_seg(&data, &data[..1], spec(), None, &schedule(2, 3), &SegLossConfig::default()).unwrap();
        let b = train_unet_seg(&data, &data[..1], spec(), None, &schedule(2, 3), &SegLossConfig::default()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.best, b.best);
    }
}
