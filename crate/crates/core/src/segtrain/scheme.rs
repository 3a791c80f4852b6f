use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::fit::TrainOutcome;
use super::seg::{init_unet_seg, train_seg_from, SegLossConfig};
use super::TrainSchedule;
use crate::dataio::{DatasetSplit, ImagePair, SubsetPlan, DEFAULT_PERCENTILES};
use crate::infer::{preprocess_image, Pipeline, PipelineConfig};
use crate::network::{Head, NetworkSpec, UNet, WeightSnapshot};
use crate::{Error, Result};

/// The training schemes compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// U-Net trained on the raw noisy images.
    BaselineUNet,
    /// Star-convex network trained on the raw noisy images.
    BaselineStarDist,
    /// Frozen denoiser, then a U-Net trained on denoised images.
    SequentialUNet,
    /// Frozen denoiser, then a star-convex network on denoised images.
    SequentialStarDist,
    /// The denoiser network itself re-trained for segmentation on raw images.
    FinetuneUNet,
    /// Frozen denoiser feeding a copy of itself re-trained for segmentation.
    FinetuneSequentialUNet,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::BaselineUNet,
        Scheme::BaselineStarDist,
        Scheme::SequentialUNet,
        Scheme::SequentialStarDist,
        Scheme::FinetuneUNet,
        Scheme::FinetuneSequentialUNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::BaselineUNet => "baseline_unet",
            Scheme::BaselineStarDist => "baseline_stardist",
            Scheme::SequentialUNet => "sequential_unet",
            Scheme::SequentialStarDist => "sequential_stardist",
            Scheme::FinetuneUNet => "finetune_unet",
            Scheme::FinetuneSequentialUNet => "finetune_sequential_unet",
        }
    }

    pub fn needs_denoiser(self) -> bool {
        !matches!(self, Scheme::BaselineUNet | Scheme::BaselineStarDist)
    }

    /// Whether the frozen denoiser is applied to every input.
    pub fn denoises_input(self) -> bool {
        matches!(
            self,
            Scheme::SequentialUNet | Scheme::SequentialStarDist | Scheme::FinetuneSequentialUNet
        )
    }

    /// Whether the segmenter starts from the denoiser weights.
    pub fn initializes_from_denoiser(self) -> bool {
        matches!(self, Scheme::FinetuneUNet | Scheme::FinetuneSequentialUNet)
    }

    pub fn segmenter_head(self) -> Head {
        match self {
            Scheme::BaselineStarDist | Scheme::SequentialStarDist => Head::Star,
            _ => Head::Joint,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        if let Some(s) = Scheme::ALL.into_iter().find(|x| x.name() == key) {
            return Ok(s);
        }
        if key == "finetune_stardist" || key == "finetune_sequential_stardist" {
            return Err(Error::Scheme("this approach only applies to the U-Net baseline".into()));
        }
        Err(Error::Scheme(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub denoiser: Option<WeightSnapshot>,
    /// 1-based index into the subset plan.
    pub subset_index: usize,
    pub noise_label: String,
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.denoiser, self.scheme.needs_denoiser()) {
            (None, true) => Err(Error::Scheme(format!("{} needs a trained denoiser", self.scheme))),
            (Some(_), false) => Err(Error::Scheme(format!("{} does not use a denoiser", self.scheme))),
            (Some(d), true) if d.meta.spec.head.regression_channel().is_none() => Err(Error::Scheme(
                "the denoiser snapshot has no regression channel".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Architecture, losses and normalization shared by all schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeOptions {
    pub spec: NetworkSpec,
    pub loss: SegLossConfig,
    pub percentiles: (f64, f64),
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self {
            spec: NetworkSpec::new(Head::Joint),
            loss: SegLossConfig::default(),
            percentiles: DEFAULT_PERCENTILES,
        }
    }
}

/// Everything produced by one scheme run.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub pipeline: Pipeline,
    pub outcome: TrainOutcome,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scheme: Scheme,
    pub subset_index: usize,
    pub subset_size: usize,
    pub noise_label: String,
    pub schedule: TrainSchedule,
    pub options: SchemeOptions,
    pub best_epoch: usize,
    /// Provenance of the denoiser snapshot, when one was used.
    pub denoiser: Option<String>,
    /// Denoiser weights were bitwise identical before and after training.
    pub denoiser_frozen: Option<bool>,
}

impl SchemeRun {
    /// Writes `manifest.json`, `curve.csv`, best and last checkpoints and
    /// the pipeline directory.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(
            "manifest.json",
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes"),
        )?;
        write("curve.csv", self.outcome.curve.to_csv())?;
        self.outcome.best.save(&dir.join("best.safetensors"))?;
        self.outcome.last.save(&dir.join("last.safetensors"))?;
        self.pipeline.save(&dir.join("pipeline"))
    }
}

/// Applies the (optional) frozen first stage to every pair.
fn preprocess_pairs(denoiser: Option<&mut UNet>, pairs: &[ImagePair], percentiles: (f64, f64)) -> Result<Vec<ImagePair>> {
    let mut denoiser = denoiser;
    pairs
        .iter()
        .map(|p| {
            Ok(ImagePair::new(
                p.name.clone(),
                preprocess_image(denoiser.as_deref_mut(), &p.image, percentiles)?,
                p.labels.clone(),
            ))
        })
        .collect()
}

/// Trains the segmenter of `config.scheme` on subset `P_i` of the training
/// split and returns the end-to-end pipeline.
pub fn run_scheme(
    config: &SchemeConfig,
    split: &DatasetSplit,
    plan: &SubsetPlan,
    schedule: &TrainSchedule,
    options: &SchemeOptions,
) -> Result<SchemeRun> {
    config.validate()?;
    let scheme = config.scheme;
    let indices = plan.subset(config.subset_index)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= split.train.len()) {
        return Err(Error::invalid(format!(
            "subset index {bad} outside a training split of {}",
            split.train.len()
        )));
    }
    let subset: Vec<ImagePair> = indices.iter().map(|&i| split.train[i].clone()).collect();

    let mut frozen = match (&config.denoiser, scheme.denoises_input()) {
        (Some(snap), true) => Some(snap.restore()?),
        _ => None,
    };
    let train = preprocess_pairs(frozen.as_mut(), &subset, options.percentiles)?;
    let val = preprocess_pairs(frozen.as_mut(), &split.validation, options.percentiles)?;

    let spec = options.spec.with_head(scheme.segmenter_head());
    let mut net = if scheme.initializes_from_denoiser() {
        let snap = config.denoiser.as_ref().expect("validated");
        if !snap.meta.spec.same_body(&spec) {
            return Err(Error::Scheme(format!(
                "denoiser architecture {:?} differs from the segmenter {:?}",
                snap.meta.spec, spec
            )));
        }
        init_unet_seg(spec, Some(snap), schedule.seed)?
    } else {
        UNet::new(spec, schedule.seed)?
    };
    let outcome = train_seg_from(&mut net, &train, &val, schedule, &options.loss, scheme.name())?;

    let denoiser_frozen = match (&config.denoiser, frozen.as_mut()) {
        (Some(snap), Some(d)) => Some(WeightSnapshot::capture(d, snap.meta.provenance.clone(), snap.meta.epoch).tensors == snap.tensors),
        _ => None,
    };
    let pipeline = Pipeline::new(
        frozen,
        outcome.best.restore()?,
        PipelineConfig {
            percentiles: options.percentiles,
            ..PipelineConfig::default()
        },
    )?;
    let manifest = RunManifest {
        scheme,
        subset_index: config.subset_index,
        subset_size: subset.len(),
        noise_label: config.noise_label.clone(),
        schedule: *schedule,
        options: *options,
        best_epoch: outcome.best_epoch,
        denoiser: config.denoiser.as_ref().map(|d| d.meta.provenance.clone()),
        denoiser_frozen,
    };
    Ok(SchemeRun {
        pipeline,
        outcome,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_subsets;
    use crate::segtrain::LrPolicy;
    use crate::InstanceLabelMap;
    use ndarray::s;

    fn split() -> DatasetSplit {
        let pair = |i: usize| {
            let mut labels = InstanceLabelMap::zeros((16, 16));
            labels.slice_mut(s![2 + i % 3..8, 3..9]).fill(1);
            labels.slice_mut(s![10..14, 9..15]).fill(2);
            let image = labels.mapv(|v| if v > 0 { 200.0 } else { 20.0 + i as f32 });
            ImagePair::new(format!("p{i}"), image, labels)
        };
        DatasetSplit {
            train: (0..6).map(pair).collect(),
            validation: (6..8).map(pair).collect(),
            test: (8..9).map(pair).collect(),
        }
    }

    fn schedule() -> TrainSchedule {
        TrainSchedule {
            initial_lr: 0.004,
            batch_size: 2,
            epochs: 2,
            steps_per_epoch: 2,
            lr_policy: LrPolicy::Constant,
            patch_size: None,
            augment: true,
            max_val_images: None,
            seed: 3,
        }
    }

    fn options() -> SchemeOptions {
        SchemeOptions {
            spec: NetworkSpec {
                depth: 1,
                base_features: 4,
                batch_norm: true,
                head: Head::Joint,
            },
            ..SchemeOptions::default()
        }
    }

    fn denoiser(head: Head) -> WeightSnapshot {
        let mut net = UNet::new(options().spec.with_head(head), 42).unwrap();
        WeightSnapshot::capture(&mut net, "n2v/n40", 3)
    }

    fn config(scheme: Scheme, denoiser: Option<WeightSnapshot>) -> SchemeConfig {
        SchemeConfig {
            scheme,
            denoiser,
            subset_index: 1,
            noise_label: "n40".into(),
        }
    }

    #[test]
    fn finetune_stardist_is_rejected() {
        let err = "finetune_stardist".parse::<Scheme>().unwrap_err();
        assert!(err.to_string().contains("this approach only applies to the U-Net baseline"));
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
    }

    #[test]
    fn denoiser_consistency_is_checked() {
        assert!(config(Scheme::SequentialUNet, None).validate().is_err());
        assert!(config(Scheme::BaselineUNet, Some(denoiser(Head::Joint))).validate().is_err());
        assert!(config(Scheme::FinetuneUNet, Some(denoiser(Head::Star))).validate().is_err());
        assert!(config(Scheme::FinetuneUNet, Some(denoiser(Head::Joint))).validate().is_ok());
    }

    #[test]
    fn every_scheme_runs_end_to_end() {
        let split = split();
        let plan = make_subsets(6, &[2, 4], 1).unwrap();
        for scheme in Scheme::ALL {
            let den = scheme.needs_denoiser().then(|| denoiser(Head::Joint));
            let mut run = run_scheme(&config(scheme, den.clone()), &split, &plan, &schedule(), &options()).unwrap();
            assert_eq!(run.manifest.subset_size, 2);
            assert_eq!(run.pipeline.denoiser.is_some(), scheme.denoises_input(), "{scheme}");
            assert_eq!(run.pipeline.segmenter.head_kind(), scheme.segmenter_head());
            if scheme.denoises_input() {
                assert_eq!(run.manifest.denoiser_frozen, Some(true));
                let mut d = run.pipeline.denoiser.clone().unwrap();
                assert_eq!(WeightSnapshot::capture(&mut d, "", 0).tensors, den.as_ref().unwrap().tensors);
            }
            let labels = run.pipeline.segment(&split.test[0].image).unwrap();
            assert_eq!(labels.dim(), (16, 16));
        }
    }

    #[test]
    fn finetune_sequential_starts_from_the_denoiser_and_diverges() {
        let split = split();
        let plan = make_subsets(6, &[2], 1).unwrap();
        let den = denoiser(Head::Joint);
        let init = init_unet_seg(options().spec, Some(&den), 3).unwrap();
        let mut init = init;
        let start = WeightSnapshot::capture(&mut init, "", 0);
        for (k, v) in den.body() {
            assert_eq!(&start.tensors[k], v);
        }
        let run = run_scheme(&config(Scheme::FinetuneSequentialUNet, Some(den.clone())), &split, &plan, &schedule(), &options()).unwrap();
        let changed = den.body().any(|(k, v)| run.outcome.last.tensors[k] != *v);
        assert!(changed);
    }

    #[test]
    fn run_artifacts_are_written() {
        let split = split();
        let plan = make_subsets(6, &[2], 1).unwrap();
        let mut run = run_scheme(&config(Scheme::BaselineUNet, None), &split, &plan, &schedule(), &options()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        for f in ["manifest.json", "curve.csv", "best.safetensors", "last.safetensors", "pipeline/pipeline.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m, run.manifest);
    }

    #[test]
    fn bad_subset_index_errors() {
        let split = split();
        let plan = make_subsets(6, &[2], 1).unwrap();
        let mut c = config(Scheme::BaselineUNet, None);
        c.subset_index = 2;
        assert!(run_scheme(&c, &split, &plan, &schedule(), &options()).is_err());
    }
}
