use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{fg_threshold_to_instances, render_polygons, stardist_nms, DEFAULT_NMS_OVERLAP, DEFAULT_THRESHOLD};
use crate::dataio::{normalize, DEFAULT_PERCENTILES};
use crate::network::{Head, UNet, WeightSnapshot};
use crate::nn::Tensor;
use crate::{Error, InstanceLabelMap, RawImage, Result};

const CONFIG_FILE: &str = "pipeline.json";
const DENOISER_FILE: &str = "denoiser.safetensors";
const SEGMENTER_FILE: &str = "segmenter.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Percentiles mapped to 0 and 1 before each network.
    pub percentiles: (f64, f64),
    /// Threshold used by [`Pipeline::segment`].
    pub threshold: f64,
    pub nms_overlap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            percentiles: DEFAULT_PERCENTILES,
            threshold: DEFAULT_THRESHOLD,
            nms_overlap: DEFAULT_NMS_OVERLAP,
        }
    }
}

/// Activated network outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Unet {
        /// `(3, H, W)` softmax over background, foreground, border.
        class_probs: Array3<f32>,
        regression: Array2<f32>,
    },
    Star {
        /// Sigmoid object probability.
        prob: Array2<f32>,
        /// `(H, W, n_rays)` rectified distances.
        distances: Array3<f32>,
    },
}

impl Prediction {
    /// The map the threshold cuts: P(foreground) or object probability.
    pub fn score_map(&self) -> Array2<f32> {
        match self {
            Prediction::Unet { class_probs, .. } => class_probs.slice(s![1, .., ..]).to_owned(),
            Prediction::Star { prob, .. } => prob.clone(),
        }
    }

    pub fn instances(&self, threshold: f64, nms_overlap: f64) -> Result<InstanceLabelMap> {
        match self {
            Prediction::Unet { class_probs, .. } => Ok(fg_threshold_to_instances(
                &class_probs.slice(s![1, .., ..]).to_owned(),
                threshold,
            )),
            Prediction::Star { prob, distances } => {
                let polys = stardist_nms(prob, distances, threshold, nms_overlap)?;
                Ok(render_polygons(&polys, prob.dim()))
            }
        }
    }
}

/// Everything needed to segment a raw image: an optional frozen denoiser
/// followed by a segmentation network.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub denoiser: Option<UNet>,
    pub segmenter: UNet,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(denoiser: Option<UNet>, segmenter: UNet, config: PipelineConfig) -> Result<Self> {
        if let Some(d) = &denoiser {
            if d.head_kind().regression_channel().is_none() {
                return Err(Error::invalid("the denoising stage needs a regression channel"));
            }
        }
        if segmenter.head_kind() == Head::Denoise {
            return Err(Error::invalid("the segmentation stage needs a joint or star head"));
        }
        Ok(Self {
            denoiser,
            segmenter,
            config,
        })
    }

    /// Normalized (and, with a denoiser, denoised and re-normalized) network input.
    pub fn preprocess(&mut self, image: &RawImage) -> Result<RawImage> {
        preprocess_image(self.denoiser.as_mut(), image, self.config.percentiles)
    }

    pub fn predict(&mut self, image: &RawImage) -> Result<Prediction> {
        let x = self.preprocess(image)?;
        let out = run_padded(&mut self.segmenter, &x)?;
        activate(self.segmenter.head_kind(), &out)
    }

    /// Instance labels at the configured threshold.
    pub fn segment(&mut self, image: &RawImage) -> Result<InstanceLabelMap> {
        let (t, o) = (self.config.threshold, self.config.nms_overlap);
        self.predict(image)?.instances(t, o)
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(d) = &mut self.denoiser {
            WeightSnapshot::capture(d, "pipeline/denoiser", 0).save(&dir.join(DENOISER_FILE))?;
        }
        WeightSnapshot::capture(&mut self.segmenter, "pipeline/segmenter", 0)
            .save(&dir.join(SEGMENTER_FILE))?;
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let dpath = dir.join(DENOISER_FILE);
        let denoiser = if dpath.exists() {
            Some(WeightSnapshot::load(&dpath)?.restore()?)
        } else {
            None
        };
        let segmenter = WeightSnapshot::load(&dir.join(SEGMENTER_FILE))?.restore()?;
        Self::new(denoiser, segmenter, config)
    }
}

/// Percentile normalization, then (with a denoiser) denoising and
/// re-normalization with the same percentiles.
pub fn preprocess_image(denoiser: Option<&mut UNet>, image: &RawImage, percentiles: (f64, f64)) -> Result<RawImage> {
    let (lo, hi) = percentiles;
    let x = normalize(image, lo, hi)?;
    match denoiser {
        None => Ok(x),
        Some(d) => {
            let ch = d
                .head_kind()
                .regression_channel()
                .ok_or_else(|| Error::invalid("the denoising stage needs a regression channel"))?;
            let out = run_padded(d, &x)?;
            normalize(&out.to_array(ch, 0), lo, hi)
        }
    }
}

/// Runs `net` in inference mode on one image, zero-padding bottom/right to
/// the network's size multiple and cropping the output back.
pub(crate) fn run_padded(net: &mut UNet, image: &RawImage) -> Result<Tensor> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot run a network on an empty image"));
    }
    let m = net.spec().size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let out = if (ph, pw) == (h, w) {
        net.forward(&Tensor::from_images([image.view()]), false)?
    } else {
        let mut padded = RawImage::zeros((ph, pw));
        padded.slice_mut(s![..h, ..w]).assign(image);
        net.forward(&Tensor::from_images([padded.view()]), false)?
    };
    if (ph, pw) == (h, w) {
        return Ok(out);
    }
    let mut cropped = Tensor::zeros(out.c, out.n, h, w);
    for c in 0..out.c {
        for n in 0..out.n {
            let src = out.plane(c, n);
            let dst = cropped.plane_mut(c, n);
            for r in 0..h {
                dst[r * w..(r + 1) * w].copy_from_slice(&src[r * pw..r * pw + w]);
            }
        }
    }
    Ok(cropped)
}

/// Applies head activations to a single-sample raw output.
pub(crate) fn activate(head: Head, out: &Tensor) -> Result<Prediction> {
    let (h, w) = (out.h, out.w);
    match head {
        Head::Joint => {
            let mut class_probs = Array3::zeros((3, h, w));
            let (l0, l1, l2) = (out.plane(0, 0), out.plane(1, 0), out.plane(2, 0));
            for i in 0..h * w {
                let p = softmax3([l0[i], l1[i], l2[i]]);
                for k in 0..3 {
                    class_probs[[k, i / w, i % w]] = p[k];
                }
            }
            Ok(Prediction::Unet {
                class_probs,
                regression: out.to_array(3, 0),
            })
        }
        Head::Star => {
            let k = out.c - 1;
            let prob = out.to_array(k, 0).mapv(sigmoid);
            let mut distances = Array3::zeros((h, w, k));
            for ray in 0..k {
                let plane = out.plane(ray, 0);
                for i in 0..h * w {
                    distances[[i / w, i % w, ray]] = plane[i].max(0.0);
                }
            }
            Ok(Prediction::Star { prob, distances })
        }
        Head::Denoise => Err(Error::invalid("a denoising head has no segmentation output")),
    }
}

pub(crate) fn softmax3(l: [f32; 3]) -> [f32; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp(), (l[2] - m).exp()];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
