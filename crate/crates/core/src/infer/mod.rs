//! From trained networks to instance label maps: end-to-end prediction,
//! foreground thresholding, star-convex polygon suppression and rendering,
//! and threshold sweeps on validation data.

mod components;
mod pipeline;
pub(crate) use pipeline::{activate, run_padded, sigmoid, softmax3};
mod polygon;
mod sweep;

pub use components::fg_threshold_to_instances;
pub use pipeline::{preprocess_image, Pipeline, PipelineConfig, Prediction};
pub use polygon::{render_polygons, stardist_nms, suppress, PolygonCandidate, DEFAULT_NMS_OVERLAP};
pub use sweep::{default_threshold_grid, ThresholdSweepResult};

use crate::dataio::ImagePair;
use crate::eval::{MetricsReport, DEFAULT_IOU_MIN};
use crate::{Error, Result};

/// Default foreground / object-probability threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Evaluates precomputed predictions at every grid threshold.
pub fn sweep_predictions(
    predictions: &[Prediction],
    pairs: &[ImagePair],
    grid: &[f64],
    nms_overlap: f64,
) -> Result<ThresholdSweepResult> {
    if predictions.is_empty() || predictions.len() != pairs.len() {
        return Err(Error::invalid("threshold sweep needs one prediction per validation pair"));
    }
    let mut aps = Vec::with_capacity(grid.len());
    for &t in grid {
        let report = evaluate_predictions(predictions, pairs, t, nms_overlap)?;
        aps.push(report.ap);
    }
    ThresholdSweepResult::from_scores(grid.to_vec(), aps)
}

pub fn evaluate_predictions(
    predictions: &[Prediction],
    pairs: &[ImagePair],
    threshold: f64,
    nms_overlap: f64,
) -> Result<MetricsReport> {
    let labels = predictions
        .iter()
        .map(|p| p.instances(threshold, nms_overlap))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::evaluate(
        pairs
            .iter()
            .zip(&labels)
            .map(|(pair, pred)| (pair.name.as_str(), &pair.labels, pred)),
        threshold,
        DEFAULT_IOU_MIN,
    )
}

/// Segments every validation image once and finds the AP-maximizing
/// threshold on `grid`.
pub fn threshold_sweep(
    pipeline: &mut Pipeline,
    val_pairs: &[ImagePair],
    grid: &[f64],
) -> Result<ThresholdSweepResult> {
    if val_pairs.is_empty() {
        return Err(Error::invalid("threshold sweep needs validation pairs"));
    }
    let preds = val_pairs
        .iter()
        .map(|p| pipeline.predict(&p.image))
        .collect::<Result<Vec<_>>>()?;
    sweep_predictions(&preds, val_pairs, grid, pipeline.config.nms_overlap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2, Array3};

    #[test]
    fn sweep_finds_the_only_perfect_threshold() {
        // Object 1 at 0.9, object 2 at 0.6, joined by a 0.45 bridge.
        let mut gt = Array2::zeros((8, 12));
        gt.slice_mut(s![2..6, 1..5]).fill(1);
        gt.slice_mut(s![2..6, 7..11]).fill(2);
        let mut fg = Array2::<f32>::zeros((8, 12));
        fg.slice_mut(s![2..6, 1..5]).fill(0.9);
        fg.slice_mut(s![2..6, 7..11]).fill(0.6);
        fg.slice_mut(s![3..4, 5..7]).fill(0.45);
        let mut classes = Array3::zeros((3, 8, 12));
        classes.slice_mut(s![1, .., ..]).assign(&fg);
        let pred = Prediction::Unet {
            class_probs: classes,
            regression: Array2::zeros((8, 12)),
        };
        let pair = ImagePair::new("x", Array2::zeros((8, 12)), gt);
        let r = sweep_predictions(&[pred], &[pair], &[0.3, 0.5, 0.7], 0.4).unwrap();
        assert_eq!(r.ap_per_threshold, vec![0.0, 1.0, 0.5]);
        assert_eq!(r.best_threshold, 0.5);
        assert_eq!(r.best_ap, 1.0);
    }
}
