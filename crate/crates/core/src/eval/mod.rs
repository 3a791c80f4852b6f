//! Instance-level evaluation: IoU matching and Average Precision, the
//! Jaccard-based SEG score, per-dataset reports and cross-repeat aggregation.

mod aggregate;
mod matching;
mod seg;

pub use aggregate::{aggregate, aggregate_reports, MeanSe, SummaryReport};
pub use matching::{average_precision, match_for_ap, MatchResult, MatchedPair, Overlaps};
pub use seg::{seg_score, seg_score_with, SegMatchRule};

use serde::{Deserialize, Serialize};

use crate::{InstanceLabelMap, Result};

/// Default IoU criterion for counting a true positive.
pub const DEFAULT_IOU_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub ap: f64,
    pub seg: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_gt: usize,
    /// Sum of per-object SEG contributions (for pooling across images).
    pub seg_sum: f64,
}

/// Scores of one run over a set of images. `ap` and `seg` pool objects
/// across all images: `ap = tp / (tp + fp + fn)` and `seg` is the mean
/// Jaccard contribution over every ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub seg: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub best_threshold: f64,
    pub per_image: Vec<ImageMetrics>,
}

pub fn evaluate_image(
    name: &str,
    gt: &InstanceLabelMap,
    pred: &InstanceLabelMap,
    iou_min: f64,
) -> Result<ImageMetrics> {
    let overlaps = Overlaps::compute(gt, pred)?;
    let m = overlaps.match_greedy(iou_min);
    let (tp, fp, fn_) = (m.tp(), m.fp(), m.fn_());
    let seg_sum = overlaps.seg_sum(SegMatchRule::StrictMajority);
    let n_gt = overlaps.n_gt();
    Ok(ImageMetrics {
        name: name.to_string(),
        ap: ap_from_counts(tp, fp, fn_),
        seg: if n_gt == 0 { 1.0 } else { seg_sum / n_gt as f64 },
        tp,
        fp,
        fn_,
        n_gt,
        seg_sum,
    })
}

pub(crate) fn ap_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        tp as f64 / denom as f64
    }
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64) -> Self {
        let tp = per_image.iter().map(|m| m.tp).sum();
        let fp = per_image.iter().map(|m| m.fp).sum();
        let fn_ = per_image.iter().map(|m| m.fn_).sum();
        let n_gt: usize = per_image.iter().map(|m| m.n_gt).sum();
        let seg_sum: f64 = per_image.iter().map(|m| m.seg_sum).sum();
        Self {
            ap: ap_from_counts(tp, fp, fn_),
            seg: if n_gt == 0 { 1.0 } else { seg_sum / n_gt as f64 },
            tp,
            fp,
            fn_,
            best_threshold: threshold,
            per_image,
        }
    }

    /// Evaluates aligned `(name, gt, pred)` triples.
    pub fn evaluate<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a InstanceLabelMap, &'a InstanceLabelMap)>,
        threshold: f64,
        iou_min: f64,
    ) -> Result<Self> {
        let per_image = items
            .into_iter()
            .map(|(name, gt, pred)| evaluate_image(name, gt, pred, iou_min))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_images(per_image, threshold))
    }

    /// One CSV row per image.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image,ap,seg,tp,fp,fn,n_gt\n");
        for m in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.name, m.ap, m.seg, m.tp, m.fp, m.fn_, m.n_gt
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn pooled_report() {
        let gt = Array2::from_shape_fn((4, 8), |(_, c)| if c < 4 { 1 } else { 2 });
        let empty = Array2::zeros((4, 8));
        let r = MetricsReport::evaluate(
            [("a", &gt, &gt), ("b", &gt, &empty)],
            0.5,
            DEFAULT_IOU_MIN,
        )
        .unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 2));
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.seg, 0.5);
        assert!(r.per_image_csv().lines().count() == 3);
    }

    #[test]
    fn empty_versus_empty_is_perfect() {
        let e = Array2::zeros((3, 3));
        let m = evaluate_image("e", &e, &e, 0.5).unwrap();
        assert_eq!((m.ap, m.seg), (1.0, 1.0));
    }
}
