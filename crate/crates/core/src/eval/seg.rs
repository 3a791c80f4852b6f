use serde::{Deserialize, Serialize};

use super::matching::Overlaps;
use crate::{InstanceLabelMap, Result};

/// When a predicted object S counts as the match of ground-truth object R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMatchRule {
    /// `|R ∩ S| > 0.5·|R|`; at most one S can qualify.
    #[default]
    StrictMajority,
    /// `|R ∩ S| ≥ 0.5·|R|`; two halves may tie, the higher Jaccard (then the
    /// lower id) wins.
    AtLeastHalf,
}

impl SegMatchRule {
    pub(crate) fn matches(self, inter: u64, gt_area: u64) -> bool {
        match self {
            SegMatchRule::StrictMajority => 2 * inter > gt_area,
            SegMatchRule::AtLeastHalf => 2 * inter >= gt_area,
        }
    }
}

/// Mean over ground-truth objects of `|R ∩ S| / |R ∪ S|` for the matching S
/// (0 when none matches); 1.0 when there are no ground-truth objects.
pub fn seg_score(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    seg_score_with(gt, pred, SegMatchRule::StrictMajority)
}

pub fn seg_score_with(gt: &InstanceLabelMap, pred: &InstanceLabelMap, rule: SegMatchRule) -> Result<f64> {
    let ov = Overlaps::compute(gt, pred)?;
    if ov.n_gt() == 0 {
        return Ok(1.0);
    }
    Ok(ov.seg_sum(rule) / ov.n_gt() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};

    #[test]
    fn identical_maps_score_one() {
        let mut gt = Array2::zeros((8, 8));
        gt.slice_mut(s![0..3, 0..3]).fill(1);
        gt.slice_mut(s![4..8, 4..8]).fill(2);
        assert_eq!(seg_score(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn three_quarter_overlap() {
        // R: 4x4 square at (2..6, 2..6); S covers its first three rows (12 px)
        // plus a 4-pixel row outside R.
        let mut gt = Array2::zeros((10, 10));
        gt.slice_mut(s![2..6, 2..6]).fill(1);
        let mut pred = Array2::zeros((10, 10));
        pred.slice_mut(s![1..5, 2..6]).fill(1);
        assert_eq!(seg_score(&gt, &pred).unwrap(), 0.6);
    }

    #[test]
    fn exactly_half_does_not_match() {
        let mut gt = Array2::zeros((10, 10));
        gt.slice_mut(s![2..6, 2..6]).fill(1);
        let mut pred = Array2::zeros((10, 10));
        pred.slice_mut(s![2..4, 2..6]).fill(1);
        assert_eq!(seg_score(&gt, &pred).unwrap(), 0.0);
        assert_eq!(seg_score_with(&gt, &pred, SegMatchRule::AtLeastHalf).unwrap(), 0.5);
    }

    #[test]
    fn inclusive_tie_prefers_higher_jaccard() {
        let mut gt = Array2::zeros((4, 8));
        gt.slice_mut(s![0..2, 0..4]).fill(1);
        let mut pred = Array2::zeros((4, 8));
        pred.slice_mut(s![0..1, 0..4]).fill(1); // 4 px inside, J = 0.5
        pred.slice_mut(s![1..2, 0..4]).fill(2); // 4 px inside
        pred.slice_mut(s![2..4, 0..4]).fill(2); // plus 8 outside, J = 4/16
        let v = seg_score_with(&gt, &pred, SegMatchRule::AtLeastHalf).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn empty_ground_truth_scores_one() {
        let gt = Array2::zeros((3, 3));
        let mut pred = Array2::zeros((3, 3));
        pred[[1, 1]] = 4;
        assert_eq!(seg_score(&gt, &pred).unwrap(), 1.0);
    }
}
