use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::seg::SegMatchRule;
use crate::{Error, InstanceLabelMap, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

/// One-to-one assignment between ground-truth and predicted objects.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }
}

/// Object areas and pairwise intersections of two label maps.
#[derive(Debug, Clone)]
pub struct Overlaps {
    pub gt_area: BTreeMap<u32, u64>,
    pub pred_area: BTreeMap<u32, u64>,
    /// `(gt id, pred id) -> |R ∩ S|`, only for overlapping pairs.
    pub intersection: HashMap<(u32, u32), u64>,
}

impl Overlaps {
    pub fn compute(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Self> {
        if gt.dim() != pred.dim() {
            return Err(Error::ShapeMismatch {
                what: "ground truth and prediction".into(),
                left: gt.dim(),
                right: pred.dim(),
            });
        }
        let mut gt_area = BTreeMap::new();
        let mut pred_area = BTreeMap::new();
        let mut intersection = HashMap::new();
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g > 0 {
                *gt_area.entry(g).or_insert(0) += 1;
            }
            if p > 0 {
                *pred_area.entry(p).or_insert(0) += 1;
            }
            if g > 0 && p > 0 {
                *intersection.entry((g, p)).or_insert(0) += 1;
            }
        }
        Ok(Self {
            gt_area,
            pred_area,
            intersection,
        })
    }

    pub fn n_gt(&self) -> usize {
        self.gt_area.len()
    }

    pub fn iou(&self, g: u32, p: u32) -> f64 {
        let inter = self.intersection.get(&(g, p)).copied().unwrap_or(0);
        let union = self.gt_area[&g] + self.pred_area[&p] - inter;
        inter as f64 / union as f64
    }

    /// Greedy matching in descending IoU order (ties by ascending ids).
    pub fn match_greedy(&self, iou_min: f64) -> MatchResult {
        let mut cands: Vec<MatchedPair> = self
            .intersection
            .keys()
            .map(|&(gt, pred)| MatchedPair {
                gt,
                pred,
                iou: self.iou(gt, pred),
            })
            .filter(|m| m.iou >= iou_min)
            .collect();
        cands.sort_by(|a, b| {
            b.iou
                .total_cmp(&a.iou)
                .then(a.gt.cmp(&b.gt))
                .then(a.pred.cmp(&b.pred))
        });
        let mut used_gt = std::collections::HashSet::new();
        let mut used_pred = std::collections::HashSet::new();
        let mut pairs = Vec::new();
        for c in cands {
            if used_gt.contains(&c.gt) || used_pred.contains(&c.pred) {
                continue;
            }
            used_gt.insert(c.gt);
            used_pred.insert(c.pred);
            pairs.push(c);
        }
        pairs.sort_by_key(|m| m.gt);
        MatchResult {
            unmatched_gt: self.gt_area.keys().copied().filter(|g| !used_gt.contains(g)).collect(),
            unmatched_pred: self
                .pred_area
                .keys()
                .copied()
                .filter(|p| !used_pred.contains(p))
                .collect(),
            pairs,
        }
    }

    /// Sum over ground-truth objects of their Jaccard contribution.
    pub fn seg_sum(&self, rule: SegMatchRule) -> f64 {
        let mut best: BTreeMap<u32, (u32, u64)> = BTreeMap::new();
        let mut sorted: Vec<(&(u32, u32), &u64)> = self.intersection.iter().collect();
        sorted.sort_by_key(|(k, _)| **k);
        for (&(g, p), &inter) in sorted {
            if !rule.matches(inter, self.gt_area[&g]) {
                continue;
            }
            let j = self.iou(g, p);
            match best.get(&g) {
                Some(&(bp, _)) if self.iou(g, bp) >= j => {}
                _ => {
                    best.insert(g, (p, inter));
                }
            }
        }
        self.gt_area
            .keys()
            .map(|g| best.get(g).map_or(0.0, |&(p, _)| self.iou(*g, p)))
            .sum()
    }
}

pub fn match_for_ap(
    gt: &InstanceLabelMap,
    pred: &InstanceLabelMap,
    iou_min: f64,
) -> Result<MatchResult> {
    Ok(Overlaps::compute(gt, pred)?.match_greedy(iou_min))
}

/// `tp / (tp + fp + fn)`; 1.0 when both maps are empty.
pub fn average_precision(gt: &InstanceLabelMap, pred: &InstanceLabelMap, iou_min: f64) -> Result<f64> {
    let m = match_for_ap(gt, pred, iou_min)?;
    Ok(super::ap_from_counts(m.tp(), m.fp(), m.fn_()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};

    #[test]
    fn identical_maps_match_fully() {
        let mut gt = Array2::zeros((10, 10));
        gt.slice_mut(s![1..4, 1..4]).fill(3);
        gt.slice_mut(s![6..9, 2..8]).fill(8);
        let m = match_for_ap(&gt, &gt, 0.5).unwrap();
        assert_eq!(m.tp(), 2);
        assert!(m.pairs.iter().all(|p| p.iou == 1.0));
        assert_eq!((m.fp(), m.fn_()), (0, 0));
        assert_eq!(average_precision(&gt, &gt, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_objects_do_not_match() {
        let mut gt = Array2::zeros((6, 6));
        gt.slice_mut(s![0..2, 0..2]).fill(1);
        let mut pred = Array2::zeros((6, 6));
        pred.slice_mut(s![4..6, 4..6]).fill(1);
        let m = match_for_ap(&gt, &pred, 0.5).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 1, 1));
    }

    #[test]
    fn one_match_one_spurious_one_missed() {
        let mut gt = Array2::zeros((10, 10));
        gt.slice_mut(s![0..3, 0..3]).fill(1);
        gt.slice_mut(s![6..9, 6..9]).fill(2);
        let mut pred = Array2::zeros((10, 10));
        pred.slice_mut(s![0..3, 0..3]).fill(5);
        pred.slice_mut(s![0..3, 6..9]).fill(6);
        assert!((average_precision(&gt, &pred, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let mut gt = Array2::zeros((5, 5));
        gt[[1, 1]] = 1;
        gt[[3, 3]] = 2;
        assert_eq!(average_precision(&gt, &Array2::zeros((5, 5)), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Array2::zeros((3, 3));
        let b = Array2::zeros((3, 4));
        assert!(match_for_ap(&a, &b, 0.5).is_err());
    }
}
