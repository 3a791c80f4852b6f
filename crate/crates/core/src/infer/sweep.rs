use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default threshold grid: 0.10, 0.15, ..., 0.90.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=16).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepResult {
    pub grid: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub best_threshold: f64,
    pub best_ap: f64,
}

impl ThresholdSweepResult {
    /// Picks the maximum AP; ties go to the lowest threshold.
    pub fn from_scores(grid: Vec<f64>, ap_per_threshold: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != ap_per_threshold.len() {
            return Err(Error::invalid("threshold grid must be non-empty and aligned with scores"));
        }
        let mut best = 0;
        for i in 1..grid.len() {
            let (a, b) = (ap_per_threshold[i], ap_per_threshold[best]);
            if a > b || (a == b && grid[i] < grid[best]) {
                best = i;
            }
        }
        Ok(Self {
            best_threshold: grid[best],
            best_ap: ap_per_threshold[best],
            grid,
            ap_per_threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_values() {
        let g = default_threshold_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[8], 0.5);
        assert_eq!(g[16], 0.9);
    }

    #[test]
    fn ties_prefer_lowest_threshold() {
        let r = ThresholdSweepResult::from_scores(vec![0.7, 0.3, 0.5], vec![0.8, 0.8, 0.2]).unwrap();
        assert_eq!(r.best_threshold, 0.3);
        let one = ThresholdSweepResult::from_scores(vec![0.4], vec![0.1]).unwrap();
        assert_eq!(one.best_threshold, 0.4);
        assert!(ThresholdSweepResult::from_scores(vec![], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn best_is_grid_maximum(aps in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let grid: Vec<f64> = (0..aps.len()).map(|i| i as f64 / 20.0).collect();
            let r = ThresholdSweepResult::from_scores(grid.clone(), aps.clone()).unwrap();
            let max = aps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(r.best_ap, max);
            let first = aps.iter().position(|&a| a == max).unwrap();
            prop_assert_eq!(r.best_threshold, grid[first]);
        }
    }
}
