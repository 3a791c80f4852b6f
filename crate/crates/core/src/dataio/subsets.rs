use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stacked training subset sizes for the DSB 2018 nuclei patches.
pub const DSB_SUBSET_SIZES: [usize; 10] = [10, 19, 38, 76, 152, 304, 608, 1216, 2432, 3800];

/// Stacked training subset sizes for the BBBC004 synthetic nuclei patches.
pub const BBBC_SUBSET_SIZES: [usize; 10] = [2, 4, 7, 15, 30, 60, 120, 239, 479, 748];

/// Nested training subsets `P1 ⊂ P2 ⊂ … ⊂ Pn` drawn from one permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub indices: Vec<Vec<usize>>,
}

impl SubsetPlan {
    /// Indices of subset `P_i`, with `i` counted from 1.
    pub fn subset(&self, i: usize) -> Result<&[usize]> {
        if i == 0 || i > self.indices.len() {
            return Err(Error::invalid(format!(
                "subset index {i} outside 1..={}",
                self.indices.len()
            )));
        }
        Ok(&self.indices[i - 1])
    }
}

pub fn make_subsets(train_size: usize, sizes: &[usize], seed: u64) -> Result<SubsetPlan> {
    if sizes.is_empty() {
        return Err(Error::invalid("no subset sizes given"));
    }
    if sizes[0] == 0 {
        return Err(Error::invalid("subset sizes must be positive"));
    }
    if let Some(w) = sizes.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "subset sizes must be strictly increasing, got {} then {}",
            w[0], w[1]
        )));
    }
    let largest = *sizes.last().unwrap();
    if largest > train_size {
        return Err(Error::invalid(format!(
            "largest subset ({largest}) exceeds training pool ({train_size})"
        )));
    }

    let mut perm: Vec<usize> = (0..train_size).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let indices = sizes.iter().map(|&s| perm[..s].to_vec()).collect();
    Ok(SubsetPlan {
        sizes: sizes.to_vec(),
        seed,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn bbbc_plan_is_nested() {
        let plan = make_subsets(748, &BBBC_SUBSET_SIZES, 3).unwrap();
        for (i, w) in plan.indices.windows(2).enumerate() {
            let outer: HashSet<_> = w[1].iter().collect();
            assert!(w[0].iter().all(|x| outer.contains(x)), "P{} ⊄ P{}", i + 1, i + 2);
        }
        let sizes: Vec<_> = plan.indices.iter().map(Vec::len).collect();
        assert_eq!(sizes, BBBC_SUBSET_SIZES);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(make_subsets(100, &[5, 5, 6], 0).is_err());
        assert!(make_subsets(100, &[5, 4], 0).is_err());
        assert!(make_subsets(10, &[5, 11], 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_subsets(500, &DSB_SUBSET_SIZES[..5], 11).unwrap();
        let b = make_subsets(500, &DSB_SUBSET_SIZES[..5], 11).unwrap();
        let c = make_subsets(500, &DSB_SUBSET_SIZES[..5], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn subset_lookup_is_one_based() {
        let plan = make_subsets(20, &[2, 4], 0).unwrap();
        assert_eq!(plan.subset(1).unwrap().len(), 2);
        assert!(plan.subset(0).is_err());
        assert!(plan.subset(3).is_err());
    }
}
