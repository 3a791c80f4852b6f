use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, RawImage, Result};

/// Fraction of pixels blinded per patch (64 pixels of a 64×64 patch).
pub const DEFAULT_MASK_FRACTION: f64 = 0.015625;
/// Replacement values come from the 5×5 neighborhood.
pub const DEFAULT_REPLACEMENT_RADIUS: usize = 2;

/// Pixels to blind in one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Unique `(row, col)` coordinates.
    pub coords: Vec<(usize, usize)>,
    pub fraction: f64,
    pub replacement_radius: usize,
}

impl MaskPlan {
    pub fn to_mask(&self, shape: (usize, usize)) -> Array2<bool> {
        let mut m = Array2::from_elem(shape, false);
        for &(r, c) in &self.coords {
            m[[r, c]] = true;
        }
        m
    }
}

/// Draws `max(1, round(fraction · area))` distinct coordinates uniformly.
pub fn sample_mask(shape: (usize, usize), fraction: f64, seed: u64) -> Result<MaskPlan> {
    sample_mask_with_radius(shape, fraction, DEFAULT_REPLACEMENT_RADIUS, seed)
}

pub fn sample_mask_with_radius(
    (h, w): (usize, usize),
    fraction: f64,
    replacement_radius: usize,
    seed: u64,
) -> Result<MaskPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("mask fraction must lie in (0, 1), got {fraction}")));
    }
    let area = h * w;
    if area == 0 {
        return Err(Error::invalid("cannot mask an empty patch"));
    }
    let count = ((fraction * area as f64).round() as usize).clamp(1, area);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, area, count)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    Ok(MaskPlan {
        coords,
        fraction,
        replacement_radius,
    })
}

/// Replaces every planned pixel by a uniformly drawn other pixel from its
/// square neighborhood (clipped to the patch). Values are read from the
/// original patch, so replacements never chain.
pub fn blind_pixels(patch: &RawImage, plan: &MaskPlan, seed: u64) -> RawImage {
    let (h, w) = patch.dim();
    let rad = plan.replacement_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = patch.clone();
    for &(r, c) in &plan.coords {
        let (r0, r1) = (r.saturating_sub(rad), (r + rad).min(h - 1));
        let (c0, c1) = (c.saturating_sub(rad), (c + rad).min(w - 1));
        let ww = c1 - c0 + 1;
        let n = (r1 - r0 + 1) * ww;
        if n <= 1 {
            continue;
        }
        let center = (r - r0) * ww + (c - c0);
        let mut k = rng.random_range(0..n - 1);
        if k >= center {
            k += 1;
        }
        out[[r, c]] = patch[[r0 + k / ww, c0 + k % ww]];
    }
    out
}
