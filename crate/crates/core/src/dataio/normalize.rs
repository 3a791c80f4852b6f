use crate::{Error, RawImage, Result};

/// Default lower/upper percentiles for per-image normalization.
pub const DEFAULT_PERCENTILES: (f64, f64) = (1.0, 99.8);

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    a + (b - a) * frac
}

/// Maps the `p_low`/`p_high` percentiles of the image to 0 and 1. Values
/// outside that range are kept (no clipping); constant images become zero.
pub fn normalize(image: &RawImage, p_low: f64, p_high: f64) -> Result<RawImage> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got ({p_low}, {p_high})"
        )));
    }
    let mut sorted: Vec<f32> = image.iter().copied().collect();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, p_low);
    let hi = percentile_sorted(&sorted, p_high);
    if hi <= lo {
        return Ok(RawImage::zeros(image.dim()));
    }
    let scale = 1.0 / (hi - lo);
    Ok(image.mapv(|v| ((v as f64 - lo) * scale) as f32))
}
