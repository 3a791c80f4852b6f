use ndarray::Array2;

use crate::{Error, Result};

/// Mean of `(pred - target)²` over the pixels where `mask` is set.
pub fn masked_mse_loss(pred: &Array2<f32>, target: &Array2<f32>, mask: &Array2<bool>) -> Result<f64> {
    Ok(masked_mse_with_grad(pred, target, mask)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn masked_mse_with_grad(
    pred: &Array2<f32>,
    target: &Array2<f32>,
    mask: &Array2<bool>,
) -> Result<(f64, Array2<f32>)> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::ShapeMismatch {
            what: "prediction, target and mask".into(),
            left: pred.dim(),
            right: if pred.dim() != target.dim() { target.dim() } else { mask.dim() },
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::invalid("masked loss needs at least one masked pixel"));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (((g, &p), &t), &m) in grad.iter_mut().zip(pred).zip(target).zip(mask) {
        if m {
            let d = p as f64 - t as f64;
            sum += d * d;
            *g = (2.0 * d / n as f64) as f32;
        }
    }
    Ok((sum / n as f64, grad))
}
