//! Self-supervised blind-spot denoising: pixel masking, the masked loss
//! and the training loop over unlabeled imagery.

mod loss;
mod mask;
mod train;

pub use loss::{masked_mse_loss, masked_mse_with_grad};
pub use mask::{
    blind_pixels, sample_mask, sample_mask_with_radius, MaskPlan, DEFAULT_MASK_FRACTION,
    DEFAULT_REPLACEMENT_RADIUS,
};
pub use train::{denoise_image, train_n2v, train_n2v_from, N2VBatch, N2VConfig};
