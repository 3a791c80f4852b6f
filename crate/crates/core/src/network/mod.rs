//! U-Net backbone shared by the denoiser and both segmentation heads, plus
//! checkpointing and weight transfer between heads.

mod snapshot;
mod transfer;
mod unet;

pub use snapshot::{SnapshotMeta, StoredTensor, WeightSnapshot};
pub use transfer::{transfer_weights, TransferPolicy};
pub use unet::UNet;

use serde::{Deserialize, Serialize};

use crate::targets::DEFAULT_N_RAYS;

/// Output head of the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One linear channel regressing denoised intensities.
    Denoise,
    /// Three class logits (background, foreground, border) plus one linear
    /// regression channel.
    Joint,
    /// Ray distances (rectified) followed by one object-probability logit.
    Star,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Denoise => 1,
            Head::Joint => 4,
            Head::Star => DEFAULT_N_RAYS + 1,
        }
    }

    /// Index of the intensity-regression channel, when the head has one.
    pub fn regression_channel(self) -> Option<usize> {
        match self {
            Head::Denoise => Some(0),
            Head::Joint => Some(3),
            Head::Star => None,
        }
    }
}

/// Architecture of one U-Net. Convolutions are always 3×3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Number of down-sampling levels.
    pub depth: usize,
    /// Feature maps of the first level; doubled at every level below.
    pub base_features: usize,
    pub batch_norm: bool,
    pub head: Head,
}

impl NetworkSpec {
    pub const DEFAULT_DEPTH: usize = 2;
    pub const DEFAULT_BASE_FEATURES: usize = 32;

    pub fn new(head: Head) -> Self {
        Self {
            depth: Self::DEFAULT_DEPTH,
            base_features: Self::DEFAULT_BASE_FEATURES,
            batch_norm: true,
            head,
        }
    }

    pub fn with_head(self, head: Head) -> Self {
        Self { head, ..self }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.depth == 0 || self.base_features == 0 {
            return Err(crate::Error::invalid(format!(
                "network depth and base features must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Same body architecture, irrespective of head.
    pub fn same_body(&self, other: &NetworkSpec) -> bool {
        self.depth == other.depth
            && self.base_features == other.base_features
            && self.batch_norm == other.batch_norm
    }
}
