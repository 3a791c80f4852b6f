//! Dataset ingestion, patching, nested training subsets, synthetic noise,
//! intensity normalization and dihedral augmentation.

mod augment;
mod io;
mod noise;
mod normalize;
mod patches;
mod subsets;

pub use augment::{augment8, Dihedral};
pub use io::{
    load_dataset, load_pairs_dir, read_image, read_labels, write_image, write_labels,
    DatasetLayout, ValidationSource,
};
pub use noise::{add_gaussian_noise, materialize_noisy_variant, noisy_variant_dir, NoiseSpec};
pub use normalize::{normalize, percentile, DEFAULT_PERCENTILES};
pub use patches::extract_patches;
pub use subsets::{make_subsets, SubsetPlan, BBBC_SUBSET_SIZES, DSB_SUBSET_SIZES};

use crate::{InstanceLabelMap, RawImage};

/// An image together with its instance annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    /// File stem (or patch name) this pair was read from.
    pub name: String,
    pub image: RawImage,
    pub labels: InstanceLabelMap,
}

impl ImagePair {
    pub fn new(name: impl Into<String>, image: RawImage, labels: InstanceLabelMap) -> Self {
        debug_assert_eq!(image.dim(), labels.dim());
        Self {
            name: name.into(),
            image,
            labels,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// Train / validation / test partition of a dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImagePair>,
    pub validation: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// All unlabeled imagery a denoiser may see: train and validation, never test.
    pub fn denoiser_imagery(&self) -> Vec<RawImage> {
        self.train
            .iter()
            .chain(&self.validation)
            .map(|p| p.image.clone())
            .collect()
    }
}
