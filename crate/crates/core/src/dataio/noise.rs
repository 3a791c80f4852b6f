use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{list_image_files, read_image, write_image, DatasetLayout};
use crate::{Error, RawImage, Result};

/// Additive i.i.d. Gaussian corruption of one dataset variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f32,
    pub std: f32,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(std: f32, seed: u64) -> Self {
        Self {
            mean: 0.0,
            std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std >= 0.0) || !self.std.is_finite() || !self.mean.is_finite() {
            return Err(Error::invalid(format!("invalid noise std {}", self.std)));
        }
        Ok(())
    }

    /// Dataset-variant name such as `n40`.
    pub fn label(&self) -> String {
        format!("n{}", self.std)
    }
}

pub fn add_gaussian_noise(image: &RawImage, spec: &NoiseSpec) -> Result<RawImage> {
    spec.validate()?;
    if spec.std == 0.0 && spec.mean == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(spec.mean, spec.std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Row-major iteration keeps the draw order independent of memory layout.
    let mut out = image.clone();
    for v in out.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Directory of the cached noisy variant, e.g. `<root>/noise_n40`.
pub fn noisy_variant_dir(root: &Path, spec: &NoiseSpec) -> PathBuf {
    root.join(format!("noise_{}", spec.label()))
}

/// Writes the corrupted copy of every image under the layout's split
/// directories into `<root>/noise_n<std>/`, mirroring the source layout.
/// Label maps are copied unchanged. An existing variant is reused.
pub fn materialize_noisy_variant(
    root: &Path,
    layout: &DatasetLayout,
    spec: &NoiseSpec,
) -> Result<PathBuf> {
    spec.validate()?;
    let out_root = noisy_variant_dir(root, spec);
    let marker = out_root.join(".complete");
    if marker.exists() {
        return Ok(out_root);
    }
    for (split_idx, dir) in layout.split_dirs().into_iter().enumerate() {
        let src_images = root.join(&dir).join("images");
        let src_masks = root.join(&dir).join("masks");
        let dst_images = out_root.join(&dir).join("images");
        let dst_masks = out_root.join(&dir).join("masks");
        std::fs::create_dir_all(&dst_images).map_err(|e| Error::io(&dst_images, e))?;
        std::fs::create_dir_all(&dst_masks).map_err(|e| Error::io(&dst_masks, e))?;
        for (i, (stem, path)) in list_image_files(&src_images)?.into_iter().enumerate() {
            let image = read_image(&path)?;
            let file_spec = NoiseSpec {
                seed: derive_seed(spec.seed, split_idx as u64, i as u64),
                ..*spec
            };
            let noisy = add_gaussian_noise(&image, &file_spec)?;
            write_image(&dst_images.join(format!("{stem}.tif")), &noisy)?;
        }
        for (_, path) in list_image_files(&src_masks)? {
            let name = path.file_name().expect("listed files have names");
            std::fs::copy(&path, dst_masks.join(name)).map_err(|e| Error::io(&path, e))?;
        }
    }
    std::fs::write(&marker, spec.label()).map_err(|e| Error::io(&marker, e))?;
    Ok(out_root)
}

fn derive_seed(base: u64, split: u64, index: u64) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = base ^ (split << 40) ^ index;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
