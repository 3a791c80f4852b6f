use std::path::Path;

use nucleiseg::dataio::{write_image, write_labels};
use nucleiseg_testkit::{generate, NucleiConfig};

use crate::{Error, Result};

/// Writes a clean synthetic dataset with `train/` and `test/` splits,
/// each holding `images/` and `masks/`.
pub fn write_synthetic_dataset(root: &Path, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<()> {
    let cfg = NucleiConfig {
        height: size,
        width: size,
        ..NucleiConfig::default()
    };
    for (split, n, offset) in [("train", n_train, 0u64), ("test", n_test, 1 << 32)] {
        let images = root.join(split).join("images");
        let masks = root.join(split).join("masks");
        for d in [&images, &masks] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for i in 0..n {
            let (image, labels) = generate(&cfg, seed.wrapping_add(offset + i as u64));
            let stem = format!("{split}_{i:05}");
            write_image(&images.join(format!("{stem}.tif")), &image)?;
            write_labels(&masks.join(format!("{stem}.tif")), &labels)?;
        }
    }
    Ok(())
}
