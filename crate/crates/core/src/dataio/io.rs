use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use super::{DatasetSplit, ImagePair};
use crate::{Error, InstanceLabelMap, RawImage, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["tif", "tiff", "png"];

/// Where validation pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSource {
    None,
    /// A dedicated directory with its own `images/` and `masks/`.
    Dir(PathBuf),
    /// A seeded random holdout of `count` pairs taken from the training directory.
    Holdout { count: usize, seed: u64 },
}

/// Describes how a dataset root is partitioned on disk.
///
/// Every split directory contains `images/` and `masks/` whose files pair
/// up by file stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub train_dir: PathBuf,
    pub validation: ValidationSource,
    pub test_dir: Option<PathBuf>,
}

impl DatasetLayout {
    /// `train/` holds 4470 patches of which 670 are held out for validation;
    /// `test/` holds the 50 full-size test images.
    pub fn dsb(seed: u64) -> Self {
        Self {
            train_dir: "train".into(),
            validation: ValidationSource::Holdout { count: 670, seed },
            test_dir: Some("test".into()),
        }
    }

    /// `train/` holds 880 patches with 132 held out for validation; `test/`
    /// holds 220 patches.
    pub fn bbbc(seed: u64) -> Self {
        Self {
            train_dir: "train".into(),
            validation: ValidationSource::Holdout { count: 132, seed },
            test_dir: Some("test".into()),
        }
    }

    /// The root itself is the training directory; no validation or test data.
    pub fn flat() -> Self {
        Self {
            train_dir: PathBuf::new(),
            validation: ValidationSource::None,
            test_dir: None,
        }
    }

    /// Distinct directories (relative to the root) holding image/label pairs.
    pub fn split_dirs(&self) -> Vec<PathBuf> {
        let mut dirs = vec![self.train_dir.clone()];
        if let ValidationSource::Dir(d) = &self.validation {
            dirs.push(d.clone());
        }
        if let Some(t) = &self.test_dir {
            dirs.push(t.clone());
        }
        dirs
    }
}

pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let mut train = load_pairs_dir(&root.join(&layout.train_dir))?;
    let validation = match &layout.validation {
        ValidationSource::None => Vec::new(),
        ValidationSource::Dir(d) => load_pairs_dir(&root.join(d))?,
        ValidationSource::Holdout { count, seed } => {
            if *count > train.len() {
                return Err(Error::invalid(format!(
                    "validation holdout of {count} exceeds the {} training pairs",
                    train.len()
                )));
            }
            let mut picked = sample(&mut ChaCha8Rng::seed_from_u64(*seed), train.len(), *count)
                .into_vec();
            picked.sort_unstable();
            let mut val = Vec::with_capacity(*count);
            for &i in picked.iter().rev() {
                val.push(train.remove(i));
            }
            val.reverse();
            val
        }
    };
    let test = match &layout.test_dir {
        Some(d) => load_pairs_dir(&root.join(d))?,
        None => Vec::new(),
    };
    if train.is_empty() && validation.is_empty() && test.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

/// Loads every `images/<stem>.*` with its `masks/<stem>.*` partner, sorted by stem.
pub fn load_pairs_dir(dir: &Path) -> Result<Vec<ImagePair>> {
    let images = list_image_files(&dir.join("images"))?;
    let masks = list_image_files(&dir.join("masks"))?;
    if images.is_empty() && masks.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    if let Some((_, orphan)) = masks.iter().find(|(stem, _)| !images.contains_key(*stem)) {
        return Err(Error::MissingPair(orphan.clone()));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = masks
            .get(&stem)
            .ok_or_else(|| Error::MissingPair(image_path.clone()))?;
        let image = read_image(&image_path)?;
        let labels = read_labels(mask_path)?;
        if image.dim() != labels.dim() {
            return Err(Error::ShapeMismatch {
                what: format!("{} and {}", image_path.display(), mask_path.display()),
                left: image.dim(),
                right: labels.dim(),
            });
        }
        pairs.push(ImagePair::new(stem, image, labels));
    }
    Ok(pairs)
}

/// Supported image files in `dir` keyed by stem. A missing directory is empty.
pub(crate) fn list_image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::invalid(format!(
                "duplicate stem `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn is_tiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("tif" | "tiff")
    )
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn encode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Encode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Raw TIFF samples as f64 plus (height, width, samples per pixel).
fn read_tiff(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| decode_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| decode_err(path, e))?;
    let (w, h) = (w as usize, h as usize);
    let samples: Vec<f64> = match dec.read_image().map_err(|e| decode_err(path, e))? {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f64).collect(),
    };
    if w == 0 || h == 0 || !samples.len().is_multiple_of(w * h) {
        return Err(decode_err(path, "unexpected sample count"));
    }
    let spp = samples.len() / (w * h);
    Ok((samples, h, w, spp))
}

/// Reads a grayscale image in its native intensity units. Color images are
/// reduced to the mean of their color channels (alpha ignored).
pub fn read_image(path: &Path) -> Result<RawImage> {
    let img = if is_tiff(path) {
        let (samples, h, w, spp) = read_tiff(path)?;
        let color = match spp {
            2 => 1,
            4 => 3,
            n => n,
        };
        Array2::from_shape_fn((h, w), |(r, c)| {
            let px = &samples[(r * w + c) * spp..][..color];
            (px.iter().sum::<f64>() / color as f64) as f32
        })
    } else {
        let dynimg = image::open(path).map_err(|e| decode_err(path, e))?;
        dynamic_to_array(dynimg)
    };
    if img.iter().any(|v| !v.is_finite()) {
        return Err(decode_err(path, "non-finite pixel values"));
    }
    Ok(img)
}

fn dynamic_to_array(img: DynamicImage) -> RawImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => {
            Array2::from_shape_vec((h, w), b.into_raw().into_iter().map(f32::from).collect())
                .expect("buffer matches dimensions")
        }
        DynamicImage::ImageLuma16(b) => {
            Array2::from_shape_vec((h, w), b.into_raw().into_iter().map(f32::from).collect())
                .expect("buffer matches dimensions")
        }
        other => {
            let rgb = other.into_rgb32f();
            Array2::from_shape_fn((h, w), |(r, c)| {
                let p = rgb.get_pixel(c as u32, r as u32).0;
                (p[0] + p[1] + p[2]) / 3.0
            })
        }
    }
}

/// Reads an instance label map. Ids must be non-negative integers ≤ 65535.
pub fn read_labels(path: &Path) -> Result<InstanceLabelMap> {
    let (samples, h, w) = if is_tiff(path) {
        let (samples, h, w, spp) = read_tiff(path)?;
        if spp != 1 {
            return Err(decode_err(path, "label maps must be single-channel"));
        }
        (samples, h, w)
    } else {
        let img = image::open(path).map_err(|e| decode_err(path, e))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let samples: Vec<f64> = match img {
            DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
            DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
            _ => return Err(decode_err(path, "label maps must be single-channel")),
        };
        (samples, h, w)
    };
    let mut ids = Vec::with_capacity(samples.len());
    for v in samples {
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(decode_err(path, format!("invalid label value {v}")));
        }
        if v > u16::MAX as f64 {
            return Err(Error::LabelOverflow {
                path: path.to_path_buf(),
                id: v as u64,
            });
        }
        ids.push(v as u32);
    }
    Ok(Array2::from_shape_vec((h, w), ids).expect("buffer matches dimensions"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes a 32-bit float TIFF; values are stored exactly, without clipping.
pub fn write_image(path: &Path, image: &RawImage) -> Result<()> {
    let (h, w) = image.dim();
    let data: Vec<f32> = image.iter().copied().collect();
    let mut enc = TiffEncoder::new(create(path)?).map_err(|e| encode_err(path, e))?;
    enc.write_image::<colortype::Gray32Float>(w as u32, h as u32, &data)
        .map_err(|e| encode_err(path, e))
}

/// Writes a 16-bit label map as PNG or TIFF depending on the extension.
pub fn write_labels(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    let (h, w) = labels.dim();
    let mut data = Vec::with_capacity(h * w);
    for &id in labels.iter() {
        let id16 = u16::try_from(id).map_err(|_| Error::LabelOverflow {
            path: path.to_path_buf(),
            id: id as u64,
        })?;
        data.push(id16);
    }
    if is_tiff(path) {
        let mut enc = TiffEncoder::new(create(path)?).map_err(|e| encode_err(path, e))?;
        enc.write_image::<colortype::Gray16>(w as u32, h as u32, &data)
            .map_err(|e| encode_err(path, e))
    } else {
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, data)
            .expect("buffer matches dimensions");
        let mut out = create(path)?;
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| encode_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, stem: &str, h: usize, w: usize) {
        let img = Array2::from_shape_fn((h, w), |(r, c)| (r + c) as f32 * 0.5);
        let lbl = Array2::from_shape_fn((h, w), |(r, c)| ((r / 2 + c / 2) % 3) as u32);
        write_image(&dir.join("images").join(format!("{stem}.tif")), &img).unwrap();
        write_labels(&dir.join("masks").join(format!("{stem}.png")), &lbl).unwrap();
    }

    #[test]
    fn empty_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_dataset(tmp.path(), &DatasetLayout::flat()).unwrap_err();
        assert!(err.to_string().contains("no image/label pairs found"), "{err}");
    }

    #[test]
    fn single_pair_goes_to_train() {
        let tmp = tempfile::tempdir().unwrap();
        write_pair(tmp.path(), "a", 128, 128);
        let split = load_dataset(tmp.path(), &DatasetLayout::flat()).unwrap();
        assert_eq!(split.counts(), (1, 0, 0));
        assert_eq!(split.train[0].dim(), (128, 128));
    }

    #[test]
    fn missing_mask_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_pair(tmp.path(), "a", 8, 8);
        write_image(&tmp.path().join("images/b.tif"), &Array2::zeros((8, 8))).unwrap();
        let err = load_dataset(tmp.path(), &DatasetLayout::flat()).unwrap_err();
        assert!(matches!(&err, Error::MissingPair(p) if p.ends_with("b.tif")), "{err}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_image(&tmp.path().join("images/a.tif"), &Array2::zeros((8, 8))).unwrap();
        write_labels(&tmp.path().join("masks/a.png"), &Array2::zeros((8, 9))).unwrap();
        let err = load_dataset(tmp.path(), &DatasetLayout::flat()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn float_tiff_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.tif");
        let img = Array2::from_shape_fn((5, 7), |(r, c)| r as f32 * -3.25 + c as f32 * 0.1);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn labels_round_trip_png_and_tiff() {
        let tmp = tempfile::tempdir().unwrap();
        let lbl = Array2::from_shape_fn((6, 4), |(r, c)| (r * 4 + c) as u32 * 1000);
        for name in ["l.png", "l.tif"] {
            let path = tmp.path().join(name);
            write_labels(&path, &lbl).unwrap();
            assert_eq!(read_labels(&path).unwrap(), lbl);
        }
    }

    #[test]
    fn oversized_label_ids_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("big.tif");
        let file = create(&path).unwrap();
        let mut enc = TiffEncoder::new(file).unwrap();
        enc.write_image::<colortype::Gray32>(2, 1, &[1u32, 70000]).unwrap();
        drop(enc);
        assert!(matches!(read_labels(&path), Err(Error::LabelOverflow { id: 70000, .. })));
        let lbl = Array2::from_elem((1, 1), 70000u32);
        assert!(write_labels(&tmp.path().join("o.png"), &lbl).is_err());
    }

    #[test]
    fn holdout_partitions_train_dir() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 0..12 {
            write_pair(&tmp.path().join("train"), &format!("p{i:02}"), 4, 4);
        }
        for i in 0..3 {
            write_pair(&tmp.path().join("test"), &format!("t{i}"), 6, 5);
        }
        let layout = DatasetLayout {
            train_dir: "train".into(),
            validation: ValidationSource::Holdout { count: 4, seed: 9 },
            test_dir: Some("test".into()),
        };
        let split = load_dataset(tmp.path(), &layout).unwrap();
        assert_eq!(split.counts(), (8, 4, 3));
        let mut names: Vec<_> = split
            .train
            .iter()
            .chain(&split.validation)
            .map(|p| p.name.clone())
            .collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 12);
        let again = load_dataset(tmp.path(), &layout).unwrap();
        assert_eq!(split.validation, again.validation);
    }
}
