use ndarray::s;

use super::ImagePair;

/// Non-overlapping `size`×`size` tiling from the top-left corner. Residual
/// borders narrower than `size` are dropped; images smaller than `size` are
/// skipped with a warning.
pub fn extract_patches(pairs: &[ImagePair], size: usize) -> Vec<ImagePair> {
    let mut out = Vec::new();
    if size == 0 {
        log::warn!("patch size 0 requested; no patches extracted");
        return out;
    }
    for pair in pairs {
        let (h, w) = pair.dim();
        if size > h || size > w {
            log::warn!(
                "skipping {}: {h}x{w} is smaller than the {size}x{size} patch",
                pair.name
            );
            continue;
        }
        for r in 0..h / size {
            for c in 0..w / size {
                let win = s![r * size..(r + 1) * size, c * size..(c + 1) * size];
                out.push(ImagePair::new(
                    format!("{}_r{r}_c{c}", pair.name),
                    pair.image.slice(win).to_owned(),
                    pair.labels.slice(win).to_owned(),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pair(h: usize, w: usize) -> ImagePair {
        ImagePair::new(
            "img",
            Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f32),
            Array2::from_shape_fn((h, w), |(r, c)| (r / 10 * 100 + c / 10) as u32),
        )
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(extract_patches(&[pair(256, 256)], 128).len(), 4);
        assert_eq!(extract_patches(&[pair(300, 300)], 128).len(), 4);
        assert_eq!(extract_patches(&[pair(100, 300)], 128).len(), 0);
    }

    #[test]
    fn exact_size_is_identity() {
        let p = pair(128, 128);
        let out = extract_patches(std::slice::from_ref(&p), 128);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].image, p.image);
        assert_eq!(out[0].labels, p.labels);
    }

    #[test]
    fn label_ids_survive_clipping() {
        let p = pair(256, 256);
        let out = extract_patches(std::slice::from_ref(&p), 128);
        let br = &out[3];
        assert_eq!(br.labels[[0, 0]], p.labels[[128, 128]]);
        assert_eq!(br.image[[5, 7]], p.image[[133, 135]]);
    }
}
