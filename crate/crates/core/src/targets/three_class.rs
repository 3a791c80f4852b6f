use ndarray::Array2;

use crate::{Error, InstanceLabelMap, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PixelClass {
    Background = 0,
    Foreground = 1,
    Border = 2,
}

impl PixelClass {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-pixel background / foreground / border classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreeClassMap {
    pub classes: Array2<u8>,
}

impl ThreeClassMap {
    pub fn count(&self, class: PixelClass) -> usize {
        self.classes.iter().filter(|&&c| c == class as u8).count()
    }
}

/// Per-pixel loss multipliers: `w_border` on border pixels, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderWeightMap {
    pub weights: Array2<f32>,
}

/// An object pixel is border when any in-image 8-neighbor carries a
/// different label (background or another object).
pub fn to_three_class(labels: &InstanceLabelMap) -> ThreeClassMap {
    let (h, w) = labels.dim();
    let mut classes = Array2::from_elem((h, w), PixelClass::Background as u8);
    for r in 0..h {
        for c in 0..w {
            let id = labels[[r, c]];
            if id == 0 {
                continue;
            }
            let mut border = false;
            'nb: for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    if labels[[nr, nc]] != id {
                        border = true;
                        break 'nb;
                    }
                }
            }
            classes[[r, c]] = if border {
                PixelClass::Border
            } else {
                PixelClass::Foreground
            } as u8;
        }
    }
    ThreeClassMap { classes }
}

pub fn class_weight_map(classes: &ThreeClassMap, w_border: f32) -> Result<BorderWeightMap> {
    if !(w_border > 0.0) || !w_border.is_finite() {
        return Err(Error::invalid(format!("border weight must be positive, got {w_border}")));
    }
    let weights = classes.classes.mapv(|c| {
        if c == PixelClass::Border as u8 {
            w_border
        } else {
            1.0
        }
    });
    Ok(BorderWeightMap { weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BG: u8 = 0;
    const FG: u8 = 1;
    const BD: u8 = 2;

    #[test]
    fn empty_map_is_all_background() {
        let tc = to_three_class(&Array2::zeros((5, 6)));
        assert!(tc.classes.iter().all(|&c| c == BG));
    }

    #[test]
    fn three_by_three_object_has_foreground_center() {
        let mut l = Array2::zeros((9, 9));
        l.slice_mut(ndarray::s![3..6, 3..6]).fill(4);
        let tc = to_three_class(&l);
        assert_eq!(tc.classes[[4, 4]], FG);
        assert_eq!(tc.count(PixelClass::Border), 8);
        assert_eq!(tc.count(PixelClass::Foreground), 1);
    }

    #[test]
    fn touching_instances_share_a_border() {
        // 4x4: left half id 1, right half id 2
        let l = Array2::from_shape_fn((4, 4), |(_, c)| if c < 2 { 1 } else { 2 });
        let tc = to_three_class(&l);
        #[rustfmt::skip]
        let expected = Array2::from_shape_vec((4, 4), vec![
            FG, BD, BD, FG,
            FG, BD, BD, FG,
            FG, BD, BD, FG,
            FG, BD, BD, FG,
        ]).unwrap();
        assert_eq!(tc.classes, expected);
    }

    #[test]
    fn weight_map_sums() {
        let mut l = Array2::zeros((10, 10));
        l.slice_mut(ndarray::s![2..7, 2..7]).fill(1);
        let tc = to_three_class(&l);
        let k = tc.count(PixelClass::Border) as f32;
        let wm = class_weight_map(&tc, 5.0).unwrap();
        assert_eq!(wm.weights.sum(), (100.0 - k) + 5.0 * k);
        let uniform = class_weight_map(&tc, 1.0).unwrap();
        assert!(uniform.weights.iter().all(|&w| w == 1.0));
        let bg = class_weight_map(&to_three_class(&Array2::zeros((3, 3))), 5.0).unwrap();
        assert!(bg.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn non_positive_weight_rejected() {
        let tc = to_three_class(&Array2::zeros((2, 2)));
        assert!(class_weight_map(&tc, 0.0).is_err());
        assert!(class_weight_map(&tc, -5.0).is_err());
    }

    fn components_4(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = mask.dim();
        let mut seen = Array2::from_elem((h, w), false);
        let mut comps = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] || seen[[r, c]] {
                    continue;
                }
                let mut stack = vec![(r, c)];
                seen[[r, c]] = true;
                let mut comp = Vec::new();
                while let Some((y, x)) = stack.pop() {
                    comp.push((y, x));
                    let nbs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                    for (ny, nx) in nbs {
                        if ny < h && nx < w && mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
                comp.sort();
                comps.push(comp);
            }
        }
        comps.sort();
        comps
    }

    proptest! {
        #[test]
        fn classes_partition_instances(cells in proptest::collection::vec(0u32..4, 144)) {
            let l = Array2::from_shape_vec((12, 12), cells).unwrap();
            let tc = to_three_class(&l);
            let objects = l.iter().filter(|&&v| v > 0).count();
            prop_assert_eq!(tc.count(PixelClass::Foreground) + tc.count(PixelClass::Border), objects);
            for (c, &id) in tc.classes.iter().zip(l.iter()) {
                prop_assert_eq!(*c == BG, id == 0);
            }
        }

        #[test]
        fn separated_rectangles_reconstruct(
            rects in proptest::collection::vec((0usize..5, 0usize..5, 1usize..4, 1usize..4), 1..5)
        ) {
            // each rectangle lives in its own 8x8 cell of a 2x2 grid of cells (non-touching)
            let mut l = Array2::<u32>::zeros((16, 16));
            for (i, &(r, c, hh, ww)) in rects.iter().enumerate().take(4) {
                let (oy, ox) = ((i / 2) * 8, (i % 2) * 8);
                l.slice_mut(ndarray::s![oy + r..oy + r + hh, ox + c..ox + c + ww]).fill(i as u32 + 1);
            }
            let tc = to_three_class(&l);
            let mask = tc.classes.mapv(|c| c != BG);
            let got = components_4(&mask);
            let want = components_4(&l.mapv(|v| v > 0));
            prop_assert_eq!(got, want);
        }
    }
}
