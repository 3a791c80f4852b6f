use ndarray::{s, Array2};

use crate::{Error, Result};

/// An element of the dihedral group D4 acting on square arrays: an optional
/// horizontal flip followed by `rot` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, g) in out.iter_mut().enumerate() {
            *g = Dihedral {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    pub fn apply<T: Clone>(&self, a: &Array2<T>) -> Array2<T> {
        let mut cur = if self.flip {
            standard(a.slice(s![.., ..;-1]))
        } else {
            standard(a.view())
        };
        for _ in 0..self.rot % 4 {
            cur = standard(cur.t().slice(s![..;-1, ..]));
        }
        cur
    }
}

/// Row-major copy, whatever the strides of the view.
fn standard<T: Clone>(v: ndarray::ArrayView2<'_, T>) -> Array2<T> {
    Array2::from_shape_vec(v.dim(), v.iter().cloned().collect()).expect("shape matches element count")
}

/// The 8-element dihedral orbit of a square image and its paired array,
/// both transformed identically.
pub fn augment8<A: Clone, B: Clone>(
    image: &Array2<A>,
    paired: &Array2<B>,
) -> Result<Vec<(Array2<A>, Array2<B>)>> {
    let (h, w) = image.dim();
    if h != w {
        return Err(Error::invalid(format!(
            "dihedral augmentation needs square inputs, got {h}x{w}"
        )));
    }
    if paired.dim() != image.dim() {
        return Err(Error::ShapeMismatch {
            what: "augmentation pair".into(),
            left: image.dim(),
            right: paired.dim(),
        });
    }
    Ok(Dihedral::all()
        .iter()
        .map(|g| (g.apply(image), g.apply(paired)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(n: usize) -> Array2<u32> {
        Array2::from_shape_fn((n, n), |(r, c)| (r * n + c) as u32)
    }

    #[test]
    fn output_is_row_major() {
        let a = Array2::from_shape_fn((3, 3), |(r, c)| r * 3 + c);
        for d in Dihedral::all() {
            assert!(d.apply(&a).is_standard_layout());
        }
    }

    #[test]
    fn constant_image_gives_identical_copies() {
        let img = Array2::from_elem((6, 6), 3.0f32);
        let orbit = augment8(&img, &img).unwrap();
        assert_eq!(orbit.len(), 8);
        assert!(orbit.iter().all(|(a, b)| a == img && b == img));
    }

    #[test]
    fn asymmetric_pattern_gives_distinct_arrays() {
        let p = pattern(5);
        let orbit = augment8(&p, &p).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(orbit[i].0, orbit[j].0, "elements {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn half_turn_is_an_involution() {
        let p = pattern(7);
        let half = Dihedral { rot: 2, flip: false };
        assert_eq!(half.apply(&half.apply(&p)), p);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let p = Array2::from_shape_vec((2, 2), vec![1, 2, 3, 4]).unwrap();
        let r = Dihedral { rot: 1, flip: false }.apply(&p);
        assert_eq!(r, Array2::from_shape_vec((2, 2), vec![2, 4, 1, 3]).unwrap());
    }

    #[test]
    fn group_is_closed_under_composition() {
        let p = pattern(4);
        let images: Vec<_> = Dihedral::all().iter().map(|g| g.apply(&p)).collect();
        for g in Dihedral::all() {
            for h in Dihedral::all() {
                let composed = h.apply(&g.apply(&p));
                assert!(images.contains(&composed), "{g:?} then {h:?} escapes the group");
            }
        }
    }

    #[test]
    fn non_square_rejected() {
        let a = Array2::<f32>::zeros((3, 4));
        assert!(augment8(&a, &a).is_err());
    }
}
