use std::f64::consts::PI;

use ndarray::{Array2, Array3};

use crate::{Error, InstanceLabelMap, Result};

pub const DEFAULT_N_RAYS: usize = 32;

/// Radial distances and object probability for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct StarTarget {
    /// `(height, width, n_rays)`; zero on background.
    pub distances: Array3<f32>,
    /// Boundary distance normalized per instance to a maximum of 1; zero on background.
    pub object_prob: Array2<f32>,
}

impl StarTarget {
    pub fn n_rays(&self) -> usize {
        self.distances.dim().2
    }
}

/// Unit ray directions `(dy, dx)` at angles `2πk / n_rays`.
pub fn ray_directions(n_rays: usize) -> Vec<(f64, f64)> {
    (0..n_rays)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / n_rays as f64;
            (theta.sin(), theta.cos())
        })
        .collect()
}

/// For every object pixel, marches along each ray in unit steps
/// (nearest-pixel lookup) and records the step count at which the label
/// first differs. Leaving the image counts as a label change.
pub fn star_distances(labels: &InstanceLabelMap, n_rays: usize) -> Result<StarTarget> {
    if n_rays < 3 {
        return Err(Error::invalid(format!("need at least 3 rays, got {n_rays}")));
    }
    let (h, w) = labels.dim();
    let dirs = ray_directions(n_rays);
    let max_steps = ((h * h + w * w) as f64).sqrt().ceil() as usize + 1;
    let mut distances = Array3::<f32>::zeros((h, w, n_rays));
    for r in 0..h {
        for c in 0..w {
            let id = labels[[r, c]];
            if id == 0 {
                continue;
            }
            for (k, &(dy, dx)) in dirs.iter().enumerate() {
                let mut t = 1;
                while t < max_steps {
                    let y = (r as f64 + t as f64 * dy).round();
                    let x = (c as f64 + t as f64 * dx).round();
                    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                        break;
                    }
                    if labels[[y as usize, x as usize]] != id {
                        break;
                    }
                    t += 1;
                }
                distances[[r, c, k]] = t as f32;
            }
        }
    }
    let edt = edt_to_boundary(labels);
    let mut object_prob = Array2::<f32>::zeros((h, w));
    let max_id = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut per_id_max = vec![0.0f32; max_id + 1];
    for (&id, &d) in labels.iter().zip(edt.iter()) {
        let m = &mut per_id_max[id as usize];
        *m = m.max(d);
    }
    for ((p, &id), &d) in object_prob.iter_mut().zip(labels.iter()).zip(edt.iter()) {
        if id > 0 && per_id_max[id as usize] > 0.0 {
            *p = d / per_id_max[id as usize];
        }
    }
    Ok(StarTarget {
        distances,
        object_prob,
    })
}

/// Euclidean distance from every object pixel to the nearest pixel carrying
/// a different label, where pixels outside the image count as background.
/// Zero on background.
pub fn edt_to_boundary(labels: &InstanceLabelMap) -> Array2<f32> {
    let (h, w) = labels.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    // bounding boxes per id: (rmin, rmax, cmin, cmax)
    let mut boxes: std::collections::BTreeMap<u32, (usize, usize, usize, usize)> =
        Default::default();
    for ((r, c), &id) in labels.indexed_iter() {
        if id == 0 {
            continue;
        }
        let b = boxes.entry(id).or_insert((r, r, c, c));
        b.0 = b.0.min(r);
        b.1 = b.1.max(r);
        b.2 = b.2.min(c);
        b.3 = b.3.max(c);
    }
    for (id, (r0, r1, c0, c1)) in boxes {
        // Work in the box padded by one ring of guaranteed non-members; any
        // farther non-member is never closer than its clamp onto that ring.
        let bh = r1 - r0 + 3;
        let bw = c1 - c0 + 3;
        let mut f = vec![0.0f64; bh * bw];
        for y in 0..bh {
            for x in 0..bw {
                let inside = y >= 1
                    && x >= 1
                    && y < bh - 1
                    && x < bw - 1
                    && labels[[r0 + y - 1, c0 + x - 1]] == id;
                f[y * bw + x] = if inside { f64::INFINITY } else { 0.0 };
            }
        }
        squared_edt_2d(&mut f, bh, bw);
        for y in 1..bh - 1 {
            for x in 1..bw - 1 {
                if labels[[r0 + y - 1, c0 + x - 1]] == id {
                    out[[r0 + y - 1, c0 + x - 1]] = f[y * bw + x].sqrt() as f32;
                }
            }
        }
    }
    out
}

fn squared_edt_2d(f: &mut [f64], h: usize, w: usize) {
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = f[y * w + x];
        }
        squared_edt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            f[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&f[y * w..(y + 1) * w]);
        squared_edt_1d(&buf[..w], &mut out[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn squared_edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    // skip leading infinite samples; an all-infinite column stays infinite
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_edt(labels: &InstanceLabelMap) -> Array2<f32> {
        let (h, w) = labels.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let id = labels[[r, c]];
            if id == 0 {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for y in -1..=h as i64 {
                for x in -1..=w as i64 {
                    let inside = y >= 0 && x >= 0 && y < h as i64 && x < w as i64;
                    let other = !inside || labels[[y as usize, x as usize]] != id;
                    if other {
                        let d = ((y - r as i64).pow(2) + (x - c as i64).pow(2)) as f64;
                        best = best.min(d);
                    }
                }
            }
            best.sqrt() as f32
        })
    }

    #[test]
    fn single_pixel_object() {
        let mut l = Array2::zeros((9, 9));
        l[[4, 4]] = 7;
        let t = star_distances(&l, 32).unwrap();
        assert!((0..32).all(|k| t.distances[[4, 4, k]] == 1.0));
        assert_eq!(t.object_prob[[4, 4]], 1.0);
        assert_eq!(t.object_prob.sum(), 1.0);
    }

    #[test]
    fn disk_center_distances() {
        let n = 41;
        let l = Array2::from_shape_fn((n, n), |(r, c)| {
            let (dy, dx) = (r as f64 - 20.0, c as f64 - 20.0);
            u32::from(dy * dy + dx * dx <= 100.0)
        });
        let t = star_distances(&l, 32).unwrap();
        for k in 0..32 {
            let d = t.distances[[20, 20, k]];
            assert!((9.0..=11.0).contains(&d), "ray {k}: {d}");
        }
        assert_eq!(t.object_prob[[20, 20]], 1.0);
    }

    #[test]
    fn background_is_zero() {
        let mut l = Array2::zeros((6, 6));
        l.slice_mut(ndarray::s![1..4, 1..4]).fill(1);
        let t = star_distances(&l, 8).unwrap();
        for ((r, c), &id) in l.indexed_iter() {
            if id == 0 {
                assert_eq!(t.object_prob[[r, c]], 0.0);
                assert!((0..8).all(|k| t.distances[[r, c, k]] == 0.0));
            }
        }
    }

    #[test]
    fn too_few_rays_rejected() {
        assert!(star_distances(&Array2::zeros((3, 3)), 2).is_err());
    }

    #[test]
    fn object_touching_image_edge_stops_at_edge() {
        let l = Array2::from_elem((5, 5), 1u32);
        let t = star_distances(&l, 4).unwrap();
        // ray 0 points along +x: from column 2 the march leaves the image at step 3
        assert_eq!(t.distances[[2, 2, 0]], 3.0);
        assert_eq!(t.distances[[2, 0, 2]], 1.0);
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(cells in proptest::collection::vec(0u32..3, 0..=100usize), w in 1usize..10) {
            let h = cells.len() / w;
            prop_assume!(h > 0);
            let l = Array2::from_shape_vec((h, w), cells[..h * w].to_vec()).unwrap();
            prop_assert_eq!(edt_to_boundary(&l), brute_edt(&l));
        }

        #[test]
        fn polygon_contains_its_center(cells in proptest::collection::vec(0u32..3, 100)) {
            let l = Array2::from_shape_vec((10, 10), cells).unwrap();
            let t = star_distances(&l, 16).unwrap();
            let dirs = ray_directions(16);
            for ((r, c), &id) in l.indexed_iter() {
                if id == 0 { continue; }
                let poly: Vec<(f64, f64)> = dirs.iter().enumerate().map(|(k, &(dy, dx))| {
                    let d = t.distances[[r, c, k]] as f64;
                    (r as f64 + d * dy, c as f64 + d * dx)
                }).collect();
                prop_assert!(strictly_inside(&poly, (r as f64, c as f64)));
            }
        }

        #[test]
        fn object_prob_peaks_at_deepest_pixel(cells in proptest::collection::vec(0u32..3, 144)) {
            let l = Array2::from_shape_vec((12, 12), cells).unwrap();
            let t = star_distances(&l, 8).unwrap();
            let edt = edt_to_boundary(&l);
            for id in 1..3u32 {
                let members: Vec<_> = l.indexed_iter().filter(|(_, &v)| v == id).map(|(p, _)| p).collect();
                if members.is_empty() { continue; }
                let deepest = members.iter().map(|&p| edt[p]).fold(0.0f32, f32::max);
                for &p in &members {
                    prop_assert!(t.object_prob[p] <= 1.0);
                    if edt[p] == deepest {
                        prop_assert_eq!(t.object_prob[p], 1.0);
                    }
                }
            }
        }
    }

    /// Crossing-number test plus distance from every edge.
    fn strictly_inside(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
        let n = poly.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.0 > p.0) != (b.0 > p.0) && p.1 < (b.1 - a.1) * (p.0 - a.0) / (b.0 - a.0) + a.1 {
                inside = !inside;
            }
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross.abs() < 1e-9 {
                return false;
            }
        }
        inside
    }
}
