use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::targets::ray_directions;
use crate::{Error, InstanceLabelMap, Result};

/// Default maximum IoU between two accepted polygons.
pub const DEFAULT_NMS_OVERLAP: f64 = 0.4;

/// Star-convex polygon proposed by one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonCandidate {
    /// `(row, col)` of the proposing pixel.
    pub center: (usize, usize),
    /// `(row, col)` vertices, one per ray.
    pub vertices: Vec<(f64, f64)>,
    pub score: f32,
}

impl PolygonCandidate {
    pub fn from_distances(center: (usize, usize), distances: &[f32], score: f32) -> Self {
        let dirs = ray_directions(distances.len());
        let (r, c) = (center.0 as f64, center.1 as f64);
        let vertices = dirs
            .iter()
            .zip(distances)
            .map(|(&(dy, dx), &d)| (r + d as f64 * dy, c + d as f64 * dx))
            .collect();
        Self {
            center,
            vertices,
            score,
        }
    }

    /// Flat indices (`row * w + col`, ascending) of the pixels whose centers
    /// lie inside the polygon under the even-odd rule.
    pub fn rasterize(&self, shape: (usize, usize)) -> Vec<u32> {
        rasterize_polygon(&self.vertices, shape)
    }
}

pub(crate) fn rasterize_polygon(vertices: &[(f64, f64)], (h, w): (usize, usize)) -> Vec<u32> {
    let mut out = Vec::new();
    if vertices.len() < 3 || h == 0 || w == 0 {
        return out;
    }
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(y, x) in vertices {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
    }
    if !(ymin.is_finite() && ymax.is_finite() && xmin.is_finite() && xmax.is_finite()) {
        return out;
    }
    let r0 = ymin.ceil().max(0.0) as usize;
    let r1 = (ymax.floor().min(h as f64 - 1.0)).max(-1.0);
    let c0 = xmin.ceil().max(0.0) as usize;
    let c1 = xmax.floor().min(w as f64 - 1.0);
    if r1 < 0.0 || c1 < 0.0 {
        return out;
    }
    let (r1, c1) = (r1 as usize, c1 as usize);
    let mut crossings = Vec::with_capacity(8);
    for r in r0..=r1 {
        let y = r as f64;
        crossings.clear();
        let mut j = vertices.len() - 1;
        for i in 0..vertices.len() {
            let (yi, xi) = vertices[i];
            let (yj, xj) = vertices[j];
            if (yi > y) != (yj > y) {
                crossings.push((xj - xi) * (y - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_unstable_by(f64::total_cmp);
        for c in c0..=c1 {
            let x = c as f64;
            let right = crossings.len() - crossings.partition_point(|&v| v <= x);
            if right % 2 == 1 {
                out.push((r * w + c) as u32);
            }
        }
    }
    out
}

/// Greedy suppression: candidates are visited by descending score (stable
/// for ties) and accepted when their raster IoU with every accepted polygon
/// is at most `overlap_threshold`.
pub fn suppress(
    mut candidates: Vec<PolygonCandidate>,
    shape: (usize, usize),
    overlap_threshold: f64,
) -> Vec<PolygonCandidate> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (h, w) = shape;
    // Accepted polygons covering each pixel.
    let mut cover: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    let mut areas: Vec<usize> = Vec::new();
    let mut inter: Vec<usize> = Vec::new();
    let mut touched: Vec<u32> = Vec::new();
    let mut accepted = Vec::new();
    for cand in candidates {
        let pix = cand.rasterize(shape);
        for &p in &pix {
            for &id in &cover[p as usize] {
                if inter[id as usize] == 0 {
                    touched.push(id);
                }
                inter[id as usize] += 1;
            }
        }
        let mut keep = true;
        for &id in &touched {
            let i = inter[id as usize];
            let union = pix.len() + areas[id as usize] - i;
            if i as f64 / union as f64 > overlap_threshold {
                keep = false;
            }
            inter[id as usize] = 0;
        }
        touched.clear();
        if keep {
            let id = areas.len() as u32;
            areas.push(pix.len());
            inter.push(0);
            for &p in &pix {
                cover[p as usize].push(id);
            }
            accepted.push(cand);
        }
    }
    accepted
}

/// Proposes a polygon at every pixel with `prob > prob_threshold` and
/// suppresses overlapping ones. `distances` is `(H, W, n_rays)`.
pub fn stardist_nms(
    prob: &Array2<f32>,
    distances: &Array3<f32>,
    prob_threshold: f64,
    overlap_threshold: f64,
) -> Result<Vec<PolygonCandidate>> {
    let (h, w) = prob.dim();
    let (dh, dw, k) = distances.dim();
    if (dh, dw) != (h, w) {
        return Err(Error::ShapeMismatch {
            what: "probability and distance maps".into(),
            left: (h, w),
            right: (dh, dw),
        });
    }
    let mut cands = Vec::new();
    for ((r, c), &p) in prob.indexed_iter() {
        if p as f64 > prob_threshold {
            let d: Vec<f32> = (0..k).map(|i| distances[[r, c, i]]).collect();
            cands.push(PolygonCandidate::from_distances((r, c), &d, p));
        }
    }
    Ok(suppress(cands, (h, w), overlap_threshold))
}

/// Paints polygons in descending score order; pixels already claimed are
/// kept. Ids follow painting order starting at 1.
pub fn render_polygons(candidates: &[PolygonCandidate], shape: (usize, usize)) -> InstanceLabelMap {
    let mut order: Vec<&PolygonCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut labels = InstanceLabelMap::zeros(shape);
    let flat = labels.as_slice_mut().expect("standard layout");
    for (i, cand) in order.iter().enumerate() {
        let id = i as u32 + 1;
        for p in cand.rasterize(shape) {
            let v = &mut flat[p as usize];
            if *v == 0 {
                *v = id;
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::star_distances;
    use ndarray::s;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel even-odd test, independent of the scanline code.
    fn pnpoly(vertices: &[(f64, f64)], y: f64, x: f64) -> bool {
        let mut inside = false;
        let mut j = vertices.len() - 1;
        for i in 0..vertices.len() {
            let (yi, xi) = vertices[i];
            let (yj, xj) = vertices[j];
            if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn oracle_raster(vertices: &[(f64, f64)], (h, w): (usize, usize)) -> Vec<u32> {
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if pnpoly(vertices, r as f64, c as f64) {
                    out.push((r * w + c) as u32);
                }
            }
        }
        out
    }

    fn oracle_iou(a: &[u32], b: &[u32]) -> f64 {
        let sa: std::collections::HashSet<_> = a.iter().collect();
        let inter = b.iter().filter(|p| sa.contains(p)).count();
        let union = a.len() + b.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn square(r0: f64, c0: f64, r1: f64, c1: f64, score: f32) -> PolygonCandidate {
        PolygonCandidate {
            center: (((r0 + r1) / 2.0) as usize, ((c0 + c1) / 2.0) as usize),
            vertices: vec![(r0, c0), (r0, c1), (r1, c1), (r1, c0)],
            score,
        }
    }

    #[test]
    fn square_footprint_matches_pointwise_oracle() {
        let sq = square(1.5, 1.5, 5.5, 6.5, 0.9);
        let got = sq.rasterize((10, 10));
        assert_eq!(got, oracle_raster(&sq.vertices, (10, 10)));
        assert_eq!(got.len(), 4 * 5);
        let l = render_polygons(&[sq], (10, 10));
        assert_eq!(l.iter().filter(|&&v| v == 1).count(), 20);
        assert!(l.slice(s![2..6, 2..7]).iter().all(|&v| v == 1));
    }

    #[test]
    fn empty_inputs() {
        assert!(render_polygons(&[], (4, 4)).iter().all(|&v| v == 0));
        let p = Array2::zeros((4, 4));
        let d = Array3::zeros((4, 4, 32));
        assert!(stardist_nms(&p, &d, 0.5, 0.4).unwrap().is_empty());
    }

    #[test]
    fn duplicate_is_suppressed() {
        let a = square(1.5, 1.5, 6.5, 6.5, 0.9);
        let b = square(1.5, 1.5, 6.5, 6.5, 0.8);
        let kept = suppress(vec![b, a.clone()], (10, 10), 0.4);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn touching_polygons_resolve_by_score() {
        let a = square(1.5, 1.5, 5.5, 5.5, 0.6);
        let b = square(1.5, 3.5, 5.5, 8.5, 0.9);
        let l = render_polygons(&[a.clone(), b.clone()], (10, 10));
        // `b` has the higher score, so it is painted first and keeps the overlap.
        assert_eq!(l[[3, 4]], 1);
        assert_eq!(l[[3, 2]], 2);
        let labeled = l.iter().filter(|&&v| v > 0).count();
        assert!(labeled <= a.rasterize((10, 10)).len() + b.rasterize((10, 10)).len());
    }

    #[test]
    fn clipped_and_offscreen_polygons() {
        let sq = square(-5.0, -5.0, 2.5, 2.5, 1.0);
        assert_eq!(sq.rasterize((6, 6)), oracle_raster(&sq.vertices, (6, 6)));
        let off = square(20.0, 20.0, 30.0, 30.0, 1.0);
        assert!(off.rasterize((6, 6)).is_empty());
    }

    #[test]
    fn ground_truth_polygons_reconstruct_instances() {
        // Disks and ellipses, rendered from the deepest pixel of each object.
        let mut labels = InstanceLabelMap::zeros((64, 64));
        let shapes = [(16.0, 16.0, 9.0, 9.0), (45.0, 20.0, 6.0, 11.0), (30.0, 48.0, 12.0, 7.0)];
        for (id, &(cy, cx, ry, rx)) in shapes.iter().enumerate() {
            for ((r, c), v) in labels.indexed_iter_mut() {
                let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    *v = id as u32 + 1;
                }
            }
        }
        let st = star_distances(&labels, 32).unwrap();
        let mut cands = Vec::new();
        for id in 1..=shapes.len() as u32 {
            let (mut best, mut at) = (-1.0f32, (0, 0));
            for ((r, c), &p) in st.object_prob.indexed_iter() {
                if labels[[r, c]] == id && p > best {
                    best = p;
                    at = (r, c);
                }
            }
            let d: Vec<f32> = (0..32).map(|k| st.distances[[at.0, at.1, k]]).collect();
            cands.push(PolygonCandidate::from_distances(at, &d, 1.0 - id as f32 * 0.1));
        }
        let rendered = render_polygons(&cands, (64, 64));
        let iou = crate::eval::match_for_ap(&labels, &rendered, 0.0).unwrap();
        assert_eq!(iou.tp(), 3);
        for p in &iou.pairs {
            assert!(p.iou >= 0.8, "iou {} for gt {}", p.iou, p.gt);
        }
    }

    fn random_candidates(seed: u64, n: usize) -> Vec<PolygonCandidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let center = (rng.random_range(0..24usize), rng.random_range(0..24usize));
                let d: Vec<f32> = (0..32).map(|_| rng.random_range(1.0..8.0f32)).collect();
                PolygonCandidate::from_distances(center, &d, rng.random_range(0.0..1.0f32))
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rasterization_matches_oracle(seed in 0u64..1000) {
            for c in random_candidates(seed, 3) {
                prop_assert_eq!(c.rasterize((24, 24)), oracle_raster(&c.vertices, (24, 24)));
            }
        }

        #[test]
        fn greedy_matches_brute_force(seed in 0u64..1000, n in 0usize..=12) {
            let shape = (24, 24);
            let cands = random_candidates(seed, n);
            let got = suppress(cands.clone(), shape, 0.4);
            let mut sorted = cands;
            sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
            let rasters: Vec<Vec<u32>> = sorted.iter().map(|c| oracle_raster(&c.vertices, shape)).collect();
            let mut keep: Vec<usize> = Vec::new();
            for i in 0..sorted.len() {
                if keep.iter().all(|&j| oracle_iou(&rasters[i], &rasters[j]) <= 0.4) {
                    keep.push(i);
                }
            }
            let expected: Vec<PolygonCandidate> = keep.into_iter().map(|i| sorted[i].clone()).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn nms_is_idempotent(seed in 0u64..1000, n in 0usize..=20) {
            let once = suppress(random_candidates(seed, n), (24, 24), 0.4);
            let twice = suppress(once.clone(), (24, 24), 0.4);
            prop_assert_eq!(once, twice);
        }
    }
}
