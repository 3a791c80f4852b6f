use std::collections::VecDeque;

use ndarray::Array2;

use crate::InstanceLabelMap;

/// Labels the 4-connected components of `fg_prob > threshold`, numbering
/// them 1..K in raster order of their first pixel.
pub fn fg_threshold_to_instances(fg_prob: &Array2<f32>, threshold: f64) -> InstanceLabelMap {
    let (h, w) = fg_prob.dim();
    let mut labels = InstanceLabelMap::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if labels[[r0, c0]] != 0 || !(fg_prob[[r0, c0]] as f64 > threshold) {
                continue;
            }
            next += 1;
            labels[[r0, c0]] = next;
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                let mut visit = |rr: usize, cc: usize| {
                    if labels[[rr, cc]] == 0 && fg_prob[[rr, cc]] as f64 > threshold {
                        labels[[rr, cc]] = next;
                        queue.push_back((rr, cc));
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < w {
                    visit(r, c + 1);
                }
            }
        }
    }
    labels
}
