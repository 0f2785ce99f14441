//! SLIC superpixels: localized k-means over joint color and position.
//!
//! Clusters an image into roughly `n_segments` compact regions. Centers are
//! grid-seeded, each iteration assigns pixels inside a 2S×2S window around
//! every center, and small disconnected leftovers get merged into a
//! neighboring segment so the final label map is a total partition with
//! contiguous ids.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    /// Distances straight in RGB; right choice when colors are already
    /// perceptually separated.
    Rgb,
    Lab,
}

#[derive(Clone, Debug)]
pub struct SuperpixelLabels {
    labels: Vec<usize>,
    height: usize,
    width: usize,
    k: usize,
}

impl SuperpixelLabels {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Majority-vote reduction onto the feature grid (`factor` image pixels
    /// per feature cell side). Ties break to the lowest label id.
    pub fn downsample_majority(&self, factor: usize) -> SuperpixelLabels {
        assert!(self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0usize; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut counts = vec![0usize; self.k];
                for dy in 0..factor {
                    for dx in 0..factor {
                        counts[self.get(y * factor + dy, x * factor + dx)] += 1;
                    }
                }
                let mut best = 0;
                for (l, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = l;
                    }
                }
                out[y * w + x] = best;
            }
        }
        SuperpixelLabels { labels: out, height: h, width: w, k: self.k }
    }
}

struct Center {
    y: f64,
    x: f64,
    color: [f64; 3],
}

/// Cluster an H×W×3 image into about `n_segments` superpixels.
pub fn slic(image: &Tensor, n_segments: usize, compactness: f64, iters: usize) -> SuperpixelLabels {
    slic_in(image, n_segments, compactness, iters, ColorSpace::Rgb)
}

pub fn slic_in(
    image: &Tensor,
    n_segments: usize,
    compactness: f64,
    iters: usize,
    colorspace: ColorSpace,
) -> SuperpixelLabels {
    assert_eq!(image.rank(), 3, "slic expects H×W×3");
    assert_eq!(image.shape()[2], 3);
    assert!(n_segments >= 1 && iters >= 1);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let color: Vec<[f64; 3]> = (0..h * w)
        .map(|p| {
            let rgb = [
                image.data()[p * 3] * 255.0,
                image.data()[p * 3 + 1] * 255.0,
                image.data()[p * 3 + 2] * 255.0,
            ];
            match colorspace {
                ColorSpace::Rgb => rgb,
                ColorSpace::Lab => rgb_to_lab(rgb),
            }
        })
        .collect();

    let s = ((h * w) as f64 / n_segments as f64).sqrt();
    let grid_y = ((h as f64 / s).ceil() as usize).max(1);
    let grid_x = ((w as f64 / s).ceil() as usize).max(1);

    let mut centers = Vec::with_capacity(grid_y * grid_x);
    for gy in 0..grid_y {
        for gx in 0..grid_x {
            let cy = ((gy as f64 + 0.5) * h as f64 / grid_y as f64).min(h as f64 - 1.0);
            let cx = ((gx as f64 + 0.5) * w as f64 / grid_x as f64).min(w as f64 - 1.0);
            let p = (cy as usize) * w + cx as usize;
            centers.push(Center { y: cy, x: cx, color: color[p] });
        }
    }

    let mut labels = vec![usize::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    let window = s.ceil() as isize;
    let inv_s = 1.0 / s;

    for _ in 0..iters {
        dist.fill(f64::INFINITY);
        for (ci, center) in centers.iter().enumerate() {
            let y0 = ((center.y as isize) - window).max(0) as usize;
            let y1 = (((center.y as isize) + window + 1) as usize).min(h);
            let x0 = ((center.x as isize) - window).max(0) as usize;
            let x1 = (((center.x as isize) + window + 1) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let dc2 = sq(color[p][0] - center.color[0])
                        + sq(color[p][1] - center.color[1])
                        + sq(color[p][2] - center.color[2]);
                    let dxy2 = sq(y as f64 - center.y) + sq(x as f64 - center.x);
                    let d = (dc2 + dxy2 * inv_s * inv_s * compactness * compactness).sqrt();
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        // pixels outside every window (possible on extreme aspect ratios)
        for p in 0..h * w {
            if labels[p] == usize::MAX {
                let (y, x) = (p / w, p % w);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (ci, center) in centers.iter().enumerate() {
                    let d = sq(y as f64 - center.y) + sq(x as f64 - center.x);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                labels[p] = best;
            }
        }
        // recompute centers
        let mut acc = vec![(0.0f64, 0.0f64, [0.0f64; 3], 0usize); centers.len()];
        for p in 0..h * w {
            let (y, x) = (p / w, p % w);
            let a = &mut acc[labels[p]];
            a.0 += y as f64;
            a.1 += x as f64;
            a.2[0] += color[p][0];
            a.2[1] += color[p][1];
            a.2[2] += color[p][2];
            a.3 += 1;
        }
        for (ci, a) in acc.iter().enumerate() {
            if a.3 > 0 {
                let inv = 1.0 / a.3 as f64;
                centers[ci] = Center {
                    y: a.0 * inv,
                    x: a.1 * inv,
                    color: [a.2[0] * inv, a.2[1] * inv, a.2[2] * inv],
                };
            }
        }
    }

    merge_orphans(&mut labels, h, w);
    let k = compact_labels(&mut labels);
    SuperpixelLabels { labels, height: h, width: w, k }
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Keep the largest connected component of each label; reassign every other
/// component to the neighboring label it touches the most.
fn merge_orphans(labels: &mut [usize], h: usize, w: usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let label = labels[start];
        comp_label.push(label);
        comp_size.push(0usize);
        stack.push(start);
        comp[start] = id;
        while let Some(p) = stack.pop() {
            comp_size[id] += 1;
            let (y, x) = (p / w, p % w);
            for (ny, nx) in neighbors4(y, x, h, w) {
                let q = ny * w + nx;
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
    }

    // largest component per label survives
    let n_labels = comp_label.iter().copied().max().map_or(0, |m| m + 1);
    let mut main_comp = vec![usize::MAX; n_labels];
    for id in 0..comp_label.len() {
        let l = comp_label[id];
        if main_comp[l] == usize::MAX || comp_size[id] > comp_size[main_comp[l]] {
            main_comp[l] = id;
        }
    }

    // orphans adopt the most-bordering neighbor label
    for id in 0..comp_label.len() {
        if main_comp[comp_label[id]] == id {
            continue;
        }
        let mut border: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for p in 0..h * w {
            if comp[p] != id {
                continue;
            }
            let (y, x) = (p / w, p % w);
            for (ny, nx) in neighbors4(y, x, h, w) {
                let q = ny * w + nx;
                if comp[q] != id {
                    *border.entry(labels[q]).or_insert(0) += 1;
                }
            }
        }
        let adopt = border
            .into_iter()
            .max_by_key(|&(l, count)| (count, std::cmp::Reverse(l)))
            .map(|(l, _)| l);
        if let Some(new_label) = adopt {
            for p in 0..h * w {
                if comp[p] == id {
                    labels[p] = new_label;
                }
            }
        }
    }
}

fn neighbors4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = Vec::with_capacity(4);
    if y > 0 {
        out.push((y - 1, x));
    }
    if y + 1 < h {
        out.push((y + 1, x));
    }
    if x > 0 {
        out.push((y, x - 1));
    }
    if x + 1 < w {
        out.push((y, x + 1));
    }
    out.into_iter()
}

/// Remap labels to 0..K-1 in order of first appearance (row-major scan).
fn compact_labels(labels: &mut [usize]) -> usize {
    let mut remap: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let next = remap.len();
        let id = *remap.entry(*l).or_insert(next);
        *l = id;
    }
    remap.len()
}

fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    fn inv_gamma(u: f64) -> f64 {
        if u <= 0.04045 {
            u / 12.92
        } else {
            ((u + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    }
    let r = inv_gamma(rgb[0] / 255.0);
    let g = inv_gamma(rgb[1] / 255.0);
    let b = inv_gamma(rgb[2] / 255.0);
    let x = (0.4124 * r + 0.3576 * g + 0.1805 * b) / 0.95047;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let z = (0.0193 * r + 0.1192 * g + 0.9505 * b) / 1.08883;
    [
        116.0 * f(y) - 16.0,
        500.0 * (f(x) - f(y)),
        200.0 * (f(y) - f(z)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_image(h: usize, w: usize, c: [f64; 3]) -> Tensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&c);
        }
        Tensor::from_raw(vec![h, w, 3], data)
    }

    #[test]
    fn single_segment_is_all_zero() {
        let img = uniform_image(16, 16, [0.3, 0.5, 0.7]);
        let labels = slic(&img, 1, 10.0, 10);
        assert_eq!(labels.k(), 1);
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn every_label_occurs_and_partition_is_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_raw(vec![24, 24, 3], data);
        let labels = slic(&img, 9, 10.0, 10);
        let sizes = labels.segment_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 24 * 24);
        assert!(sizes.iter().all(|&s| s > 0), "{sizes:?}");
    }

    #[test]
    fn uniform_color_gives_near_grid_sizes() {
        let img = uniform_image(64, 64, [0.5, 0.5, 0.5]);
        let labels = slic(&img, 16, 10.0, 10);
        let expected = 64.0 * 64.0 / 16.0;
        for &size in &labels.segment_sizes() {
            assert!(
                (size as f64) >= 0.5 * expected && (size as f64) <= 2.0 * expected,
                "segment size {size} outside [{}, {}]",
                0.5 * expected,
                2.0 * expected
            );
        }
    }

    #[test]
    fn determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_raw(vec![32, 32, 3], data);
        let a = slic(&img, 12, 10.0, 10);
        let b = slic(&img, 12, 10.0, 10);
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn two_color_halves_separate_cleanly() {
        let (h, w) = (16, 32);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let _ = y;
                let v = if x < w / 2 { 0.1 } else { 0.9 };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let img = Tensor::from_raw(vec![h, w, 3], data);
        let labels = slic(&img, 2, 1.0, 10);

        // mean color per segment; the extreme two must straddle half the gap
        let mut sums = vec![0.0; labels.k()];
        let mut counts = vec![0usize; labels.k()];
        for p in 0..h * w {
            sums[labels.labels()[p]] += img.data()[p * 3];
            counts[labels.labels()[p]] += 1;
        }
        let means: Vec<f64> =
            sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo >= 0.4, "means {means:?}");
    }

    #[test]
    fn downsample_majority_votes_per_cell() {
        let img = uniform_image(8, 8, [0.2, 0.2, 0.2]);
        let labels = slic(&img, 4, 10.0, 5);
        let down = labels.downsample_majority(4);
        assert_eq!(down.height(), 2);
        assert_eq!(down.width(), 2);
        for &l in down.labels() {
            assert!(l < labels.k());
        }
    }

    #[test]
    fn lab_toggle_runs() {
        let img = uniform_image(16, 16, [0.9, 0.1, 0.4]);
        let labels = slic_in(&img, 4, 10.0, 5, ColorSpace::Lab);
        assert_eq!(labels.labels().len(), 256);
    }
}
