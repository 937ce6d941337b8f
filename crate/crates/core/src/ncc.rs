//! Zero-mean normalized cross-correlation over a grid of 8x8 patches.

use crate::image::GrayImage;

pub const PATCH: usize = 8;
const PATCH_LEN: usize = PATCH * PATCH;
/// Patches whose intensity variance falls below this are treated as flat.
const FLAT_VARIANCE: f32 = 1e-6;

/// Non-overlapping 8x8 patches, top-left aligned; a partial border is ignored.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub cols: usize,
    pub rows: usize,
    /// Zero-mean, unit-norm patch vectors (all zeros for flat patches).
    normalized: Vec<[f32; PATCH_LEN]>,
    means: Vec<f32>,
    flat: Vec<bool>,
}

impl PatchGrid {
    pub fn new(img: &GrayImage) -> Self {
        let cols = img.width() / PATCH;
        let rows = img.height() / PATCH;
        let n = cols * rows;
        let mut normalized = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        let mut flat = Vec::with_capacity(n);
        for r in 0..rows {
            for c in 0..cols {
                let mut v = [0f32; PATCH_LEN];
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        v[dy * PATCH + dx] = img.get(c * PATCH + dx, r * PATCH + dy);
                    }
                }
                let mean = v.iter().sum::<f32>() / PATCH_LEN as f32;
                let mut ss = 0f32;
                for x in v.iter_mut() {
                    *x -= mean;
                    ss += *x * *x;
                }
                let is_flat = ss / (PATCH_LEN as f32) < FLAT_VARIANCE;
                if is_flat {
                    v = [0f32; PATCH_LEN];
                } else {
                    let inv = 1.0 / ss.sqrt();
                    v.iter_mut().for_each(|x| *x *= inv);
                }
                normalized.push(v);
                means.push(mean);
                flat.push(is_flat);
            }
        }
        Self {
            cols,
            rows,
            normalized,
            means,
            flat,
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn is_flat(&self, i: usize) -> bool {
        self.flat[i]
    }

    pub fn mean(&self, i: usize) -> f32 {
        self.means[i]
    }

    /// Patch center in pixel coordinates.
    pub fn center(&self, i: usize) -> [f64; 2] {
        let (c, r) = (i % self.cols, i / self.cols);
        let half = (PATCH as f64 - 1.0) / 2.0;
        [(c * PATCH) as f64 + half, (r * PATCH) as f64 + half]
    }

    pub fn vector(&self, i: usize) -> &[f32; PATCH_LEN] {
        &self.normalized[i]
    }

    /// ZNCC between patch `i` here and patch `j` of `other`; zero if either is flat.
    #[inline]
    pub fn zncc(&self, i: usize, other: &PatchGrid, j: usize) -> f32 {
        let (a, b) = (&self.normalized[i], &other.normalized[j]);
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    /// Best ZNCC partner in `other` for every patch here: `(index, score)`.
    /// Flat patches and patches with no textured partner get `None`.
    pub fn best_matches(&self, other: &PatchGrid) -> Vec<Option<(usize, f32)>> {
        (0..self.len())
            .map(|i| {
                if self.flat[i] {
                    return None;
                }
                let mut best: Option<(usize, f32)> = None;
                for j in 0..other.len() {
                    if other.flat[j] {
                        continue;
                    }
                    let s = self.zncc(i, other, j);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((j, s));
                    }
                }
                best
            })
            .collect()
    }
}

/// Every 8x8 window of an image, scored against grid patches through
/// integral-image window statistics.
pub struct WindowSearch<'a> {
    img: &'a GrayImage,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl<'a> WindowSearch<'a> {
    pub fn new(img: &'a GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        let mut sum_sq = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let (mut row, mut row_sq) = (0.0, 0.0);
            for x in 0..w {
                let v = img.get(x, y) as f64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * (w + 1) + x + 1;
                sum[i] = sum[i - w - 1] + row;
                sum_sq[i] = sum_sq[i - w - 1] + row_sq;
            }
        }
        Self { img, sum, sum_sq }
    }

    /// Number of window positions along x and y.
    pub fn positions(&self) -> (usize, usize) {
        (
            (self.img.width() + 1).saturating_sub(PATCH),
            (self.img.height() + 1).saturating_sub(PATCH),
        )
    }

    fn box_sum(t: &[f64], stride: usize, x: usize, y: usize) -> f64 {
        let (x1, y1) = (x + PATCH, y + PATCH);
        t[y1 * stride + x1] - t[y * stride + x1] - t[y1 * stride + x] + t[y * stride + x]
    }

    /// Zero-mean norm of the window at `(x, y)`, `None` when flat.
    fn norm(&self, x: usize, y: usize) -> Option<f64> {
        let stride = self.img.width() + 1;
        let s = Self::box_sum(&self.sum, stride, x, y);
        let ss = Self::box_sum(&self.sum_sq, stride, x, y);
        let var = (ss - s * s / PATCH_LEN as f64) / PATCH_LEN as f64;
        (var >= FLAT_VARIANCE as f64).then(|| (var * PATCH_LEN as f64).sqrt())
    }

    /// ZNCC of a normalized patch vector with the window at `(x, y)`.
    pub fn score(&self, v: &[f32; PATCH_LEN], x: usize, y: usize) -> Option<f64> {
        let n = self.norm(x, y)?;
        let data = self.img.data();
        let w = self.img.width();
        let mut dot = 0.0f32;
        for dy in 0..PATCH {
            let row = &data[(y + dy) * w + x..(y + dy) * w + x + PATCH];
            for (a, b) in v[dy * PATCH..(dy + 1) * PATCH].iter().zip(row) {
                dot += a * b;
            }
        }
        Some(dot as f64 / n)
    }

    /// Best-scoring window for `v` as `(x, y, score)`.
    pub fn best(&self, v: &[f32; PATCH_LEN]) -> Option<(usize, usize, f64)> {
        let (nx, ny) = self.positions();
        let mut best: Option<(usize, usize, f64)> = None;
        for y in 0..ny {
            for x in 0..nx {
                if let Some(s) = self.score(v, x, y) {
                    if best.is_none_or(|b| s > b.2) {
                        best = Some((x, y, s));
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_correlation_is_one() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x * 7 + y * 13) % 17) as f32);
        let g = PatchGrid::new(&img);
        assert_eq!((g.cols, g.rows), (2, 2));
        for i in 0..g.len() {
            assert!((g.zncc(i, &g, i) - 1.0).abs() < 1e-5);
        }
        assert_eq!(g.center(3), [11.5, 11.5]);
    }

    #[test]
    fn flat_patches_flagged() {
        let img = GrayImage::filled(8, 8, 100.0);
        let g = PatchGrid::new(&img);
        assert!(g.is_flat(0));
        assert_eq!(g.mean(0), 100.0);
        assert_eq!(g.best_matches(&g), vec![None]);
    }

    #[test]
    fn negated_patch_anticorrelates() {
        let a = GrayImage::from_fn(8, 8, |x, y| (x * 3 + y) as f32);
        let b = GrayImage::from_fn(8, 8, |x, y| 100.0 - (x * 3 + y) as f32);
        let (ga, gb) = (PatchGrid::new(&a), PatchGrid::new(&b));
        assert!((ga.zncc(0, &gb, 0) + 1.0).abs() < 1e-5);
    }

    #[test]
    fn window_search_finds_offset_patch() {
        let img = GrayImage::from_fn(40, 30, |x, y| ((x * 31 + y * 17 + x * y * 7) % 23) as f32);
        let patch = GrayImage::from_fn(8, 8, |x, y| img.get(x + 13, y + 9));
        let g = PatchGrid::new(&patch);
        let ws = WindowSearch::new(&img);
        assert_eq!(ws.positions(), (33, 23));
        let (x, y, s) = ws.best(g.vector(0)).unwrap();
        assert_eq!((x, y), (13, 9));
        assert!((s - 1.0).abs() < 1e-5);
        assert!((ws.score(g.vector(0), 13, 9).unwrap() - g.zncc(0, &g, 0) as f64).abs() < 1e-5);
    }
}
