//! Integer rectangle arithmetic shared by every stage.
//!
//! Rectangles are half-open: `[x_min, x_max) x [y_min, y_max)`, so a rect's
//! pixel count is exactly `width * height` and intersections are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rectangle [{0}, {1}, {2}, {3})")]
    Degenerate(i32, i32, i32, i32),
    #[error("invalid image dims {0}x{1}")]
    InvalidDims(u32, u32),
    #[error("size thresholds must be strictly increasing with at least two entries")]
    InvalidThresholds,
    #[error("level {0} out of range")]
    LevelOutOfRange(usize),
    #[error("a {need_w}x{need_h} rectangle does not fit in a {width}x{height} image")]
    DoesNotFit {
        need_w: i64,
        need_h: i64,
        width: u32,
        height: u32,
    },
    #[error("aspect ratio must be positive and finite, got {0}")]
    InvalidAspect(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || width > i32::MAX as u32 || height > i32::MAX as u32 {
            return Err(GeometryError::InvalidDims(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> i64 {
        self.width as i64 * self.height as i64
    }

    /// The rectangle covering the whole image.
    pub fn full_area(&self) -> Area {
        Area {
            x_min: 0,
            y_min: 0,
            x_max: self.width as i32,
            y_max: self.height as i32,
        }
    }
}

/// Axis-aligned pixel rectangle, the unit matched between two images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[i32; 4]", into = "[i32; 4]")]
pub struct Area {
    x_min: i32,
    y_min: i32,
    x_max: i32,
    y_max: i32,
}

impl TryFrom<[i32; 4]> for Area {
    type Error = GeometryError;

    fn try_from(v: [i32; 4]) -> Result<Self, Self::Error> {
        Area::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Area> for [i32; 4] {
    fn from(a: Area) -> Self {
        [a.x_min, a.y_min, a.x_max, a.y_max]
    }
}

impl Area {
    pub fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Result<Self, GeometryError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> i32 {
        self.x_min
    }
    pub fn y_min(&self) -> i32 {
        self.y_min
    }
    pub fn x_max(&self) -> i32 {
        self.x_max
    }
    pub fn y_max(&self) -> i32 {
        self.y_max
    }

    pub fn width(&self) -> i64 {
        self.x_max as i64 - self.x_min as i64
    }

    pub fn height(&self) -> i64 {
        self.y_max as i64 - self.y_min as i64
    }

    /// Pixel count `W * H`.
    pub fn size(&self) -> i64 {
        self.width() * self.height()
    }

    /// Geometric center in continuous coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    /// `max(W/H, H/W)`.
    pub fn aspect(&self) -> f64 {
        let (w, h) = (self.width() as f64, self.height() as f64);
        (w / h).max(h / w)
    }

    pub fn intersection(&self, other: &Area) -> Option<Area> {
        Area::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn intersection_size(&self, other: &Area) -> i64 {
        self.intersection(other).map_or(0, |a| a.size())
    }

    pub fn contains(&self, other: &Area) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min as f64 && x < self.x_max as f64 && y >= self.y_min as f64 && y < self.y_max as f64
    }

    pub fn is_inside(&self, dims: ImageDims) -> bool {
        dims.full_area().contains(self)
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Area {
        Area {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Clip to the image frame; `None` when nothing remains.
    pub fn clipped(&self, dims: ImageDims) -> Option<Area> {
        self.intersection(&dims.full_area())
    }
}

/// `O_ab / min(|a|, |b|)`: the link-prediction score.
pub fn overlap_ratio(a: &Area, b: &Area) -> f64 {
    let o = a.intersection_size(b);
    o as f64 / a.size().min(b.size()) as f64
}

pub fn iou(a: &Area, b: &Area) -> f64 {
    let o = a.intersection_size(b);
    o as f64 / (a.size() + b.size() - o) as f64
}

/// Smallest rectangle containing both inputs.
pub fn fuse(a: &Area, b: &Area) -> Area {
    Area {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

/// Ordered size thresholds `TL_0 < TL_1 < ... < TL_L` in pixels squared.
///
/// Level `i` covers sizes in `[TL_i, TL_{i+1})`; there are `len - 1` usable
/// levels and anything at or above the last bin start is clamped to the top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct LevelThresholds {
    levels: Vec<i64>,
}

impl TryFrom<Vec<i64>> for LevelThresholds {
    type Error = GeometryError;
    fn try_from(v: Vec<i64>) -> Result<Self, Self::Error> {
        LevelThresholds::new(v)
    }
}

impl From<LevelThresholds> for Vec<i64> {
    fn from(t: LevelThresholds) -> Self {
        t.levels
    }
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self {
            levels: vec![80 * 80, 130 * 130, 256 * 256, 390 * 390, 560 * 560],
        }
    }
}

impl LevelThresholds {
    pub fn new(levels: Vec<i64>) -> Result<Self, GeometryError> {
        if levels.len() < 2 || levels[0] <= 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeometryError::InvalidThresholds);
        }
        Ok(Self { levels })
    }

    /// Number of usable levels `L`.
    pub fn num_levels(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn top_level(&self) -> usize {
        self.num_levels() - 1
    }

    /// Lower size bound `TL_i` of level `i`.
    pub fn threshold(&self, level: usize) -> Option<i64> {
        (level < self.num_levels()).then(|| self.levels[level])
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.levels
    }
}

/// Level of a rectangle by pixel count; `None` below `TL_0`.
pub fn assign_level(a: &Area, t: &LevelThresholds) -> Option<usize> {
    let size = a.size();
    if size < t.levels[0] {
        return None;
    }
    let idx = t.levels.partition_point(|&tl| tl <= size) - 1;
    Some(idx.min(t.top_level()))
}

/// Side length `s = ceil(sqrt(TL))`: the smallest square reaching `TL`.
fn ceil_sqrt(v: i64) -> i64 {
    let mut s = (v as f64).sqrt().floor() as i64;
    while s * s < v {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= v {
        s -= 1;
    }
    s
}

/// Re-center a span of `new_len` on `[lo, hi)` and shift it minimally into `[0, limit)`.
fn place_span(lo: i32, hi: i32, new_len: i64, limit: i64) -> (i32, i32) {
    let old_len = hi as i64 - lo as i64;
    let mut start = lo as i64 + (old_len - new_len).div_euclid(2);
    if start < 0 {
        start = 0;
    }
    if start + new_len > limit {
        start = limit - new_len;
    }
    (start as i32, (start + new_len) as i32)
}

fn place(a: &Area, new_w: i64, new_h: i64, dims: ImageDims) -> Result<Area, GeometryError> {
    if new_w > dims.width as i64 || new_h > dims.height as i64 {
        return Err(GeometryError::DoesNotFit {
            need_w: new_w,
            need_h: new_h,
            width: dims.width,
            height: dims.height,
        });
    }
    let (x_min, x_max) = place_span(a.x_min, a.x_max, new_w, dims.width as i64);
    let (y_min, y_max) = place_span(a.y_min, a.y_max, new_h, dims.height as i64);
    Ok(Area {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// Grow `a` around its center until it reaches the smallest size of `target_level`.
///
/// Both sides grow to `s` when both are shorter than `s`; otherwise the
/// short side grows to `ceil(s^2 / long side)`. The result is shifted the
/// minimal distance per axis to stay inside the image.
pub fn expand_to_level(
    a: &Area,
    target_level: usize,
    t: &LevelThresholds,
    dims: ImageDims,
) -> Result<Area, GeometryError> {
    let tl = t
        .threshold(target_level)
        .ok_or(GeometryError::LevelOutOfRange(target_level))?;
    if a.size() >= tl {
        return Ok(*a);
    }
    let s = ceil_sqrt(tl);
    let (w, h) = (a.width(), a.height());
    let (new_w, new_h) = if w < s && h < s {
        (s, s)
    } else if w >= s {
        (w, (tl + w - 1) / w)
    } else {
        ((tl + h - 1) / h, h)
    };
    place(a, new_w, new_h, dims)
}

/// Expand the shorter side so that `W / H = r_a`, keeping the center.
pub fn expand_to_aspect(a: &Area, r_a: f64, dims: ImageDims) -> Result<Area, GeometryError> {
    if !(r_a.is_finite() && r_a > 0.0) {
        return Err(GeometryError::InvalidAspect(r_a));
    }
    let (w, h) = (a.width(), a.height());
    let (new_w, new_h) = if w as f64 / h as f64 > r_a {
        (w, ((w as f64 / r_a).round() as i64).max(h))
    } else {
        (((h as f64 * r_a).round() as i64).max(w), h)
    };
    place(a, new_w, new_h, dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x0: i32, y0: i32, x1: i32, y1: i32) -> Area {
        Area::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn overlap_and_iou_examples() {
        let a = r(0, 0, 10, 10);
        assert_eq!(overlap_ratio(&a, &a), 1.0);
        assert_eq!(overlap_ratio(&a, &r(20, 20, 30, 30)), 0.0);
        assert_eq!(overlap_ratio(&a, &r(5, 0, 15, 10)), 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &r(20, 20, 30, 30)), 0.0);
        assert!((iou(&a, &r(5, 0, 15, 10)) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let a = r(0, 0, 10, 10);
        assert_eq!(fuse(&a, &a), a);
        assert_eq!(fuse(&a, &r(20, 20, 30, 30)), r(0, 0, 30, 30));
    }

    #[test]
    fn degenerate_rects_rejected() {
        assert!(Area::new(3, 0, 3, 5).is_err());
        assert!(Area::new(0, 5, 4, 2).is_err());
        assert!(ImageDims::new(0, 5).is_err());
    }

    #[test]
    fn level_examples() {
        let t = LevelThresholds::default();
        assert_eq!(t.num_levels(), 4);
        assert_eq!(assign_level(&r(0, 0, 100, 100), &t), Some(0));
        assert_eq!(assign_level(&r(0, 0, 79, 79), &t), None);
        assert_eq!(assign_level(&r(0, 0, 600, 600), &t), Some(3));
        assert_eq!(assign_level(&r(0, 0, 80, 80), &t), Some(0));
        assert_eq!(assign_level(&r(0, 0, 130, 130), &t), Some(1));
        assert_eq!(assign_level(&r(0, 0, 390, 390), &t), Some(3));
    }

    #[test]
    fn thresholds_validated() {
        assert!(LevelThresholds::new(vec![10]).is_err());
        assert!(LevelThresholds::new(vec![10, 10]).is_err());
        assert!(LevelThresholds::new(vec![20, 10]).is_err());
        assert!(LevelThresholds::new(vec![10, 20]).is_ok());
    }

    #[test]
    fn expand_to_level_examples() {
        let t = LevelThresholds::default();
        let dims = ImageDims::new(640, 480).unwrap();
        let e = expand_to_level(&r(100, 100, 120, 120), 0, &t, dims).unwrap();
        assert_eq!(e, r(70, 70, 150, 150));
        assert_eq!(e.center(), (110.0, 110.0));

        let same = r(10, 10, 90, 90);
        assert_eq!(expand_to_level(&same, 0, &t, dims).unwrap(), same);

        let corner = expand_to_level(&r(0, 0, 20, 20), 0, &t, dims).unwrap();
        assert_eq!(corner, r(0, 0, 80, 80));
    }

    #[test]
    fn expand_to_level_long_side() {
        let t = LevelThresholds::default();
        let dims = ImageDims::new(640, 480).unwrap();
        // 100 wide, 10 high: height becomes ceil(6400 / 100) = 64.
        let e = expand_to_level(&r(200, 200, 300, 210), 0, &t, dims).unwrap();
        assert_eq!((e.width(), e.height()), (100, 64));
        assert!(e.size() >= 6400);
    }

    #[test]
    fn expand_to_level_too_big() {
        let t = LevelThresholds::default();
        let dims = ImageDims::new(100, 100).unwrap();
        assert!(matches!(
            expand_to_level(&r(0, 0, 10, 10), 1, &t, dims),
            Err(GeometryError::DoesNotFit { .. })
        ));
    }

    #[test]
    fn expand_to_aspect_examples() {
        let dims = ImageDims::new(640, 480).unwrap();
        let a = r(100, 100, 200, 150);
        let e = expand_to_aspect(&a, 1.0, dims).unwrap();
        assert_eq!(e, r(100, 75, 200, 175));
        assert_eq!(e.center(), a.center());

        let sq = r(10, 10, 60, 60);
        assert_eq!(expand_to_aspect(&sq, 1.0, dims).unwrap(), sq);

        let bottom = r(100, 430, 200, 480);
        let e = expand_to_aspect(&bottom, 1.0, dims).unwrap();
        assert_eq!(e, r(100, 380, 200, 480));
    }

    #[test]
    fn expand_to_aspect_impossible() {
        let dims = ImageDims::new(640, 480).unwrap();
        let wide = r(0, 0, 600, 100);
        assert!(expand_to_aspect(&wide, 1.0, dims).is_err());
        assert!(expand_to_aspect(&wide, 0.0, dims).is_err());
    }
}
