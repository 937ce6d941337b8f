//! Seeded synthetic two-view scenes with exact ground truth.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eval::{from_matrix, warp_area, warp_area_box, warp_point, GroundTruth};
use crate::geometry::{iou, Area, ImageDims};
use crate::image::GrayImage;
use crate::pipeline::{PointMatch, Provenance};

/// Analytic multi-octave value noise, evaluated at continuous coordinates so
/// warped views can be rendered without resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    seed: u64,
}

const OCTAVES: [(f64, f64); 5] = [(3.0, 1.0), (6.0, 0.8), (12.0, 0.6), (24.0, 0.5), (48.0, 0.4)];

fn hash(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed ^ octave.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h = h.rotate_left(31) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Intensity in `[0, 255]` at `(x, y)`.
    pub fn value(&self, x: f64, y: f64) -> f32 {
        let norm: f64 = OCTAVES.iter().map(|o| o.1).sum();
        let mut v = 0.0;
        for (o, &(cell, amp)) in OCTAVES.iter().enumerate() {
            let (u, w) = (x / cell, y / cell);
            let (ix, iy) = (u.floor() as i64, w.floor() as i64);
            let (fx, fy) = (smooth(u - ix as f64), smooth(w - iy as f64));
            let h = |dx: i64, dy: i64| hash(self.seed, o as u64, ix + dx, iy + dy);
            let top = h(0, 0) + (h(1, 0) - h(0, 0)) * fx;
            let bottom = h(0, 1) + (h(1, 1) - h(0, 1)) * fx;
            v += amp * (top + (bottom - top) * fy);
        }
        (128.0 + 200.0 * v / norm).clamp(0.0, 255.0) as f32
    }
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpFamily {
    Identity,
    Translation,
    Similarity,
    Homography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub family: WarpFamily,
    pub width: u32,
    pub height: u32,
    pub n_segments: usize,
    /// Texture feature size multiplier; larger is coarser.
    pub texture_scale: f64,
    /// Zoom between the views for the homography family.
    pub scale: f64,
    /// Largest shift in pixels for the translation family.
    pub max_shift: i32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 1,
            family: WarpFamily::Identity,
            width: 320,
            height: 240,
            n_segments: 6,
            texture_scale: 1.0,
            scale: 2.0,
            max_shift: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub index: usize,
    pub img0: GrayImage,
    pub img1: GrayImage,
    /// Image-0 pixels to image-1 pixels.
    pub h: Matrix3<f64>,
    pub areas0: Vec<Area>,
    /// `areas1[i]` corresponds to `areas0[i]`.
    pub areas1: Vec<Area>,
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::Homography {
            h: from_matrix(&self.h),
            dims0: self.img0.dims(),
            dims1: self.img1.dims(),
        }
    }

    pub fn pairs(&self) -> Vec<(Area, Area)> {
        self.areas0.iter().copied().zip(self.areas1.iter().copied()).collect()
    }
}

fn translation(dx: f64, dy: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
}

fn similarity(angle: f64, s: f64) -> Matrix3<f64> {
    let (sn, cs) = angle.sin_cos();
    Matrix3::new(s * cs, -s * sn, 0.0, s * sn, s * cs, 0.0, 0.0, 0.0, 1.0)
}

/// Warp and zoom factor for one scene.
fn draw_warp(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Matrix3<f64>, f64) {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let c = translation(w / 2.0, h / 2.0);
    let c_inv = translation(-w / 2.0, -h / 2.0);
    match spec.family {
        WarpFamily::Identity => (Matrix3::identity(), 1.0),
        WarpFamily::Translation => {
            let m = spec.max_shift.max(0);
            let dx = rng.random_range(-m..=m);
            let dy = rng.random_range(-m..=m);
            (translation(dx as f64, dy as f64), 1.0)
        }
        WarpFamily::Similarity => {
            let angle = rng.random_range(-10.0f64..10.0).to_radians();
            let s = rng.random_range(0.85..1.2);
            let t = translation(rng.random_range(-w / 16.0..w / 16.0), rng.random_range(-h / 16.0..h / 16.0));
            (t * c * similarity(angle, s) * c_inv, s)
        }
        WarpFamily::Homography => {
            let s = spec.scale;
            let c0 = translation(-rng.random_range(0.4..0.6) * w, -rng.random_range(0.4..0.6) * h);
            let angle = rng.random_range(-5.0f64..5.0).to_radians();
            let p = 0.15 / (s * w.max(h));
            let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, rng.random_range(-p..p), rng.random_range(-p..p), 1.0);
            (c * similarity(angle, s) * persp * c0, s)
        }
    }
}

fn draw_areas(spec: &SyntheticSpec, hm: &Matrix3<f64>, zoom: f64, rng: &mut ChaCha8Rng) -> Vec<Area> {
    let dims = ImageDims::new(spec.width, spec.height).expect("valid dims");
    let base = spec.width.min(spec.height) as f64 / zoom.max(1.0);
    let (lo, hi) = ((0.15 * base).max(8.0), (0.45 * base).max(10.0));
    let mut out: Vec<Area> = Vec::new();
    for _ in 0..4000 {
        if out.len() >= spec.n_segments {
            break;
        }
        let aw = rng.random_range(lo..hi).round() as i32;
        let ah = rng.random_range(lo..hi).round() as i32;
        if aw >= spec.width as i32 || ah >= spec.height as i32 {
            continue;
        }
        let x = rng.random_range(0..=spec.width as i32 - aw);
        let y = rng.random_range(0..=spec.height as i32 - ah);
        let Ok(a) = Area::new(x, y, x + aw, y + ah) else { continue };
        let Some(b) = warp_area_box(hm, &a) else { continue };
        let inside = b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= dims.width as f64 && b[3] <= dims.height as f64;
        if inside && out.iter().all(|o| iou(o, &a) < 0.5) {
            out.push(a);
        }
    }
    out
}

pub fn gen_scene(spec: &SyntheticSpec, index: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let tex = Texture::new(rng.random());
    let (hm, zoom) = draw_warp(spec, &mut rng);
    let ts = spec.texture_scale;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let img0 = GrayImage::from_fn(w, h, |x, y| tex.value(x as f64 / ts, y as f64 / ts));
    let inv = hm.try_inverse().expect("invertible warp");
    let img1 = GrayImage::from_fn(w, h, |x, y| match warp_point(&inv, [x as f64, y as f64]) {
        Some(p) => tex.value(p[0] / ts, p[1] / ts),
        None => 0.0,
    });
    let areas0 = draw_areas(spec, &hm, zoom, &mut rng);
    let dims1 = img1.dims();
    let (areas0, areas1): (Vec<Area>, Vec<Area>) = areas0
        .into_iter()
        .filter_map(|a| warp_area(&hm, &a, dims1).map(|b| (a, b)))
        .unzip();
    SyntheticScene {
        index,
        img0,
        img1,
        h: hm,
        areas0,
        areas1,
    }
}

/// Deterministic scenes; each scene depends only on the seed and its index.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<SyntheticScene> {
    use rayon::prelude::*;
    (0..spec.n_scenes).into_par_iter().map(|i| gen_scene(spec, i)).collect()
}

/// Calibrated two-view scene given as point matches plus its ground truth.
#[derive(Debug, Clone)]
pub struct PoseScene {
    pub matches: Vec<PointMatch>,
    pub gt: GroundTruth,
}

/// `n` correspondences of random 3-D points seen by two 640x480 cameras,
/// with Gaussian pixel noise of standard deviation `noise_px`.
pub fn gen_pose_scene(seed: u64, n: usize, noise_px: f64) -> PoseScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
    let r = *Rotation3::from_euler_angles(
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
    )
    .matrix();
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)).normalize();
    let project = |x: &Vector3<f64>| {
        let v = k * x;
        [v[0] / v[2], v[1] / v[2]]
    };
    let in_frame = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= 639.0 && p[1] <= 479.0;
    let mut matches = Vec::with_capacity(n);
    while matches.len() < n {
        let z = rng.random_range(4.0..10.0);
        let x0 = Vector3::new(rng.random_range(-0.64..0.64) * z, rng.random_range(-0.48..0.48) * z, z);
        let x1 = r * x0 + t;
        if x1[2] <= 0.5 {
            continue;
        }
        let mut a = project(&x0);
        let mut b = project(&x1);
        for v in a.iter_mut().chain(b.iter_mut()) {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise_px * e;
        }
        if in_frame(a) && in_frame(b) {
            matches.push(PointMatch {
                p0: a,
                p1: b,
                score: 1.0,
                provenance: Provenance::Global,
            });
        }
    }
    let dims = ImageDims::new(640, 480).expect("valid dims");
    PoseScene {
        matches,
        gt: GroundTruth::Pose {
            r: from_matrix(&r),
            t: [t[0], t[1], t[2]],
            k0: from_matrix(&k),
            k1: from_matrix(&k),
            dims0: dims,
            dims1: dims,
        },
    }
}
