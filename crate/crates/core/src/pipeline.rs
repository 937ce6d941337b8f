//! Area-to-point matching: crop matched area pairs, match points inside each
//! pair, map them back to full-image coordinates, fuse, filter and top up
//! with full-image matches when the areas cover too little of the image.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmesa::{baseline_coarse_match, DmesaError};
use crate::epipolar::ransac_fundamental;
use crate::geometry::{expand_to_aspect, Area, ImageDims};
use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("point matcher failed: {0}")]
    Matcher(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

impl From<DmesaError> for PipelineError {
    fn from(e: DmesaError) -> Self {
        PipelineError::Matcher(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Index into the area-match list.
    Area(usize),
    Global,
}

/// Correspondence in full-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub score: f64,
    pub provenance: Provenance,
}

/// Correspondence in the coordinates of the two images given to a matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMatch {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub score: f64,
}

/// Point matcher contract: two equally sized images in, local matches out.
pub trait PointMatcherProvider: Sync {
    fn match_points(&self, a: &GrayImage, b: &GrayImage) -> Result<Vec<LocalMatch>, PipelineError>;
}

/// Coarse patch matches read as point matches at patch centers.
pub struct BaselinePointMatcher;

impl PointMatcherProvider for BaselinePointMatcher {
    fn match_points(&self, a: &GrayImage, b: &GrayImage) -> Result<Vec<LocalMatch>, PipelineError> {
        Ok(baseline_coarse_match(a, b)?
            .into_iter()
            .map(|m| LocalMatch {
                p0: m.src,
                p1: m.tgt,
                score: m.confidence,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub r_a: f64,
    pub pm_input_side: usize,
    pub occupancy_ratio: f64,
    pub phi: f64,
    pub ransac_iters: usize,
    pub seed: u64,
    pub global_collection: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            r_a: 1.0,
            pm_input_side: 480,
            occupancy_ratio: 0.6,
            phi: 3.5,
            ransac_iters: 1000,
            seed: 0,
            global_collection: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.r_a > 0.0 && self.r_a.is_finite()) {
            return Err(PipelineError::Config(format!("r_a must be positive, got {}", self.r_a)));
        }
        if !(0.0..=1.0).contains(&self.occupancy_ratio) {
            return Err(PipelineError::Config(format!(
                "occupancy_ratio must be in [0, 1], got {}",
                self.occupancy_ratio
            )));
        }
        if self.pm_input_side < 8 {
            return Err(PipelineError::Config("pm_input_side must be at least 8".into()));
        }
        if self.phi.is_nan() || self.phi < 0.0 {
            return Err(PipelineError::Config(format!("phi must be non-negative, got {}", self.phi)));
        }
        Ok(())
    }

    /// Matcher input size for a window of aspect `w / h`.
    fn input_dims(&self, aspect: f64) -> (usize, usize) {
        let side = self.pm_input_side;
        if aspect >= 1.0 {
            (side, ((side as f64 / aspect).round() as usize).max(8))
        } else {
            (((side as f64 * aspect).round() as usize).max(8), side)
        }
    }
}

/// Affine map between a resampled window and the full image:
/// `full = x0 + (u + 0.5) / sx - 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub sx: f64,
    pub sy: f64,
}

impl CropTransform {
    pub fn to_full(&self, u: [f64; 2]) -> [f64; 2] {
        [self.x0 + (u[0] + 0.5) / self.sx - 0.5, self.y0 + (u[1] + 0.5) / self.sy - 0.5]
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.x0 + 0.5) * self.sx - 0.5, (p[1] - self.y0 + 0.5) * self.sy - 0.5]
    }
}

/// A window resampled for the point matcher.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: GrayImage,
    pub transform: CropTransform,
    /// The area could not be expanded and the whole image was letterboxed.
    pub letterboxed: bool,
}

fn resample(img: &GrayImage, x0: f64, y0: f64, w: f64, h: f64, out: (usize, usize)) -> Crop {
    Crop {
        image: img.resample_window(x0, y0, w, h, out.0, out.1),
        transform: CropTransform {
            x0,
            y0,
            sx: out.0 as f64 / w,
            sy: out.1 as f64 / h,
        },
        letterboxed: false,
    }
}

/// Expand `area` to aspect `r_a`, crop it and resample it to the matcher
/// input size. Falls back to the whole image, letterboxed to `r_a`.
pub fn crop_area(img: &GrayImage, area: &Area, cfg: &PipelineConfig) -> Crop {
    let out = cfg.input_dims(cfg.r_a);
    match expand_to_aspect(area, cfg.r_a, img.dims()) {
        Ok(a) => resample(
            img,
            a.x_min() as f64,
            a.y_min() as f64,
            a.width() as f64,
            a.height() as f64,
            out,
        ),
        Err(_) => {
            let (w, h) = (img.width() as f64, img.height() as f64);
            let (bw, bh) = if w / h >= cfg.r_a { (w, w / cfg.r_a) } else { (h * cfg.r_a, h) };
            let mut c = resample(img, (w - bw) / 2.0, (h - bh) / 2.0, bw, bh, out);
            c.letterboxed = true;
            c
        }
    }
}

pub fn crop_area_pair(img0: &GrayImage, img1: &GrayImage, area0: &Area, area1: &Area, cfg: &PipelineConfig) -> (Crop, Crop) {
    (crop_area(img0, area0, cfg), crop_area(img1, area1, cfg))
}

fn inside(p: [f64; 2], dims: ImageDims) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= dims.width as f64 - 1.0 && p[1] <= dims.height as f64 - 1.0
}

fn remap(local: &[LocalMatch], t0: &CropTransform, t1: &CropTransform, d0: ImageDims, d1: ImageDims, provenance: Provenance) -> Vec<PointMatch> {
    local
        .iter()
        .map(|m| PointMatch {
            p0: t0.to_full(m.p0),
            p1: t1.to_full(m.p1),
            score: m.score,
            provenance,
        })
        .filter(|m| inside(m.p0, d0) && inside(m.p1, d1))
        .collect()
}

/// Keep the highest-scoring match per pair of 1-px cells; first wins ties.
/// Order of first appearance is preserved.
pub fn dedupe(matches: Vec<PointMatch>) -> Vec<PointMatch> {
    let key = |m: &PointMatch| {
        (
            m.p0[0].floor() as i64,
            m.p0[1].floor() as i64,
            m.p1[0].floor() as i64,
            m.p1[1].floor() as i64,
        )
    };
    let mut slot: HashMap<(i64, i64, i64, i64), usize> = HashMap::new();
    let mut out: Vec<PointMatch> = Vec::new();
    for m in matches {
        match slot.get(&key(&m)) {
            Some(&i) => {
                if m.score > out[i].score {
                    out[i] = m;
                }
            }
            None => {
                slot.insert(key(&m), out.len());
                out.push(m);
            }
        }
    }
    out
}

/// Fundamental-matrix consensus filter; inliers have Sampson distance at most
/// `phi` pixels. Fewer than 8 matches, an infinite `phi` or a failed fit
/// pass everything through (the last with a warning).
pub fn geometric_filter(matches: Vec<PointMatch>, phi: f64, iters: usize, seed: u64) -> (Vec<PointMatch>, Option<String>) {
    if matches.len() < 8 || phi.is_infinite() {
        return (matches, None);
    }
    let p0: Vec<[f64; 2]> = matches.iter().map(|m| m.p0).collect();
    let p1: Vec<[f64; 2]> = matches.iter().map(|m| m.p1).collect();
    match ransac_fundamental(&p0, &p1, phi, iters, seed) {
        Some(c) => (
            matches.into_iter().zip(c.inliers).filter(|(_, k)| *k).map(|(m, _)| m).collect(),
            None,
        ),
        None => (matches, Some("geometric filter: degenerate configuration, matches kept".into())),
    }
}

/// Fraction of image pixels covered by the union of `areas`.
pub fn coverage(areas: &[Area], dims: ImageDims) -> f64 {
    let (w, h) = (dims.width as usize, dims.height as usize);
    if w == 0 || h == 0 {
        return 0.0;
    }
    let mut covered = vec![false; w * h];
    for a in areas {
        let Some(c) = a.clipped(dims) else { continue };
        for y in c.y_min() as usize..c.y_max() as usize {
            covered[y * w + c.x_min() as usize..y * w + c.x_max() as usize].fill(true);
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / (w * h) as f64
}

/// Run the matcher on both full images resized to the same input size.
pub fn match_full_images(
    img0: &GrayImage,
    img1: &GrayImage,
    provider: &dyn PointMatcherProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<PointMatch>, PipelineError> {
    let out = cfg.input_dims(img0.width() as f64 / img0.height() as f64);
    let c0 = resample(img0, 0.0, 0.0, img0.width() as f64, img0.height() as f64, out);
    let c1 = resample(img1, 0.0, 0.0, img1.width() as f64, img1.height() as f64, out);
    let local = provider.match_points(&c0.image, &c1.image)?;
    Ok(remap(&local, &c0.transform, &c1.transform, img0.dims(), img1.dims(), Provenance::Global))
}

/// When the matched areas cover less than `occupancy_ratio` of image 0, add
/// full-image matches whose image-0 point lies outside every matched area.
pub fn global_collection(
    img0: &GrayImage,
    img1: &GrayImage,
    areas0: &[Area],
    mut matches: Vec<PointMatch>,
    provider: &dyn PointMatcherProvider,
    cfg: &PipelineConfig,
) -> Result<(Vec<PointMatch>, usize), PipelineError> {
    if coverage(areas0, img0.dims()) >= cfg.occupancy_ratio {
        return Ok((matches, 0));
    }
    let extra: Vec<PointMatch> = match_full_images(img0, img1, provider, cfg)?
        .into_iter()
        .filter(|m| !areas0.iter().any(|a| a.contains_point(m.p0[0], m.p0[1])))
        .collect();
    let n = extra.len();
    matches.extend(extra);
    Ok((matches, n))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub matches: Vec<PointMatch>,
    pub coverage: f64,
    pub global_added: usize,
    pub warnings: Vec<String>,
}

/// Full area-to-point matching over `(area0, area1)` pairs.
pub fn run_a2pm(
    img0: &GrayImage,
    img1: &GrayImage,
    pairs: &[(Area, Area)],
    provider: &dyn PointMatcherProvider,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let per_pair: Vec<Result<Vec<PointMatch>, String>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (a0, a1))| {
            let (c0, c1) = crop_area_pair(img0, img1, a0, a1, cfg);
            provider
                .match_points(&c0.image, &c1.image)
                .map(|local| remap(&local, &c0.transform, &c1.transform, img0.dims(), img1.dims(), Provenance::Area(i)))
                .map_err(|e| format!("area pair {i}: {e}"))
        })
        .collect();
    let mut warnings = Vec::new();
    let mut all = Vec::new();
    for r in per_pair {
        match r {
            Ok(m) => all.extend(m),
            Err(e) => warnings.push(e),
        }
    }
    let (filtered, warn) = geometric_filter(dedupe(all), cfg.phi, cfg.ransac_iters, cfg.seed);
    warnings.extend(warn);
    let areas0: Vec<Area> = pairs.iter().map(|p| p.0).collect();
    let cov = coverage(&areas0, img0.dims());
    let (matches, global_added) = if cfg.global_collection {
        global_collection(img0, img1, &areas0, filtered, provider, cfg)?
    } else {
        (filtered, 0)
    };
    Ok(PipelineOutput {
        matches,
        coverage: cov,
        global_added,
        warnings,
    })
}
