//! Dense area matching from coarse patch matches.
//!
//! Patch matches of a source area against the target image become a
//! Gaussian mixture over target coordinates. The mixture is refined by a few
//! EM steps against samples of the forward direction, starting from the
//! cycle-consistent components of the reverse direction, and the matched
//! area is the bounding box of its super-level set.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Area, ImageDims};
use crate::image::GrayImage;
use crate::ncc::{PatchGrid, WindowSearch, PATCH};

#[derive(Debug, Error)]
pub enum DmesaError {
    #[error("image {0}x{1} is smaller than one 8x8 patch")]
    TooSmall(usize, usize),
    #[error("no patch matches")]
    NoMatches,
    #[error("{0} observations for {1} components")]
    TooFewObservations(usize, usize),
    #[error("coarse match file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("coarse matcher failed: {0}")]
    Provider(String),
}

/// Default confidence level of the matching distribution.
pub fn default_t_c() -> f64 {
    (-1.0f64).exp() / (2.0 * std::f64::consts::PI)
}

pub const COV_FLOOR: f64 = 1e-3;
const STARVED: f64 = 1e-12;
const MIN_CORRELATION: f32 = 0.2;
/// Lower bound on EM observations per initial component.
const SAMPLES_PER_COMPONENT: usize = 32;

/// One coarse correspondence between patch centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub src: [f64; 2],
    pub tgt: [f64; 2],
    pub confidence: f64,
}

/// Coarse matcher contract: deterministic for fixed inputs.
pub trait PatchMatchProvider: Sync {
    fn coarse_match(&self, src: &GrayImage, tgt: &GrayImage) -> Result<Vec<PatchMatch>, DmesaError>;
}

/// Mutual nearest neighbors by ZNCC between the 8x8 grid patches of `src`
/// and every 8x8 window of `tgt`: a grid patch keeps its best window when no
/// other grid patch correlates better with that window. Matches with
/// correlation below 0.2 are dropped.
pub fn baseline_coarse_match(src: &GrayImage, tgt: &GrayImage) -> Result<Vec<PatchMatch>, DmesaError> {
    for img in [src, tgt] {
        if img.width() < PATCH || img.height() < PATCH {
            return Err(DmesaError::TooSmall(img.width(), img.height()));
        }
    }
    let gs = PatchGrid::new(src);
    let ws = WindowSearch::new(tgt);
    let half = (PATCH as f64 - 1.0) / 2.0;
    let found: Vec<Option<PatchMatch>> = (0..gs.len())
        .into_par_iter()
        .map(|i| {
            if gs.is_flat(i) {
                return None;
            }
            let (x, y, score) = ws.best(gs.vector(i))?;
            if score < MIN_CORRELATION as f64 {
                return None;
            }
            let rival = (0..gs.len())
                .filter(|&j| j != i && !gs.is_flat(j))
                .any(|j| ws.score(gs.vector(j), x, y).is_some_and(|s| s > score));
            (!rival).then(|| PatchMatch {
                src: gs.center(i),
                tgt: [x as f64 + half, y as f64 + half],
                confidence: score.min(1.0),
            })
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

pub struct BaselineCoarse;

impl PatchMatchProvider for BaselineCoarse {
    fn coarse_match(&self, src: &GrayImage, tgt: &GrayImage) -> Result<Vec<PatchMatch>, DmesaError> {
        baseline_coarse_match(src, tgt)
    }
}

/// Externally computed coarse matches for one source area. Forward matches
/// go from the source area image (area-local pixels) into the target image;
/// reverse matches go from the target image back into the source area image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseRecord {
    pub source: usize,
    pub forward: Vec<PatchMatch>,
    pub reverse: Vec<PatchMatch>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatchFile {
    pub areas: Vec<CoarseRecord>,
}

impl CoarseMatchFile {
    pub fn load(path: &Path) -> Result<Self, DmesaError> {
        let err = |reason: String| DmesaError::File {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: CoarseMatchFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        for r in &file.areas {
            if r.forward.iter().chain(&r.reverse).any(|m| !(m.confidence > 0.0 && m.confidence <= 1.0)) {
                return Err(err(format!("area {} has a confidence outside (0, 1]", r.source)));
            }
        }
        Ok(file)
    }

    pub fn get(&self, source: usize) -> Option<&CoarseRecord> {
        self.areas.iter().find(|r| r.source == source)
    }
}

/// Symmetric 2x2 covariance `[xx, xy, yy]`.
pub type Cov2 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: Cov2,
}

fn det(c: &Cov2) -> f64 {
    c[0] * c[2] - c[1] * c[1]
}

fn eigenvalues(c: &Cov2) -> (f64, f64) {
    let tr = c[0] + c[2];
    let disc = ((c[0] - c[2]).powi(2) / 4.0 + c[1] * c[1]).sqrt();
    (tr / 2.0 - disc, tr / 2.0 + disc)
}

/// Raise both eigenvalues to at least `floor`.
fn floor_cov(c: Cov2, floor: f64) -> Cov2 {
    let (lo, hi) = eigenvalues(&c);
    if lo >= floor {
        return c;
    }
    // Eigenvector of the larger eigenvalue, from the better-conditioned row.
    let (vx, vy) = if c[0] >= c[2] { (hi - c[2], c[1]) } else { (c[1], hi - c[0]) };
    let n = (vx * vx + vy * vy).sqrt();
    if !(n > 0.0) {
        return [c[0].max(floor), 0.0, c[2].max(floor)];
    }
    let (ux, uy) = (vx / n, vy / n);
    let (a, b) = (lo.max(floor), hi.max(floor));
    [
        b * ux * ux + a * uy * uy,
        (b - a) * ux * uy,
        b * uy * uy + a * ux * ux,
    ]
}

impl Component {
    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let d = det(&self.cov);
        let (dx, dy) = (x[0] - self.mean[0], x[1] - self.mean[1]);
        let m = (self.cov[2] * dx * dx - 2.0 * self.cov[1] * dx * dy + self.cov[0] * dy * dy) / d;
        -0.5 * m - (2.0 * std::f64::consts::PI).ln() - 0.5 * d.ln()
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn peak(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * det(&self.cov).sqrt())
    }
}

/// Gaussian mixture over image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<Component>,
}

/// One component per match: mean at the target center, covariance
/// `diag(8/c, 8/c)`, uniform weights.
pub fn build_gmm(matches: &[PatchMatch]) -> Result<Gmm, DmesaError> {
    if matches.is_empty() {
        return Err(DmesaError::NoMatches);
    }
    let w = 1.0 / matches.len() as f64;
    Ok(Gmm {
        components: matches
            .iter()
            .map(|m| {
                let v = PATCH as f64 / m.confidence;
                Component {
                    weight: w,
                    mean: m.tgt,
                    cov: [v, 0.0, v],
                }
            })
            .collect(),
    })
}

/// Mixture density `sum pi_k N(x; mu_k, Sigma_k)`.
pub fn density(g: &Gmm, x: [f64; 2]) -> f64 {
    g.components.iter().map(|c| c.weight * c.pdf(x)).sum()
}

/// Match intensity `scale^2 * K * p(x)`: the density with each component
/// counted once instead of `1/K` times, expressed per squared unit of
/// `scale` pixels.
pub fn intensity(g: &Gmm, x: [f64; 2], scale: f64) -> f64 {
    scale * scale * g.components.len() as f64 * density(g, x)
}

fn log_density(g: &Gmm, x: [f64; 2]) -> f64 {
    let logs: Vec<f64> = g.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)).collect();
    log_sum_exp(&logs)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_likelihood(g: &Gmm, obs: &[[f64; 2]]) -> f64 {
    obs.iter().map(|&x| log_density(g, x)).sum()
}

/// Tight pixel bounding box of `{x : intensity(x) >= t_c}` over the integer
/// grid of `dims`; `None` when the set is empty.
pub fn extract_area(g: &Gmm, t_c: f64, dims: ImageDims, scale: f64) -> Option<Area> {
    let k = g.components.len();
    if k == 0 {
        return None;
    }
    let (w, h) = (dims.width as i64, dims.height as i64);
    let kf = k as f64;
    let amp: Vec<f64> = g
        .components
        .iter()
        .map(|c| scale * scale * kf * c.weight * c.peak())
        .collect();
    // Outside every component's window each contribution is below t_c / K,
    // so the sum is below t_c. Contributions are accumulated over a wider
    // window where they stay above 1e-12 * t_c / K.
    let radius = |c: &Component, a: f64, level: f64| -> Option<f64> {
        (a > level).then(|| (2.0 * eigenvalues(&c.cov).1 * (a / level).ln()).sqrt())
    };
    let window = |c: &Component, r: f64| -> Option<(i64, i64, i64, i64)> {
        let x0 = ((c.mean[0] - r).ceil() as i64).max(0);
        let y0 = ((c.mean[1] - r).ceil() as i64).max(0);
        let x1 = ((c.mean[0] + r).floor() as i64).min(w - 1);
        let y1 = ((c.mean[1] + r).floor() as i64).min(h - 1);
        (x0 <= x1 && y0 <= y1).then_some((x0, y0, x1, y1))
    };
    let inner: Vec<Option<(i64, i64, i64, i64)>> = g
        .components
        .iter()
        .zip(&amp)
        .map(|(c, &a)| radius(c, a, t_c / kf).and_then(|r| window(c, r)))
        .collect();
    let (mut bx0, mut by0, mut bx1, mut by1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for &(x0, y0, x1, y1) in inner.iter().flatten() {
        bx0 = bx0.min(x0);
        by0 = by0.min(y0);
        bx1 = bx1.max(x1);
        by1 = by1.max(y1);
    }
    if bx0 > bx1 {
        return None;
    }
    let bw = (bx1 - bx0 + 1) as usize;
    let bh = (by1 - by0 + 1) as usize;
    let mut acc = vec![0.0f64; bw * bh];
    let mut candidate = vec![false; bw * bh];
    for win in inner.iter().flatten() {
        for y in win.1..=win.3 {
            for x in win.0..=win.2 {
                candidate[(y - by0) as usize * bw + (x - bx0) as usize] = true;
            }
        }
    }
    let tail = 1e-12 * t_c / kf;
    for (c, &a) in g.components.iter().zip(&amp) {
        let Some(r) = radius(c, a, tail) else { continue };
        let Some((x0, y0, x1, y1)) = window(c, r) else { continue };
        let (x0, y0, x1, y1) = (x0.max(bx0), y0.max(by0), x1.min(bx1), y1.min(by1));
        let s = scale * scale * kf * c.weight;
        for y in y0..=y1 {
            for x in x0..=x1 {
                acc[(y - by0) as usize * bw + (x - bx0) as usize] += s * c.pdf([x as f64, y as f64]);
            }
        }
    }
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for yy in 0..bh {
        for xx in 0..bw {
            let i = yy * bw + xx;
            if candidate[i] && acc[i] >= t_c {
                let (x, y) = (xx as i64 + bx0, yy as i64 + by0);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 <= x1).then(|| Area::new(x0 as i32, y0 as i32, x1 as i32 + 1, y1 as i32 + 1).expect("non-empty box"))
}

/// Draw `n` points from the mixture.
pub fn sample(g: &Gmm, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    if g.components.is_empty() {
        return Vec::new();
    }
    let pick = WeightedIndex::new(g.components.iter().map(|c| c.weight)).expect("positive weights");
    (0..n)
        .map(|_| {
            let c = &g.components[pick.sample(rng)];
            let l11 = c.cov[0].sqrt();
            let l21 = c.cov[1] / l11;
            let l22 = (c.cov[2] - l21 * l21).max(0.0).sqrt();
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            [c.mean[0] + l11 * z0, c.mean[1] + l21 * z0 + l22 * z1]
        })
        .collect()
}

/// Refined mixture and the observation log-likelihood before each step and
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub gmm: Gmm,
    pub log_likelihood: Vec<f64>,
}

/// `steps` EM iterations on `obs` starting from `init`. Components whose
/// total responsibility drops below 1e-12 are removed; covariance
/// eigenvalues are floored at 1e-3.
pub fn em_refine(obs: &[[f64; 2]], init: &Gmm, steps: usize) -> Result<EmResult, DmesaError> {
    let k = init.components.len();
    if k == 0 {
        return Err(DmesaError::NoMatches);
    }
    if obs.len() < k {
        return Err(DmesaError::TooFewObservations(obs.len(), k));
    }
    let mut g = init.clone();
    let mut ll = vec![log_likelihood(&g, obs)];
    for _ in 0..steps {
        let k = g.components.len();
        let mut resp = vec![0.0f64; obs.len() * k];
        for (i, &x) in obs.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (r, c) in row.iter_mut().zip(&g.components) {
                *r = c.weight.ln() + c.log_pdf(x);
            }
            let norm = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r = (*r - norm).exp());
        }
        let n = obs.len() as f64;
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let nk: f64 = (0..obs.len()).map(|i| resp[i * k + j]).sum();
            if nk < STARVED {
                continue;
            }
            let mut mean = [0.0; 2];
            for (i, x) in obs.iter().enumerate() {
                let r = resp[i * k + j];
                mean[0] += r * x[0];
                mean[1] += r * x[1];
            }
            mean = [mean[0] / nk, mean[1] / nk];
            let mut cov = [0.0; 3];
            for (i, x) in obs.iter().enumerate() {
                let r = resp[i * k + j];
                let (dx, dy) = (x[0] - mean[0], x[1] - mean[1]);
                cov[0] += r * dx * dx;
                cov[1] += r * dx * dy;
                cov[2] += r * dy * dy;
            }
            let cov = floor_cov(cov.map(|v| v / nk), COV_FLOOR);
            next.push(Component {
                weight: nk / n,
                mean,
                cov,
            });
        }
        let total: f64 = next.iter().map(|c| c.weight).sum();
        next.iter_mut().for_each(|c| c.weight /= total);
        g = Gmm { components: next };
        ll.push(log_likelihood(&g, obs));
    }
    Ok(EmResult { gmm: g, log_likelihood: ll })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmesaParams {
    pub t_c: f64,
    pub em_steps: usize,
    pub samples: usize,
    /// Pixel size of one intensity unit. The default puts the level set of a
    /// confidence-1 match half a patch from its center.
    pub scale: f64,
    pub seed: u64,
}

impl Default for DmesaParams {
    fn default() -> Self {
        Self {
            t_c: default_t_c(),
            em_steps: 3,
            samples: 1024,
            scale: (PATCH as f64).sqrt(),
            seed: 0,
        }
    }
}

/// Result for one source area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatch {
    pub source: usize,
    /// Refined source area in image 0.
    pub area0: Area,
    /// Matched area in image 1.
    pub area1: Area,
    /// Mixture components after refinement.
    pub components: usize,
}

fn near(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
    (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
}

/// Reverse matches whose two ends both lie within half a patch of the
/// corresponding ends of some forward match.
pub fn mutual_reverse(forward: &[PatchMatch], reverse: &[PatchMatch]) -> Vec<PatchMatch> {
    let half = PATCH as f64 / 2.0;
    reverse
        .iter()
        .filter(|r| {
            forward
                .iter()
                .any(|f| near(f.src, r.tgt, half) && near(f.tgt, r.src, half))
        })
        .copied()
        .collect()
}

/// Dense matching of one source area given both directions' coarse matches.
/// `origin` is the top-left of the source area in image 0; forward `src` and
/// reverse `tgt` points are area-local.
#[allow(clippy::too_many_arguments)]
pub fn match_from_coarse(
    source: usize,
    origin: (i32, i32),
    src_dims: ImageDims,
    tgt_dims: ImageDims,
    forward: &[PatchMatch],
    reverse: &[PatchMatch],
    params: &DmesaParams,
    rng: &mut ChaCha8Rng,
) -> Result<Option<DenseMatch>, DmesaError> {
    if forward.is_empty() || reverse.is_empty() {
        return Ok(None);
    }
    let forward_gmm = build_gmm(forward)?;
    let mutual = mutual_reverse(forward, reverse);
    if mutual.is_empty() {
        return Ok(None);
    }
    // Reverse components placed at their target-image end.
    let transported: Vec<PatchMatch> = mutual
        .iter()
        .map(|r| PatchMatch {
            src: r.tgt,
            tgt: r.src,
            confidence: r.confidence,
        })
        .collect();
    let init = build_gmm(&transported)?;
    let n = params.samples.max(SAMPLES_PER_COMPONENT * init.components.len());
    let obs = sample(&forward_gmm, n, rng);
    let refined = em_refine(&obs, &init, params.em_steps)?;
    let Some(area1) = extract_area(&refined.gmm, params.t_c, tgt_dims, params.scale) else {
        return Ok(None);
    };
    let src_gmm = build_gmm(
        &mutual
            .iter()
            .map(|r| PatchMatch {
                src: r.src,
                tgt: r.tgt,
                confidence: r.confidence,
            })
            .collect::<Vec<_>>(),
    )?;
    let Some(local) = extract_area(&src_gmm, params.t_c, src_dims, params.scale) else {
        return Ok(None);
    };
    Ok(Some(DenseMatch {
        source,
        area0: local.translated(origin.0, origin.1),
        area1,
        components: refined.gmm.components.len(),
    }))
}

fn source_seed(seed: u64, source: usize) -> u64 {
    seed ^ (source as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Dense matching of one source area of `img0` against `img1`.
pub fn match_area_dmesa(
    source: usize,
    area: &Area,
    img0: &GrayImage,
    img1: &GrayImage,
    provider: &dyn PatchMatchProvider,
    params: &DmesaParams,
) -> Result<Option<DenseMatch>, DmesaError> {
    let crop = img0.crop(area);
    let forward = provider.coarse_match(&crop, img1)?;
    let reverse = provider.coarse_match(img1, &crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(source_seed(params.seed, source));
    match_from_coarse(
        source,
        (area.x_min(), area.y_min()),
        crop.dims(),
        img1.dims(),
        &forward,
        &reverse,
        params,
        &mut rng,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DmesaReport {
    pub matches: Vec<DenseMatch>,
    pub unmatched: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

fn collect(results: Vec<(usize, Result<Option<DenseMatch>, DmesaError>)>) -> DmesaReport {
    let mut report = DmesaReport::default();
    for (s, r) in results {
        match r {
            Ok(Some(m)) => report.matches.push(m),
            Ok(None) => report.unmatched.push(s),
            Err(e) => report.failures.push((s, e.to_string())),
        }
    }
    report
}

/// Match every `(id, area)` source of image 0 into image 1, in parallel.
pub fn match_areas_dmesa(
    sources: &[(usize, Area)],
    img0: &GrayImage,
    img1: &GrayImage,
    provider: &dyn PatchMatchProvider,
    params: &DmesaParams,
) -> DmesaReport {
    collect(
        sources
            .par_iter()
            .map(|(id, a)| (*id, match_area_dmesa(*id, a, img0, img1, provider, params)))
            .collect(),
    )
}

/// Same as [`match_areas_dmesa`] with injected coarse matches; sources
/// without a record are left unmatched.
pub fn match_areas_injected(
    sources: &[(usize, Area)],
    dims0: ImageDims,
    dims1: ImageDims,
    file: &CoarseMatchFile,
    params: &DmesaParams,
) -> DmesaReport {
    collect(
        sources
            .iter()
            .map(|(id, a)| {
                let r = match file.get(*id) {
                    Some(rec) => {
                        let src_dims = ImageDims {
                            width: a.width() as u32,
                            height: a.height() as u32,
                        };
                        let mut rng = ChaCha8Rng::seed_from_u64(source_seed(params.seed, *id));
                        match_from_coarse(
                            *id,
                            (a.x_min(), a.y_min()),
                            src_dims,
                            dims1,
                            &rec.forward,
                            &rec.reverse,
                            params,
                            &mut rng,
                        )
                    }
                    None => Ok(None),
                };
                let _ = dims0;
                (*id, r)
            })
            .collect(),
    )
}
