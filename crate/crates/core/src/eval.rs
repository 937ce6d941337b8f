//! Area, point and pose metrics.
//!
//! Pixel coordinates put pixel centers on integers. A rectangle
//! `[x_min, x_max)` therefore spans `[x_min - 0.5, x_max - 0.5]` in
//! continuous coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::{decompose_essential, ransac_essential, rotation_error_deg, sampson_distance, translation_error_deg};
use crate::geometry::{Area, ImageDims};
use crate::pipeline::{coverage, PointMatch};

pub const MMA_THRESHOLDS: [f64; 3] = [3.0, 5.0, 7.0];
pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const AMP_TAU: f64 = 0.6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth homography is singular")]
    Singular,
    #[error("ground truth rotation is not a proper rotation")]
    BadRotation,
    #[error("camera intrinsics are singular")]
    BadIntrinsics,
}

pub type Mat3 = [[f64; 3]; 3];

pub fn to_matrix(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

pub fn from_matrix(m: &Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Ground truth for a pair. Homographies map image-0 pixels to image-1
/// pixels; poses follow `X1 = R X0 + t` with pixel intrinsics `k0`, `k1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruth {
    Homography {
        h: Mat3,
        dims0: ImageDims,
        dims1: ImageDims,
    },
    Pose {
        r: Mat3,
        t: [f64; 3],
        k0: Mat3,
        k1: Mat3,
        dims0: ImageDims,
        dims1: ImageDims,
    },
}

impl GroundTruth {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            GroundTruth::Homography { h, .. } => {
                if to_matrix(h).try_inverse().is_none() {
                    return Err(EvalError::Singular);
                }
            }
            GroundTruth::Pose { r, k0, k1, .. } => {
                let r = to_matrix(r);
                if (r.transpose() * r - Matrix3::identity()).norm() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
                    return Err(EvalError::BadRotation);
                }
                if to_matrix(k0).try_inverse().is_none() || to_matrix(k1).try_inverse().is_none() {
                    return Err(EvalError::BadIntrinsics);
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (ImageDims, ImageDims) {
        match self {
            GroundTruth::Homography { dims0, dims1, .. } | GroundTruth::Pose { dims0, dims1, .. } => (*dims0, *dims1),
        }
    }
}

pub fn warp_point(h: &Matrix3<f64>, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    (v[2] > 1e-12).then(|| [v[0] / v[2], v[1] / v[2]])
}

/// Bounding box `[x0, y0, x1, y1]` of the warped rectangle, in the same
/// half-open convention as `Area`.
pub fn warp_area_box(h: &Matrix3<f64>, a: &Area) -> Option<[f64; 4]> {
    let (x0, y0) = (a.x_min() as f64 - 0.5, a.y_min() as f64 - 0.5);
    let (x1, y1) = (a.x_max() as f64 - 0.5, a.y_max() as f64 - 0.5);
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in [[x0, y0], [x1, y0], [x0, y1], [x1, y1]] {
        let q = warp_point(h, c)?;
        b = [b[0].min(q[0]), b[1].min(q[1]), b[2].max(q[0]), b[3].max(q[1])];
    }
    Some([b[0] + 0.5, b[1] + 0.5, b[2] + 0.5, b[3] + 0.5])
}

/// Integer rectangle from a warped box, rounded and clipped to `dims`.
pub fn warp_area(h: &Matrix3<f64>, a: &Area, dims: ImageDims) -> Option<Area> {
    let b = warp_area_box(h, a)?;
    let x0 = b[0].round().max(0.0);
    let y0 = b[1].round().max(0.0);
    let x1 = b[2].round().min(dims.width as f64);
    let y1 = b[3].round().min(dims.height as f64);
    Area::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32).ok()
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reprojected IoU of a matched pair: the source rectangle is warped into
/// image 1, boxed, clipped to the frame and compared to the target.
pub fn aor(area0: &Area, area1: &Area, h: &Matrix3<f64>, dims1: ImageDims) -> f64 {
    let Some(b) = warp_area_box(h, area0) else { return 0.0 };
    let c = [
        b[0].max(0.0),
        b[1].max(0.0),
        b[2].min(dims1.width as f64),
        b[3].min(dims1.height as f64),
    ];
    if c[2] <= c[0] || c[3] <= c[1] {
        return 0.0;
    }
    let t = [area1.x_min() as f64, area1.y_min() as f64, area1.x_max() as f64, area1.y_max() as f64];
    box_iou(c, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amp {
    pub percent: f64,
    /// No matches were given; `percent` is 0 by convention.
    pub empty: bool,
}

/// Share of AOR values strictly above `tau`, in percent.
pub fn amp(aors: &[f64], tau: f64) -> Amp {
    if aors.is_empty() {
        return Amp { percent: 0.0, empty: true };
    }
    let ok = aors.iter().filter(|&&a| a > tau).count();
    Amp {
        percent: 100.0 * ok as f64 / aors.len() as f64,
        empty: false,
    }
}

/// Pixel-union coverage of the matched source areas, in percent.
pub fn acr(areas0: &[Area], dims0: ImageDims) -> f64 {
    100.0 * coverage(areas0, dims0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mma {
    pub thresholds: Vec<f64>,
    pub percent: Vec<f64>,
    pub evaluated: usize,
    /// Matches without a defined ground-truth error.
    pub excluded: usize,
}

/// Ground-truth error of one match in pixels: reprojection distance under a
/// homography, Sampson distance under a pose.
pub fn match_error(m: &PointMatch, gt: &GroundTruth) -> Option<f64> {
    match gt {
        GroundTruth::Homography { h, dims1, .. } => {
            let q = warp_point(&to_matrix(h), m.p0)?;
            let inside = q[0] >= -0.5 && q[1] >= -0.5 && q[0] <= dims1.width as f64 - 0.5 && q[1] <= dims1.height as f64 - 0.5;
            inside.then(|| (q[0] - m.p1[0]).hypot(q[1] - m.p1[1]))
        }
        GroundTruth::Pose { .. } => {
            let f = fundamental_from_pose(gt)?;
            Some(sampson_distance(&f, m.p0, m.p1))
        }
    }
}

/// `F = K1^-T [t]x R K0^-1`.
pub fn fundamental_from_pose(gt: &GroundTruth) -> Option<Matrix3<f64>> {
    let GroundTruth::Pose { r, t, k0, k1, .. } = gt else { return None };
    let t = Vector3::from(*t);
    let e = t.cross_matrix() * to_matrix(r);
    Some(to_matrix(k1).try_inverse()?.transpose() * e * to_matrix(k0).try_inverse()?)
}

pub fn mma(matches: &[PointMatch], gt: &GroundTruth, thresholds: &[f64]) -> Mma {
    let errors: Vec<f64> = matches.iter().filter_map(|m| match_error(m, gt)).collect();
    let n = errors.len();
    let percent = thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                0.0
            } else {
                100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64
            }
        })
        .collect();
    Mma {
        thresholds: thresholds.to_vec(),
        percent,
        evaluated: n,
        excluded: matches.len() - n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_deg: f64,
    /// `max(rotation, translation)`; 180 when estimation failed.
    pub error_deg: f64,
    pub inliers: usize,
    pub failed: bool,
}

impl PoseError {
    fn failure() -> Self {
        Self {
            rotation_deg: 180.0,
            translation_deg: 180.0,
            error_deg: 180.0,
            inliers: 0,
            failed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Inlier threshold in pixels, converted with the mean focal length.
    pub threshold_px: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            threshold_px: 1.0,
            iters: 1000,
            seed: 0,
        }
    }
}

fn normalize(k_inv: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = k_inv * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Estimate the relative pose from point matches and compare it with the
/// ground truth.
pub fn pose_error(matches: &[PointMatch], gt: &GroundTruth, params: &PoseParams) -> PoseError {
    let GroundTruth::Pose { r, t, k0, k1, .. } = gt else { return PoseError::failure() };
    if matches.len() < 5 {
        return PoseError::failure();
    }
    let (k0, k1) = (to_matrix(k0), to_matrix(k1));
    let (Some(i0), Some(i1)) = (k0.try_inverse(), k1.try_inverse()) else { return PoseError::failure() };
    let n0: Vec<[f64; 2]> = matches.iter().map(|m| normalize(&i0, m.p0)).collect();
    let n1: Vec<[f64; 2]> = matches.iter().map(|m| normalize(&i1, m.p1)).collect();
    let focal = (k0[(0, 0)] + k0[(1, 1)] + k1[(0, 0)] + k1[(1, 1)]) / 4.0;
    let Some(c) = ransac_essential(&n0, &n1, params.threshold_px / focal, params.iters, params.seed) else {
        return PoseError::failure();
    };
    let (a, b): (Vec<_>, Vec<_>) = n0.iter().zip(&n1).zip(&c.inliers).filter(|(_, &k)| k).map(|(p, _)| (*p.0, *p.1)).unzip();
    let Some((re, te)) = decompose_essential(&c.model, &a, &b) else { return PoseError::failure() };
    let rotation_deg = rotation_error_deg(&re, &to_matrix(r));
    let translation_deg = translation_error_deg(&te, &Vector3::from(*t));
    PoseError {
        rotation_deg,
        translation_deg,
        error_deg: rotation_deg.max(translation_deg),
        inliers: c.count(),
        failed: false,
    }
}

/// Area under the cumulative error curve up to each threshold, normalized
/// by the threshold, in percent. The curve is integrated exactly as a
/// piecewise-linear function.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let mut e: Vec<f64> = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, &v) in e.iter().enumerate() {
        xs.push(v);
        ys.push((i + 1) as f64 / n);
    }
    thresholds
        .iter()
        .map(|&t| {
            let last = xs.partition_point(|&x| x < t);
            let mut px: Vec<f64> = xs[..last].to_vec();
            let mut py: Vec<f64> = ys[..last].to_vec();
            px.push(t);
            py.push(ys[last - 1]);
            let area: f64 = px.windows(2).zip(py.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
            100.0 * area / t
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaScore {
    pub area0: Area,
    pub area1: Area,
    pub aor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaReport {
    pub matches: Vec<AreaScore>,
    pub mean_aor: f64,
    pub amp: Amp,
    pub acr: f64,
}

pub fn area_report(pairs: &[(Area, Area)], h: &Matrix3<f64>, dims0: ImageDims, dims1: ImageDims) -> AreaReport {
    let matches: Vec<AreaScore> = pairs
        .iter()
        .map(|(a0, a1)| AreaScore {
            area0: *a0,
            area1: *a1,
            aor: aor(a0, a1, h, dims1),
        })
        .collect();
    let aors: Vec<f64> = matches.iter().map(|m| m.aor).collect();
    let mean_aor = if aors.is_empty() { 0.0 } else { aors.iter().sum::<f64>() / aors.len() as f64 };
    let areas0: Vec<Area> = pairs.iter().map(|p| p.0).collect();
    AreaReport {
        mean_aor,
        amp: amp(&aors, AMP_TAU),
        acr: acr(&areas0, dims0),
        matches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub error: PoseError,
    pub thresholds: Vec<f64>,
    pub auc: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub point_matches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mma: Option<Mma>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub areas: Option<AreaReport>,
}

pub fn evaluate_points(matches: &[PointMatch], gt: &GroundTruth, params: &PoseParams) -> EvalReport {
    let mut r = EvalReport {
        point_matches: matches.len(),
        mma: Some(mma(matches, gt, &MMA_THRESHOLDS)),
        ..EvalReport::default()
    };
    if matches!(gt, GroundTruth::Pose { .. }) {
        let error = pose_error(matches, gt, params);
        r.pose = Some(PoseReport {
            error,
            thresholds: AUC_THRESHOLDS.to_vec(),
            auc: pose_auc(&[error.error_deg], &AUC_THRESHOLDS),
        });
    }
    r
}

impl EvalReport {
    /// Plain-text table of the report.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16}{:>12}\n", "metric", "value"));
        if let Some(a) = &self.areas {
            s.push_str(&format!("{:<16}{:>12}\n", "area matches", a.matches.len()));
            s.push_str(&format!("{:<16}{:>12.4}\n", "mean AOR", a.mean_aor));
            s.push_str(&format!("{:<16}{:>12.2}\n", "AMP@0.6", a.amp.percent));
            s.push_str(&format!("{:<16}{:>12.2}\n", "ACR", a.acr));
        }
        if let Some(m) = &self.mma {
            s.push_str(&format!("{:<16}{:>12}\n", "point matches", self.point_matches));
            for (t, p) in m.thresholds.iter().zip(&m.percent) {
                s.push_str(&format!("{:<16}{:>12.2}\n", format!("MMA@{t}"), p));
            }
            s.push_str(&format!("{:<16}{:>12}\n", "excluded", m.excluded));
        }
        if let Some(p) = &self.pose {
            s.push_str(&format!("{:<16}{:>12.3}\n", "pose error", p.error.error_deg));
            for (t, a) in p.thresholds.iter().zip(&p.auc) {
                s.push_str(&format!("{:<16}{:>12.2}\n", format!("AUC@{t}"), a));
            }
        }
        s
    }
}
