//! Two-view epipolar geometry: fundamental and essential matrices, robust
//! estimation and relative pose recovery.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Point = [f64; 2];

/// Translate to the centroid and scale to mean distance sqrt(2).
fn normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: Point) -> Vector3<f64> {
    t * Vector3::new(p[0], p[1], 1.0)
}

/// Least-squares solution of `x1^T F x0 = 0` before any rank constraint.
fn linear_solve(p0: &[Point], p1: &[Point]) -> Option<Matrix3<f64>> {
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in p0.iter().zip(p1) {
        let (x0, y0, x1, y1) = (a[0], a[1], b[0], b[1]);
        let row = SMatrix::<f64, 1, 9>::from_row_slice(&[x1 * x0, x1 * y0, x1, y1 * x0, y1 * y0, y1, x0, y0, 1.0]);
        ata += row.transpose() * row;
    }
    let eig = SymmetricEigen::new(ata);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(idx);
    if !v.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some(Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]))
}

/// Normalized 8-point fundamental matrix with `x1^T F x0 = 0`, rank 2,
/// unit Frobenius norm. Needs at least 8 correspondences.
pub fn fundamental_8pt(p0: &[Point], p1: &[Point]) -> Option<Matrix3<f64>> {
    if p0.len() < 8 || p0.len() != p1.len() {
        return None;
    }
    let (t0, t1) = (normalizer(p0), normalizer(p1));
    let n0: Vec<Point> = p0.iter().map(|&p| apply(&t0, p)).map(|v| [v[0], v[1]]).collect();
    let n1: Vec<Point> = p1.iter().map(|&p| apply(&t1, p)).map(|v| [v[0], v[1]]).collect();
    let f = linear_solve(&n0, &n1)?;
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    s[2] = 0.0;
    let f = u * Matrix3::from_diagonal(&s) * vt;
    let f = t1.transpose() * f * t0;
    let norm = f.norm();
    (norm > 1e-15 && norm.is_finite()).then(|| f / norm)
}

/// First-order geometric (Sampson) distance of a correspondence, in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, a: Point, b: Point) -> f64 {
    let x0 = Vector3::new(a[0], a[1], 1.0);
    let x1 = Vector3::new(b[0], b[1], 1.0);
    let fx0 = f * x0;
    let ftx1 = f.transpose() * x1;
    let num = x1.dot(&fx0);
    let den = fx0[0].powi(2) + fx0[1].powi(2) + ftx1[0].powi(2) + ftx1[1].powi(2);
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// Robust model fit result.
#[derive(Debug, Clone)]
pub struct Consensus {
    pub model: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl Consensus {
    pub fn count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn consensus<F>(p0: &[Point], p1: &[Point], thresh: f64, iters: usize, seed: u64, fit: F) -> Option<Consensus>
where
    F: Fn(&[Point], &[Point]) -> Option<Matrix3<f64>>,
{
    let n = p0.len();
    if n < 8 || n != p1.len() {
        return None;
    }
    let t2 = thresh * thresh;
    // Truncated squared error: among models with similar support, prefer the
    // one that fits its inliers tightly.
    let evaluate = |m: Matrix3<f64>| -> (f64, Consensus) {
        let mut cost = 0.0;
        let inliers = p0
            .iter()
            .zip(p1)
            .map(|(&a, &b)| {
                let d = sampson_distance(&m, a, b);
                cost += (d * d).min(t2);
                d <= thresh
            })
            .collect();
        (cost, Consensus { model: m, inliers })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Consensus)> = None;
    for _ in 0..iters {
        let idx = sample(&mut rng, n, 8);
        let s0: Vec<Point> = idx.iter().map(|i| p0[i]).collect();
        let s1: Vec<Point> = idx.iter().map(|i| p1[i]).collect();
        let Some(m) = fit(&s0, &s1) else { continue };
        let cand = evaluate(m);
        if best.as_ref().is_none_or(|b| cand.0 < b.0) {
            best = Some(cand);
        }
    }
    let (best_cost, best) = best?;
    // Refit on all inliers and keep it if it does at least as well.
    let (r0, r1): (Vec<Point>, Vec<Point>) = p0
        .iter()
        .zip(p1)
        .zip(&best.inliers)
        .filter(|(_, &keep)| keep)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    if let Some(m) = fit(&r0, &r1) {
        let (cost, refit) = evaluate(m);
        if cost <= best_cost {
            return Some(refit);
        }
    }
    Some(best)
}

/// Fundamental matrix by random-sampling consensus over 8-point minimal
/// fits; inliers have Sampson distance at most `thresh` pixels.
pub fn ransac_fundamental(p0: &[Point], p1: &[Point], thresh: f64, iters: usize, seed: u64) -> Option<Consensus> {
    consensus(p0, p1, thresh, iters, seed, fundamental_8pt)
}

/// Project onto the essential manifold (singular values 1, 1, 0).
fn to_essential(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt)
}

/// Essential matrix from calibrated (normalized) coordinates. `thresh` is in
/// normalized units.
pub fn ransac_essential(n0: &[Point], n1: &[Point], thresh: f64, iters: usize, seed: u64) -> Option<Consensus> {
    consensus(n0, n1, thresh, iters, seed, |a, b| {
        fundamental_8pt(a, b).and_then(|f| to_essential(&f))
    })
}

/// Triangulate in the first camera frame; returns depths in both cameras.
fn depths(r: &Matrix3<f64>, t: &Vector3<f64>, a: Point, b: Point) -> (f64, f64) {
    // Solve z0 * R x0 + t = z1 * x1 in least squares.
    let x0 = Vector3::new(a[0], a[1], 1.0);
    let x1 = Vector3::new(b[0], b[1], 1.0);
    let rx0 = r * x0;
    // [rx0, -x1] [z0, z1]^T = -t
    let a11 = rx0.dot(&rx0);
    let a12 = -rx0.dot(&x1);
    let a22 = x1.dot(&x1);
    let b1 = -rx0.dot(t);
    let b2 = x1.dot(t);
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
}

/// Relative pose `(R, t)` with `x1 ~ R x0 + t`, chosen among the four
/// decompositions of `e` by the number of points in front of both cameras.
pub fn decompose_essential(e: &Matrix3<f64>, n0: &[Point], n1: &[Point]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let candidates = [
        (u * w * vt, t),
        (u * w * vt, -t),
        (u * w.transpose() * vt, t),
        (u * w.transpose() * vt, -t),
    ];
    candidates
        .into_iter()
        .map(|(r, t)| {
            let front = n0
                .iter()
                .zip(n1)
                .filter(|(&a, &b)| {
                    let (z0, z1) = depths(&r, &t, a, b);
                    z0 > 0.0 && z1 > 0.0
                })
                .count();
            (front, r, t)
        })
        .max_by_key(|c| c.0)
        .filter(|c| c.0 > 0)
        .map(|(_, r, t)| (r, t))
}

/// Rotation angle of `a^T b` in degrees.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between translation directions in degrees, sign-agnostic.
pub fn translation_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-15 || nb < 1e-15 {
        return 180.0;
    }
    let e = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees();
    e.min(180.0 - e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::Rng;

    pub(crate) fn two_views(seed: u64, n: usize) -> (Vec<Point>, Vec<Point>, Matrix3<f64>, Vector3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = *Rotation3::from_euler_angles(0.05, -0.1, 0.03).matrix();
        let t = Vector3::new(0.6, 0.1, 0.05);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        while a.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0));
            let y = r * x + t;
            if y[2] <= 0.1 {
                continue;
            }
            a.push([x[0] / x[2], x[1] / x[2]]);
            b.push([y[0] / y[2], y[1] / y[2]]);
        }
        (a, b, r, t)
    }

    #[test]
    fn eight_point_recovers_epipolar_constraint() {
        let (a, b, _, _) = two_views(1, 40);
        let f = fundamental_8pt(&a, &b).unwrap();
        for (&p, &q) in a.iter().zip(&b) {
            assert!(sampson_distance(&f, p, q) < 1e-8);
        }
        assert!(f.determinant().abs() < 1e-10);
        assert!(fundamental_8pt(&a[..7], &b[..7]).is_none());
    }

    #[test]
    fn essential_pose_recovery() {
        let (a, b, r, t) = two_views(2, 100);
        let c = ransac_essential(&a, &b, 1e-4, 200, 0).unwrap();
        assert_eq!(c.count(), 100);
        let (re, te) = decompose_essential(&c.model, &a, &b).unwrap();
        assert!(rotation_error_deg(&re, &r) < 1e-4);
        assert!(translation_error_deg(&te, &t) < 1e-4);
    }

    #[test]
    fn ransac_rejects_outliers() {
        // 140 inliers plus 60 uniform outliers (30%), pooled over 10 scenes.
        let px = |p: Point| [500.0 * p[0] + 320.0, 500.0 * p[1] + 240.0];
        let (mut kept_in, mut kept_out) = (0, 0);
        for seed in 0..10 {
            let (a, b, _, _) = two_views(seed, 140);
            let mut p0: Vec<Point> = a.iter().map(|&p| px(p)).collect();
            let mut p1: Vec<Point> = b.iter().map(|&p| px(p)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..60 {
                p0.push([rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]);
                p1.push([rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]);
            }
            let c = ransac_fundamental(&p0, &p1, 3.5, 1000, 7).unwrap();
            kept_in += c.inliers[..140].iter().filter(|&&x| x).count();
            kept_out += c.inliers[140..].iter().filter(|&&x| x).count();
        }
        assert!(kept_in as f64 >= 0.99 * 1400.0, "{kept_in}");
        assert!(kept_out as f64 <= 0.05 * 600.0, "{kept_out}");
    }

    #[test]
    fn angle_errors() {
        let i = Matrix3::identity();
        let r = *Rotation3::from_euler_angles(0.0, 0.0, 0.1).matrix();
        assert!((rotation_error_deg(&i, &r) - 0.1f64.to_degrees()).abs() < 1e-9);
        let t = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(translation_error_deg(&t, &-t), 0.0);
        assert!((translation_error_deg(&t, &Vector3::new(0.0, 1.0, 0.0)) - 90.0).abs() < 1e-9);
    }
}
