//! Deterministic k-means over 2-D points with elbow selection of `k`.

const MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares for `k = 1..=k_max`.
    pub wcss: Vec<f64>,
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Farthest-point seeding starting from the first point.
fn seed_centers(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let mut centers = vec![points[0]];
    let mut nearest: Vec<f64> = points.iter().map(|p| d2(*p, points[0])).collect();
    while centers.len() < k {
        let (idx, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let c = points[idx];
        centers.push(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(d2(*p, c));
        }
    }
    centers
}

/// Lloyd iterations from farthest-point seeds. Returns labels and WCSS.
pub fn kmeans(points: &[[f64; 2]], k: usize) -> (Vec<usize>, f64) {
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=n");
    let mut centers = seed_centers(points, k);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let best = centers
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (i, c)| {
                    let d = d2(*p, *c);
                    if d < best.1 {
                        (i, d)
                    } else {
                        best
                    }
                })
                .0;
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        for (l, p) in labels.iter().zip(points) {
            sums[*l][0] += p[0];
            sums[*l][1] += p[1];
            sums[*l][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    let wcss = labels
        .iter()
        .zip(points)
        .map(|(l, p)| d2(*p, centers[*l]))
        .sum();
    (labels, wcss)
}

/// Run k-means for `k = 1..=k_max` and pick `k` at the largest second
/// difference of the WCSS curve.
///
/// `k = 1` whenever there are at most two points or all points coincide.
/// Labels are renumbered in order of first appearance.
pub fn kmeans_elbow(points: &[[f64; 2]], k_max: usize) -> Clustering {
    assert!(!points.is_empty(), "kmeans_elbow needs at least one point");
    let k_max = k_max.clamp(1, points.len());
    let mut runs = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        runs.push(kmeans(points, k));
    }
    let wcss: Vec<f64> = runs.iter().map(|r| r.1).collect();

    let k = if points.len() <= 2 || k_max < 3 || wcss[0] <= 1e-12 {
        1
    } else {
        let mut best_k = 1;
        let mut best = f64::NEG_INFINITY;
        for k in 2..k_max {
            let second = wcss[k - 2] - 2.0 * wcss[k - 1] + wcss[k];
            if second > best {
                best = second;
                best_k = k;
            }
        }
        best_k
    };

    let raw = &runs[k - 1].0;
    let mut remap: Vec<Option<usize>> = vec![None; k];
    let mut next = 0;
    let labels = raw
        .iter()
        .map(|&l| {
            *remap[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    Clustering {
        k: next,
        labels,
        wcss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_one_cluster() {
        let pts = vec![[5.0, 5.0]; 6];
        let c = kmeans_elbow(&pts, 6);
        assert_eq!(c.k, 1);
        assert!(c.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn single_point() {
        let c = kmeans_elbow(&[[1.0, 2.0]], 1);
        assert_eq!(c.k, 1);
        assert_eq!(c.labels, vec![0]);
    }

    #[test]
    fn two_blobs() {
        // Spread 1, separation 100.
        let mut pts = Vec::new();
        for i in 0..6 {
            let t = i as f64 * 1.047;
            pts.push([t.cos(), t.sin()]);
            pts.push([100.0 + t.cos(), 100.0 + t.sin()]);
        }
        let c = kmeans_elbow(&pts, 6);
        assert_eq!(c.k, 2);
        for pair in c.labels.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        let first = c.labels[0];
        assert!(c.labels.iter().step_by(2).all(|&l| l == first));
    }

    #[test]
    fn wcss_non_increasing_on_blobs() {
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [(i * 37 % 101) as f64, (i * 53 % 97) as f64]).collect();
        let c = kmeans_elbow(&pts, 8);
        assert_eq!(c.wcss.len(), 8);
        assert!(c.wcss[7] <= c.wcss[0]);
    }
}
