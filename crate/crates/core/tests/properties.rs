use areamatch::eval::{acr, amp, aor, mma, pose_auc, GroundTruth};
use areamatch::geometry::{expand_to_aspect, expand_to_level, fuse, iou, Area, ImageDims, LevelThresholds};
use areamatch::graph::{build_initial_graph, complete_graph, GraphParams, NodeOrigin};
use areamatch::ingest::{preprocess, ScreeningParams};
use areamatch::pipeline::{dedupe, geometric_filter, CropTransform, PointMatch, Provenance};
use nalgebra::Matrix3;
use proptest::prelude::*;

const W: u32 = 320;
const H: u32 = 240;

fn dims() -> ImageDims {
    ImageDims::new(W, H).unwrap()
}

fn area() -> impl Strategy<Value = Area> {
    (0..W as i32 - 1, 0..H as i32 - 1, 1..W as i32, 1..H as i32).prop_map(|(x, y, w, h)| {
        let x1 = (x + w).min(W as i32);
        let y1 = (y + h).min(H as i32);
        Area::new(x, y, x1.max(x + 1), y1.max(y + 1)).unwrap()
    })
}

fn point_match() -> impl Strategy<Value = PointMatch> {
    (0.0..W as f64, 0.0..H as f64, -20.0..20.0f64, -20.0..20.0f64, 0.0..1.0f64).prop_map(|(x, y, dx, dy, s)| PointMatch {
        p0: [x, y],
        p1: [x + dx, y + dy],
        score: s,
        provenance: Provenance::Global,
    })
}

fn translation(dx: f64, dy: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
}

fn homography_gt(h: Matrix3<f64>) -> GroundTruth {
    GroundTruth::Homography {
        h: areamatch::eval::from_matrix(&h),
        dims0: dims(),
        dims1: dims(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_symmetric_and_bounded(a in area(), b in area()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn fuse_contains_both(a in area(), b in area()) {
        let f = fuse(&a, &b);
        prop_assert!(f.contains(&a) && f.contains(&b));
        prop_assert!(f.size() >= a.size().max(b.size()));
    }

    #[test]
    fn expand_to_aspect_contains_input(a in area(), r in 0.5..2.0f64) {
        if let Ok(e) = expand_to_aspect(&a, r, dims()) {
            prop_assert!(e.contains(&a));
            prop_assert!(e.is_inside(dims()));
        }
    }

    #[test]
    fn expand_to_level_reaches_threshold(a in area(), level in 0usize..3) {
        let t = LevelThresholds::new(vec![100, 400, 1600, 6400]).unwrap();
        if let Ok(e) = expand_to_level(&a, level, &t, dims()) {
            prop_assert!(e.size() >= t.threshold(level).unwrap());
            prop_assert!(e.is_inside(dims()));
            prop_assert!(e.size() >= a.size());
        }
    }

    #[test]
    fn crop_transform_round_trip(x0 in 0.0..200.0f64, y0 in 0.0..200.0f64, sx in 0.1..4.0f64, sy in 0.1..4.0f64, u in 0.0..500.0f64, v in 0.0..500.0f64) {
        let t = CropTransform { x0, y0, sx, sy };
        let back = t.to_local(t.to_full([u, v]));
        prop_assert!((back[0] - u).abs() < 1e-9 && (back[1] - v).abs() < 1e-9);
    }

    #[test]
    fn dedupe_and_filter_only_remove(ms in prop::collection::vec(point_match(), 0..60), seed in 0u64..100) {
        let d = dedupe(ms.clone());
        prop_assert!(d.len() <= ms.len());
        prop_assert!(d.iter().all(|m| ms.contains(m)));
        let (f, _) = geometric_filter(d.clone(), 3.5, 200, seed);
        prop_assert!(f.iter().all(|m| d.contains(m)));
    }

    #[test]
    fn aor_invariant_to_common_translation(a in area(), dx in -40i32..40, dy in -40i32..40) {
        let h = translation(dx as f64, dy as f64);
        let b = a.translated(dx, dy);
        let v = aor(&a, &b, &h, dims());
        prop_assert!((0.0..=1.0).contains(&v));
        if b.is_inside(dims()) {
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn area_metrics_ignore_order(aors in prop::collection::vec(0.0..1.0f64, 0..30), areas in prop::collection::vec(area(), 0..10)) {
        let mut ra = aors.clone();
        ra.reverse();
        prop_assert_eq!(amp(&aors, 0.6), amp(&ra, 0.6));
        let mut rb = areas.clone();
        rb.reverse();
        prop_assert!((acr(&areas, dims()) - acr(&rb, dims())).abs() < 1e-9);
        let c = acr(&areas, dims());
        prop_assert!((0.0..=100.0).contains(&c));
    }

    #[test]
    fn mma_ignores_order_and_grows_with_threshold(ms in prop::collection::vec(point_match(), 1..40)) {
        let gt = homography_gt(translation(3.0, -2.0));
        let a = mma(&ms, &gt, &[1.0, 3.0, 5.0, 10.0]);
        let mut r = ms.clone();
        r.reverse();
        let b = mma(&r, &gt, &[1.0, 3.0, 5.0, 10.0]);
        prop_assert_eq!(&a.percent, &b.percent);
        prop_assert!(a.percent.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn pose_auc_bounded_and_monotone(errs in prop::collection::vec(0.0..180.0f64, 1..50)) {
        let auc = pose_auc(&errs, &[5.0, 10.0, 20.0]);
        prop_assert!(auc.iter().all(|v| (0.0..=100.0).contains(v)));
        prop_assert!(auc.windows(2).all(|w| w[0] <= w[1] + 1e-9));
    }

    #[test]
    fn completed_graph_has_parents(areas in prop::collection::vec(area(), 1..12)) {
        let params = GraphParams {
            thresholds: LevelThresholds::new(vec![100, 400, 1600, 6400, 25600, 76800]).unwrap(),
            ..GraphParams::default()
        };
        let c = preprocess(&areas, ScreeningParams { min_size: 100, ..ScreeningParams::default() }, dims());
        let g = complete_graph(build_initial_graph(&c, &params), &params);
        let top = g.top_level();
        for n in g.nodes() {
            prop_assert!(n.area.is_inside(dims()));
            if n.level < top && n.origin != NodeOrigin::Fallback {
                let ps = g.parents(n.id).unwrap();
                prop_assert!(
                    ps.iter().any(|&p| g.nodes()[p].level > n.level),
                    "node {} at level {} has no higher parent",
                    n.id,
                    n.level
                );
                for &p in ps {
                    prop_assert!(g.nodes()[p].area.size() >= n.area.size() / 2);
                }
            }
        }
    }
}
