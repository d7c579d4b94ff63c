use grasp_core::geometry::{
    angle_distance, jaccard, polygon_to_rect, rect_to_polygon, GraspRect, Point, Similarity,
};
use proptest::prelude::*;

/// Inclusive x-range of grid samples inside `g` on the horizontal line `y`.
fn row_interval(g: &GraspRect, y: f64) -> Option<(f64, f64)> {
    let (s, c) = g.theta.to_radians().sin_cos();
    let dy = y - g.y;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // |(p - c) . u| <= w/2 and |(p - c) . n| <= h/2 with u = (c, s), n = (-s, c)
    for (ax, rest, half) in [(c, s * dy, g.w / 2.0), (-s, c * dy, g.h / 2.0)] {
        if ax.abs() < 1e-12 {
            if rest.abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - rest) / ax;
        let b = (half - rest) / ax;
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (lo <= hi).then_some((lo + g.x, hi + g.x))
}

fn samples_in(lo: f64, hi: f64, step: f64) -> f64 {
    // sample points sit at (k + 0.5) * step
    let first = (lo / step - 0.5).ceil();
    let last = (hi / step - 0.5).floor();
    (last - first + 1.0).max(0.0)
}

/// Brute-force IoU by counting sample points on a regular grid.
fn raster_iou(a: &GraspRect, b: &GraspRect, step: f64) -> f64 {
    let ys = |g: &GraspRect| {
        let r = 0.5 * (g.w.hypot(g.h));
        (g.y - r, g.y + r)
    };
    let (a0, a1) = ys(a);
    let (b0, b1) = ys(b);
    let (y0, y1) = (a0.min(b0), a1.max(b1));
    let (mut na, mut nb, mut ni) = (0.0, 0.0, 0.0);
    let mut k = (y0 / step - 0.5).floor();
    while (k + 0.5) * step <= y1 {
        let y = (k + 0.5) * step;
        let ia = row_interval(a, y);
        let ib = row_interval(b, y);
        if let Some((l, h)) = ia {
            na += samples_in(l, h, step);
        }
        if let Some((l, h)) = ib {
            nb += samples_in(l, h, step);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (ia, ib) {
            ni += samples_in(la.max(lb), ha.min(hb), step);
        }
        k += 1.0;
    }
    let union = na + nb - ni;
    if union == 0.0 {
        0.0
    } else {
        ni / union
    }
}

fn rect() -> impl Strategy<Value = GraspRect> {
    (0.0..200.0, 0.0..200.0, 0.0..180.0, 5.0..100.0, 5.0..100.0)
        .prop_map(|(x, y, t, h, w)| GraspRect::new(x, y, t, h, w).unwrap())
}

fn close(a: Point, b: Point, tol: f64) -> bool {
    (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jaccard_agrees_with_rasterization(a in rect(), dx in -40.0..40.0, dy in -40.0..40.0, b in rect()) {
        let b = GraspRect::new(a.x + dx, a.y + dy, b.theta, b.h, b.w).unwrap();
        let exact = jaccard(&a, &b);
        let approx = raster_iou(&a, &b, 0.05);
        prop_assert!((exact - approx).abs() < 1e-2, "clip {exact} vs raster {approx}");
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in rect(), b in rect()) {
        let (ab, ba) = (jaccard(&a, &b), jaccard(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((jaccard(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn polygon_round_trip(g in rect()) {
        let p = rect_to_polygon(&g);
        let v: [Point; 4] = p.vertices().try_into().unwrap();
        let back = polygon_to_rect(&v).unwrap();
        prop_assert!((back.x - g.x).abs() < 1e-9 && (back.y - g.y).abs() < 1e-9);
        prop_assert!((back.h - g.h).abs() < 1e-9 && (back.w - g.w).abs() < 1e-9);
        prop_assert!(angle_distance(back.theta, g.theta) < 1e-9);
    }

    #[test]
    fn transform_commutes_with_corners(g in rect(), rot in -720.0..720.0, px in 0.0..200.0, py in 0.0..200.0,
                                       tx in -50.0..50.0, ty in -50.0..50.0, scale in 0.1..3.0) {
        let t = Similarity::new(rot, Point::new(px, py), Point::new(tx, ty), scale);
        let moved = t.apply_rect(&g).corners();
        let mapped: Vec<Point> = g.corners().iter().map(|&p| t.apply(p)).collect();
        // same vertex set; the labelling can shift by two when theta wraps past 180
        for m in &mapped {
            prop_assert!(moved.iter().any(|v| close(*v, *m, 1e-6)), "{m:?} not among {moved:?}");
        }
    }

    #[test]
    fn transform_inverse_restores(g in rect(), rot in -360.0..360.0, tx in -50.0..50.0, ty in -50.0..50.0, scale in 0.2..5.0) {
        let t = Similarity::new(rot, Point::new(100.0, 80.0), Point::new(tx, ty), scale);
        let back = t.inverse().apply_rect(&t.apply_rect(&g));
        prop_assert!((back.x - g.x).abs() < 1e-6 && (back.y - g.y).abs() < 1e-6);
        prop_assert!((back.h - g.h).abs() < 1e-6 && (back.w - g.w).abs() < 1e-6);
        prop_assert!(angle_distance(back.theta, g.theta) < 1e-6);
    }
}

#[test]
fn raster_oracle_sanity() {
    let a = GraspRect::new(0.0, 0.0, 0.0, 10.0, 10.0).unwrap();
    let b = GraspRect::new(5.0, 0.0, 0.0, 10.0, 10.0).unwrap();
    assert!((raster_iou(&a, &b, 0.05) - 1.0 / 3.0).abs() < 1e-3);
    let far = GraspRect::new(100.0, 0.0, 0.0, 10.0, 10.0).unwrap();
    assert_eq!(raster_iou(&a, &far, 0.05), 0.0);
}
