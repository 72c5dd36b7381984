//! Property tests over geometry, box coding, sectorization, AP and score
//! rectification.

use std::f64::consts::PI;

use proptest::prelude::*;

use polarbev::eval::{average_precision, average_precision_heading, Record};
use polarbev::geometry::{cart_to_polar, polar_to_cart, rotated_iou_bev, wrap_angle, Box3D, BoxBev, CartPoint};
use polarbev::head::{decode_box, encode_box, rectify_scores};
use polarbev::view::GridView;
use polarbev::voxelize::{sectorize, GridConfig, GridSpec, PointCloud};

fn bev() -> impl Strategy<Value = BoxBev> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.3..6.0f64, 0.3..6.0f64, -PI..PI).prop_map(|(x, y, w, h, t)| BoxBev::new(x, y, w, h, t).unwrap())
}

fn records() -> impl Strategy<Value = Vec<Record>> {
    prop::collection::vec((0u32..1000, any::<bool>(), 0.0..=1.0f64), 0..12)
        .prop_map(|v| v.into_iter().map(|(s, tp, h)| Record { score: s as f64 / 1000.0, tp, h: if tp { h } else { 0.0 } }).collect())
}

fn n_tp(r: &[Record]) -> usize {
    r.iter().filter(|x| x.tp).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bev(), b in bev()) {
        let (ab, ba) = (rotated_iou_bev(&a, &b), rotated_iou_bev(&b, &a));
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((rotated_iou_bev(&a, &a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn iou_ignores_a_shared_rigid_shift(a in bev(), b in bev(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let mv = |q: &BoxBev| BoxBev::new(q.cx + dx, q.cy + dy, q.w, q.h, q.theta).unwrap();
        prop_assert!((rotated_iou_bev(&a, &b) - rotated_iou_bev(&mv(&a), &mv(&b))).abs() <= 1e-9);
    }

    #[test]
    fn wrap_angle_lands_in_half_open_circle(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI - 1e-12 && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn polar_round_trip(x in -80.0..80.0f64, y in -80.0..80.0f64) {
        let c = polar_to_cart(cart_to_polar(CartPoint::new(x, y)));
        prop_assert!((c.x - x).abs() <= 1e-9 && (c.y - y).abs() <= 1e-9);
    }

    #[test]
    fn box_coding_round_trips(r in 1.0..38.0f64, a in -PI..PI, w in 0.5..3.0f64, l in 0.5..6.0f64, h in 0.5..3.0f64, theta in -PI..PI, cz in -1.0..2.0f64) {
        let spec = GridSpec::new(GridConfig::default()).unwrap();
        let view = GridView::full(&spec);
        let b = Box3D { cx: r * a.cos(), cy: r * a.sin(), cz, w, l, h, theta };
        let (pix, reg) = encode_box(&view, &b).unwrap();
        let d = decode_box(&view, pix, &reg);
        for (x, y) in d.to_array().iter().take(6).zip(b.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9, "{:?} vs {:?}", d, b);
        }
        prop_assert!(wrap_angle(d.theta - b.theta).abs() <= 1e-9);
    }

    #[test]
    fn sectors_partition_the_sweep(pts in prop::collection::vec((-40.0..40.0f64, -40.0..40.0f64, -1.0..3.0f64), 0..200), n in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8])) {
        let spec = GridSpec::new(GridConfig::default()).unwrap();
        let cloud = PointCloud::from_xyzi(pts.iter().map(|&(x, y, z)| [x, y, z, 0.5]));
        let sectors = sectorize(&cloud, &spec, n).unwrap();
        prop_assert_eq!(sectors.len(), n);
        let key = |c: &PointCloud| {
            let mut v: Vec<[u64; 3]> = c.points.iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
            v.sort_unstable();
            v
        };
        let union = PointCloud { points: sectors.iter().flat_map(|s| s.points.clone()).collect() };
        prop_assert_eq!(key(&union), key(&cloud));
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(recs in records(), extra in 0usize..3, k in 0.5..4.0f64) {
        let n_gt = n_tp(&recs) + extra;
        let mapped: Vec<Record> = recs.iter().map(|r| Record { score: (k * r.score).exp() - 3.0, ..*r }).collect();
        prop_assert_eq!(average_precision(&recs, n_gt), average_precision(&mapped, n_gt));
        prop_assert_eq!(average_precision_heading(&recs, n_gt), average_precision_heading(&mapped, n_gt));
    }

    #[test]
    fn heading_ap_is_bounded_by_ap(recs in records(), extra in 0usize..3) {
        let n_gt = n_tp(&recs) + extra;
        let (ap, aph) = (average_precision(&recs, n_gt), average_precision_heading(&recs, n_gt));
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!(aph >= 0.0 && aph <= ap + 1e-12, "aph {} ap {}", aph, ap);
    }

    #[test]
    fn dropping_a_true_positive_never_raises_ap(recs in records(), extra in 0usize..3, pick in any::<prop::sample::Index>()) {
        let n_gt = n_tp(&recs) + extra;
        let tps: Vec<usize> = (0..recs.len()).filter(|&i| recs[i].tp).collect();
        prop_assume!(!tps.is_empty());
        let drop = tps[pick.index(tps.len())];
        let fewer: Vec<Record> = recs.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, r)| *r).collect();
        prop_assert!(average_precision(&fewer, n_gt) <= average_precision(&recs, n_gt) + 1e-12);
    }

    #[test]
    fn rectification_is_monotone(s1 in 0.0..=1.0f64, s2 in 0.0..=1.0f64, i1 in 0.0..=1.0f64, i2 in 0.0..=1.0f64, alpha in 0.1..3.0f64) {
        let (lo_s, hi_s) = (s1.min(s2), s1.max(s2));
        let (lo_i, hi_i) = (i1.min(i2), i1.max(i2));
        prop_assert!(rectify_scores(lo_s, i1, alpha) <= rectify_scores(hi_s, i1, alpha));
        prop_assert!(rectify_scores(s1, lo_i, alpha) <= rectify_scores(s1, hi_i, alpha));
        let r = rectify_scores(s1, i1, alpha);
        prop_assert!((0.0..=s1).contains(&r));
    }
}
