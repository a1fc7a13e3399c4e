use facemark::autodiff::{Graph, Tensor};
use facemark::data::example::{crop_to_unit, map_to_unit, unit_to_crop, unit_to_map};
use facemark::data::{augment_with, parse_pts, write_pts, AugmentParams, FaceSample, SampleMeta, Split};
use facemark::geometry::{crop_box, ecdf, nmse, Affine, LandmarkSet, Point, Scheme};
use facemark::heatmap::{decode_argmax, encode_gaussian, encode_pwc, onehot, MapSize};
use facemark::image::Image;
use facemark::training::early_stop;
use proptest::prelude::*;

fn shape(n: usize) -> impl Strategy<Value = LandmarkSet> {
    prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), n).prop_filter_map("outer corners apart", move |pts| {
        let set = LandmarkSet::new(Scheme::Generic { count: n }, pts.into_iter().map(|(x, y)| Point::new(x, y)).collect()).ok()?;
        (set.iod() > 1.0).then_some(set)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nmse_is_similarity_invariant(a in shape(8), b in shape(8), angle in -3.0f64..3.0, scale in 0.2f64..5.0, tx in -50.0f64..50.0) {
        let t = Affine::rotate_scale_about(Point::new(tx, -tx), angle, scale);
        let base = nmse(&a, &b).unwrap();
        let moved = nmse(&a.transform(&t), &b.transform(&t)).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
        prop_assert_eq!(nmse(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn crop_box_bounds_landmarks(s in shape(6)) {
        let b = crop_box(&s).unwrap();
        let (dh, dv) = s.extent();
        prop_assert!((b.side - 1.3 * dh.max(dv)).abs() < 1e-9);
        for p in s.points() {
            prop_assert!((p.x - b.center.x).abs() <= dh + 1e-9 && (p.y - b.center.y).abs() <= dv + 1e-9);
        }
        let t = b.transform(64);
        let c = t.apply(b.center);
        prop_assert!((c.x - 32.0).abs() < 1e-9 && (c.y - 32.0).abs() < 1e-9);
    }

    #[test]
    fn crop_box_covers_symmetric_shapes(s in shape(4)) {
        let mirrored: Vec<Point> = s.points().iter().flat_map(|p| [*p, Point::new(-p.x, -p.y)]).collect();
        let set = LandmarkSet::new(Scheme::Generic { count: 8 }, mirrored).unwrap();
        let b = crop_box(&set).unwrap();
        for p in set.points() {
            prop_assert!(b.contains(*p));
        }
    }

    #[test]
    fn affine_inverse_roundtrip(angle in -3.0f64..3.0, scale in 0.1f64..10.0, x in -100.0f64..100.0, y in -100.0f64..100.0) {
        let t = Affine::rotate_scale_about(Point::new(3.0, -7.0), angle, scale);
        let p = Point::new(x, y);
        let q = t.inverse().unwrap().apply(t.apply(p));
        prop_assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
    }

    #[test]
    fn ecdf_is_a_staircase_to_one(values in prop::collection::vec(0.0f64..1.0, 1..50)) {
        let c = ecdf(&values).unwrap();
        prop_assert_eq!(c.last().unwrap().1, 1.0);
        for w in c.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
    }

    #[test]
    fn pts_roundtrip_at_six_decimals(s in shape(5)) {
        let back = parse_pts(&write_pts(&s)).unwrap();
        for (p, q) in s.points().iter().zip(back.points()) {
            prop_assert!((p.x - q.x).abs() <= 5e-7 && (p.y - q.y).abs() <= 5e-7);
        }
    }

    #[test]
    fn coordinate_frames_roundtrip(c in -10.0f64..80.0) {
        prop_assert!((unit_to_crop(crop_to_unit(c, 64), 64) - c).abs() < 1e-12);
        let m = unit_to_map(crop_to_unit(c, 64), 32);
        prop_assert!((unit_to_crop(map_to_unit(m, 32), 64) - c).abs() < 1e-12);
    }

    #[test]
    fn codecs_recover_rounded_positions(pts in prop::collection::vec((2.0f64..29.0, 2.0f64..29.0), 4)) {
        let set = LandmarkSet::new(Scheme::Generic { count: 4 }, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap();
        let size = MapSize::square(32);
        let g = decode_argmax(&encode_gaussian(&set, size, 1.0).unwrap()).unwrap();
        for (p, q) in set.points().iter().zip(g.points()) {
            prop_assert_eq!((p.x.round(), p.y.round()), (q.x, q.y));
        }
        let labels = encode_pwc(&set, size, 0);
        let distinct = {
            let mut r: Vec<(i64, i64)> = set.points().iter().map(|p| (p.x.round() as i64, p.y.round() as i64)).collect();
            r.sort();
            r.dedup();
            r.len() == 4
        };
        if distinct {
            let d = decode_argmax(&onehot(&labels, 5).unwrap()).unwrap();
            for (p, q) in set.points().iter().zip(d.points()) {
                prop_assert_eq!((p.x.round(), p.y.round()), (q.x, q.y));
            }
        }
    }

    #[test]
    fn augmentation_is_a_similarity(angle in -30.0f64..30.0, scale in 0.6f64..1.0) {
        let img = Image::from_fn(40, 40, |x, y, _| ((x + y) % 7) as f32 / 7.0);
        let pts = vec![Point::new(10.0, 12.0), Point::new(30.0, 11.0), Point::new(20.0, 22.0), Point::new(21.0, 31.0)];
        let set = LandmarkSet::new(Scheme::Generic { count: 4 }, pts).unwrap();
        let meta = SampleMeta { dataset: "t".into(), split: Split::Train, id: "a".into(), occluded: false };
        let s = FaceSample::new(img, set.clone(), meta).unwrap();
        let a = augment_with(&s, AugmentParams { angle_deg: angle, scale }).unwrap();
        let (p, q) = (a.landmarks.points(), set.points());
        let ratio = p[0].dist(p[2]) / q[0].dist(q[2]);
        prop_assert!((ratio - scale).abs() < 1e-9);
        prop_assert!((p[1].dist(p[3]) / q[1].dist(q[3]) - scale).abs() < 1e-9);
        prop_assert_eq!(a.crop_box().unwrap(), s.crop_box().unwrap());
    }

    #[test]
    fn softmaxes_are_normalized(data in prop::collection::vec(-20.0f64..20.0, 3 * 2 * 3 * 4)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([3, 2, 3, 4], data).unwrap());
        let s = g.spatial_softmax(x).unwrap();
        for plane in g.value(s).data().chunks(12) {
            prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = g.channel_softmax(x).unwrap();
        let v = g.value(c).data();
        for p in 0..24 {
            prop_assert!((v[p] + v[24 + p] + v[48 + p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stop_counts_trailing_non_improvements(prefix in prop::collection::vec(0.0f64..10.0, 0..20), patience in 1usize..12, extra in 0usize..12) {
        let best = prefix.iter().copied().fold(f64::INFINITY, f64::min).min(5.0) - 1.0;
        let mut h = prefix.clone();
        h.push(best);
        h.extend(std::iter::repeat_n(best + 0.5, extra));
        prop_assert_eq!(early_stop(&h, patience), extra >= patience);
    }
}
