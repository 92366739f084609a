use lymphdet_core::annotation::{compile_maps, AnnotationKind, AnnotationRecord, AnnotationSet};
use lymphdet_core::eval::match_points;
use lymphdet_core::geometry::{connected_components, disk_dilate};
use lymphdet_core::model::ProbabilityMap;
use lymphdet_core::postprocess::{detect, threshold_mask, PostprocessConfig};
use lymphdet_core::raster::{reflect_index, BinaryMask};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::from_vec(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn reflect_index_stays_in_range_and_is_symmetric(i in -1000i64..1000, n in 1usize..50) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        if (0..n as i64).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
        if n > 1 {
            prop_assert_eq!(reflect_index(-i, n), reflect_index(i, n));
        }
    }

    #[test]
    fn components_partition_the_foreground(mask in mask_strategy()) {
        let regions = connected_components(&mask);
        let mut seen: Vec<(usize, usize)> = regions.iter().flat_map(|r| r.pixels.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, mask.true_pixels());
        for r in &regions {
            prop_assert!(r.eccentricity >= 0.0 && r.eccentricity < 1.0);
            prop_assert_eq!(r.area, r.pixels.len());
        }
        // no two regions touch
        for (a, ra) in regions.iter().enumerate() {
            for rb in &regions[a + 1..] {
                for p in &ra.pixels {
                    for q in &rb.pixels {
                        prop_assert!(p.0.abs_diff(q.0) > 1 || p.1.abs_diff(q.1) > 1);
                    }
                }
            }
        }
    }

    #[test]
    fn dilation_grows_with_radius(r in 0usize..24, c in 0usize..24, a in 0.0f64..8.0, extra in 0.0f64..4.0) {
        let small = disk_dilate(&[(r, c)], a, 24, 24).unwrap();
        let large = disk_dilate(&[(r, c)], a + extra, 24, 24).unwrap();
        prop_assert!(small.as_slice().iter().zip(large.as_slice()).all(|(&s, &l)| !s || l));
        prop_assert!(small.get(r, c));
    }

    #[test]
    fn negative_annotations_take_precedence(
        pp in proptest::collection::vec((0usize..48, 0usize..48), 0..5),
        np in proptest::collection::vec((0usize..48, 0usize..48), 0..5),
    ) {
        let mut set = AnnotationSet::new("f");
        for (&(r, c), kind) in pp.iter().map(|p| (p, AnnotationKind::PositivePoint)).chain(np.iter().map(|p| (p, AnnotationKind::NegativePoint))) {
            set.push(&AnnotationRecord { fov_id: "f".into(), kind, points: vec![[r, c]], timestamp: None, author: None }).unwrap();
        }
        let (labels, weights) = compile_maps(&set, 48, 48, 11.0).unwrap();
        let negative = disk_dilate(&np, 16.0, 48, 48).unwrap();
        for r in 0..48 {
            for c in 0..48 {
                let (l, w) = (labels.get(r, c), weights.get(r, c));
                prop_assert_eq!(l == 0, w == 0.0);
                if negative.get(r, c) {
                    prop_assert_eq!((l, w), (1, 1.0));
                }
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_pixels(
        values in proptest::collection::vec(0.0f32..1.0, 64),
        t1 in 0.01f32..0.99,
        dt in 0.0f32..0.5,
    ) {
        let map = ProbabilityMap::new(8, 8, values).unwrap();
        let t2 = (t1 + dt).min(0.99);
        let low = threshold_mask(&map, t1);
        let high = threshold_mask(&map, t2);
        prop_assert!(high.as_slice().iter().zip(low.as_slice()).all(|(&h, &l)| !h || l));
    }

    #[test]
    fn detections_are_sorted_and_within_bounds(values in proptest::collection::vec(0.0f32..1.0, 256)) {
        let map = ProbabilityMap::new(16, 16, values).unwrap();
        let config = PostprocessConfig { min_area: 1.0, max_area: 256.0, ..PostprocessConfig::default() };
        let d = detect(&map, &config).unwrap();
        for w in d.windows(2) {
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
        for x in &d {
            prop_assert!(x.confidence >= 0.5 && x.confidence <= 1.0);
            prop_assert!(x.eccentricity <= 0.8);
        }
    }

    #[test]
    fn matching_is_one_to_one(
        pred in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 0..10),
        truth in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 0..10),
    ) {
        let m = match_points(&pred, &truth, 10.0);
        prop_assert_eq!(m.true_positives + m.false_positives, pred.len());
        prop_assert_eq!(m.true_positives + m.false_negatives, truth.len());
        let swapped = match_points(&truth, &pred, 10.0);
        prop_assert_eq!(swapped.true_positives, m.true_positives);
    }
}
