use chrono::NaiveDate;
use glacio::dataset::frame::parse_timestamp;
use glacio::dataset::{
    class_frequencies, decode_mask, encode_mask, make_split, ClassLegend, FrameMeta, FrameSource, SegmentationMask,
    Selector, SplitMode, SplitSpec, IGNORE,
};
use glacio::phenology::{detect_events, frozen_fraction, median_smooth, ClutterPolicy, FrozenAreaSeries, PhenologyConfig};
use glacio::training::{compute_class_weights, poly_lr};
use proptest::prelude::*;

fn mask_strategy(k: u8) -> impl Strategy<Value = SegmentationMask> {
    (1usize..12, 1usize..12).prop_flat_map(move |(w, h)| {
        prop::collection::vec(prop_oneof![9 => 0..k, 1 => Just(IGNORE)], w * h)
            .prop_map(move |labels| SegmentationMask::from_vec(w, h, labels).unwrap())
    })
}

fn daily_strategy() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop_oneof![6 => (0.0..=1.0f64).prop_map(Some), 1 => Just(None)], 1..80)
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 11, 1).unwrap()
}

fn frames(cams: &[u8]) -> Vec<FrameMeta> {
    cams.iter()
        .enumerate()
        .map(|(i, c)| FrameMeta {
            path: format!("f{i}.png"),
            timestamp: parse_timestamp("2017-01-01T12:00:00").unwrap(),
            camera_id: format!("cam{c}"),
            lake_id: "lake".into(),
            winter_id: format!("w{}", i % 2),
            source: FrameSource::Webcam,
        })
        .collect()
}

proptest! {
    #[test]
    fn frequencies_sum_to_one(masks in prop::collection::vec(mask_strategy(5), 1..5)) {
        let legend = ClassLegend::ice_segmentation();
        if let Ok(f) = class_frequencies(&masks, &legend) {
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
            let w = compute_class_weights(&f).unwrap();
            let total: f64 = w.w.iter().zip(&f).map(|(a, b)| a * b).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_png_round_trip(mask in mask_strategy(5)) {
        let legend = ClassLegend::ice_segmentation();
        let bytes = encode_mask(&mask, &legend).unwrap();
        prop_assert_eq!(decode_mask(&bytes, &legend).unwrap(), mask);
    }

    #[test]
    fn same_camera_split_is_a_partition(cams in prop::collection::vec(0u8..3, 2..40), fraction in 0.05..0.95f64, seed: u64) {
        let all = frames(&cams);
        let spec = SplitSpec {
            mode: SplitMode::SameCamera,
            train_selector: Selector::camera("cam0"),
            test_selector: Selector::camera("cam0"),
            train_fraction: fraction,
            seed,
        };
        let pool: Vec<FrameMeta> = all.iter().filter(|f| f.camera_id == "cam0").cloned().collect();
        match make_split(&all, &spec) {
            Ok((train, test)) => {
                prop_assert_eq!(train.len() + test.len(), pool.len());
                prop_assert!(train.iter().all(|f| !test.contains(f)));
                prop_assert!(train.iter().chain(&test).all(|f| pool.contains(f)));
            }
            Err(_) => prop_assert!(pool.is_empty()),
        }
    }

    #[test]
    fn cross_camera_split_separates_cameras(cams in prop::collection::vec(0u8..3, 2..40)) {
        let all = frames(&cams);
        let spec = SplitSpec {
            mode: SplitMode::CrossCamera,
            train_selector: Selector::camera("cam0"),
            test_selector: Selector::camera("cam1"),
            ..SplitSpec::default()
        };
        if let Ok((train, test)) = make_split(&all, &spec) {
            prop_assert!(train.iter().all(|f| f.camera_id == "cam0"));
            prop_assert!(test.iter().all(|f| f.camera_id == "cam1"));
            prop_assert_eq!(train.len(), cams.iter().filter(|&&c| c == 0).count());
            prop_assert_eq!(test.len(), cams.iter().filter(|&&c| c == 1).count());
        }
    }

    #[test]
    fn smoothing_stays_within_window_hull(values in daily_strategy(), half in 0usize..4) {
        let series = FrozenAreaSeries::from_daily(start(), &values);
        let smoothed = median_smooth(&series, 2 * half + 1).unwrap();
        prop_assert_eq!(smoothed.len(), series.len());
        prop_assert_eq!(&smoothed.gaps, &series.gaps);
        for (s, e) in smoothed.entries.iter().zip(&series.entries) {
            prop_assert_eq!(s.date, e.date);
            let window: Vec<f64> = series
                .entries
                .iter()
                .filter(|x| (x.date - e.date).num_days().unsigned_abs() as usize <= half)
                .map(|x| x.fraction)
                .collect();
            let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.fraction >= lo && s.fraction <= hi);
        }
    }

    #[test]
    fn events_alternate(values in daily_strategy(), confirm in 2usize..4) {
        let series = FrozenAreaSeries::from_daily(start(), &values);
        let cfg = PhenologyConfig { confirm_days: confirm, ..PhenologyConfig::default() };
        let events = detect_events(&series, &cfg).unwrap();
        let mut last = None;
        for (i, e) in events.iter().enumerate() {
            prop_assert!(last.is_none_or(|d| e.ice_on > d));
            prop_assert!(series.get(e.ice_on).unwrap().fraction >= cfg.tau_on);
            match e.ice_off {
                Some(off) => {
                    prop_assert!(off > e.ice_on);
                    prop_assert!(1.0 - series.get(off).unwrap().fraction >= cfg.tau_off);
                    last = Some(off);
                }
                None => prop_assert_eq!(i, events.len() - 1),
            }
        }
    }

    #[test]
    fn frozen_fraction_ignores_pixels_outside_the_lake(
        (region, a, b) in (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            let n = w * h;
            (
                prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(IGNORE)], n),
                prop::collection::vec(0u8..5, n),
                prop::collection::vec(0u8..5, n),
            )
                .prop_map(move |(r, a, b)| {
                    let r = SegmentationMask::from_vec(w, h, r).unwrap();
                    let a = SegmentationMask::from_vec(w, h, a).unwrap();
                    let b = SegmentationMask::from_vec(w, h, b).unwrap();
                    (r, a, b)
                })
        }),
    ) {
        // b takes a's labels inside the lake and its own elsewhere
        let mixed: Vec<u8> = region
            .labels()
            .iter()
            .zip(a.labels().iter().zip(b.labels()))
            .map(|(&r, (&x, &y))| if r == 1 { x } else { y })
            .collect();
        let mixed = SegmentationMask::from_vec(a.width(), a.height(), mixed).unwrap();
        for policy in [ClutterPolicy::Frozen, ClutterPolicy::Excluded] {
            let fa = frozen_fraction(&a, &region, policy).ok();
            let fb = frozen_fraction(&mixed, &region, policy).ok();
            prop_assert_eq!(fa, fb);
            if let Some(f) = fa {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn poly_schedule_decreases(total in 1usize..500, base in 1e-6..10.0f64, power in 0.1..2.0f64) {
        let lrs: Vec<f64> = (0..=total).map(|s| poly_lr(s, total, base, power).unwrap()).collect();
        prop_assert_eq!(lrs[0], base);
        prop_assert_eq!(lrs[total], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
