use mapdistill_core::eval::{average_precision, chamfer_distance, mean_ap, EvalConfig};
use mapdistill_core::map::{polyline_length, resample_polyline, ElementClass, MapElement, MapSample, Point, PredictionSet};
use mapdistill_core::synth::generate_dataset;
use mapdistill_core::config::{PipelineConfig, SceneConfig};
use proptest::prelude::*;

/// Walks the polyline segment by segment to the point at arc length `s`.
fn point_at_arc_length(points: &[Point], s: f64) -> Point {
    let mut left = s;
    for w in points.windows(2) {
        let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        if left <= len {
            let t = if len > 0.0 { left / len } else { 0.0 };
            return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
        }
        left -= len;
    }
    *points.last().unwrap()
}

fn polyline(max_len: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-15.0..15.0f64, -30.0..30.0f64), 2..max_len)
        .prop_map(|v| v.into_iter().map(|(x, y)| [x, y]).collect::<Vec<Point>>())
        .prop_filter("positive length", |p| polyline_length(p) > 1e-3)
}

#[test]
fn l_shape_matches_arc_length_walker() {
    let l = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
    let got = resample_polyline(&l, 5).unwrap();
    for (j, p) in got.iter().enumerate() {
        let want = point_at_arc_length(&l, 0.5 * j as f64);
        assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12, "{j}: {p:?} vs {want:?}");
    }
}

#[test]
fn identical_polylines_have_zero_chamfer() {
    let a = [[1.0, 2.0], [3.0, -4.0], [0.5, 7.0]];
    assert_eq!(chamfer_distance(&a, &a, 100).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn resampling_matches_the_walker(p in polyline(8), n in 2usize..40) {
        let total = polyline_length(&p);
        let got = resample_polyline(&p, n).unwrap();
        prop_assert_eq!(got.len(), n);
        for (j, q) in got.iter().enumerate() {
            let want = point_at_arc_length(&p, total * j as f64 / (n - 1) as f64);
            prop_assert!((q[0] - want[0]).abs() < 1e-9 && (q[1] - want[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn resampling_keeps_path_length_when_refining(p in polyline(6), extra in 0usize..4) {
        // Every input vertex is hit when n - 1 is a multiple of the segment
        // count on a uniform polyline; in general the path can only shorten,
        // and for straight inputs it is preserved.
        let straight = vec![p[0], *p.last().unwrap()];
        let n = straight.len() + extra;
        let r = resample_polyline(&straight, n).unwrap();
        prop_assert!((polyline_length(&r) - polyline_length(&straight)).abs() <= 1e-9);
        let r = resample_polyline(&p, p.len() + extra).unwrap();
        prop_assert!(polyline_length(&r) <= polyline_length(&p) + 1e-9);
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(a in polyline(6), b in polyline(6)) {
        let ab = chamfer_distance(&a, &b, 50).unwrap();
        let ba = chamfer_distance(&b, &a, 50).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn parallel_offset_is_the_distance(d in 0.01..5.0f64, len in 1.0..20.0f64) {
        let a = [[0.0, 0.0], [0.0, len]];
        let b = [[d, 0.0], [d, len]];
        prop_assert!((chamfer_distance(&a, &b, 100).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn adding_a_top_ranked_tp_never_lowers_ap(
        flags in prop::collection::vec(any::<bool>(), 0..12),
        extra_gt in 0usize..4,
    ) {
        let tps = flags.iter().filter(|&&f| f).count();
        let num_gt = tps + 1 + extra_gt;
        let scored: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, &f)| (1.0 - 0.01 * i as f64, f)).collect();
        let before = average_precision(&scored, num_gt);
        let mut with_top = vec![(2.0, true)];
        with_top.extend(scored);
        prop_assert!(average_precision(&with_top, num_gt) >= before - 1e-15);
    }
}

fn perturbed_predictions(samples: &[MapSample], shift: f64) -> Vec<PredictionSet> {
    samples
        .iter()
        .map(|s| PredictionSet {
            sample_id: s.sample_id.clone(),
            elements: s
                .ground_truth
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let dx = shift * (i as f64 + 1.0);
                    let pts = e.points.iter().map(|p| [(p[0] + dx).clamp(-15.0, 15.0), p[1]]).collect();
                    MapElement::new(e.class, pts, Some(1.0 / (i as f64 + 2.0))).unwrap()
                })
                .collect(),
        })
        .collect()
}

#[test]
fn ap_is_non_decreasing_in_tau_and_map_is_the_grouped_mean() {
    let scenes = generate_dataset(11, 12, &PipelineConfig::default(), &SceneConfig::default()).unwrap();
    let samples: Vec<MapSample> = scenes.into_iter().map(|s| s.sample).collect();
    let preds = perturbed_predictions(&samples, 0.35);
    let cfg = EvalConfig { thresholds: vec![0.25, 0.5, 1.0, 1.5, 3.0, 100.0], ..EvalConfig::default() };
    let r = mean_ap(&preds, &samples, &cfg).unwrap();
    for c in ElementClass::ALL {
        let aps = &r.per_class_per_tau[c.id()];
        assert!(aps.windows(2).all(|w| w[1] >= w[0] - 1e-15), "{c:?}: {aps:?}");
        assert!(aps.iter().all(|&a| (0.0..=1.0).contains(&a)));
        // Every prediction matches at a huge threshold.
        assert_eq!(*aps.last().unwrap(), 1.0);
    }
    let grouped: f64 = r.per_class_per_tau.iter().flatten().sum::<f64>() / (3 * cfg.thresholds.len()) as f64;
    assert!((r.map - grouped).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_predictions() {
    let scenes = generate_dataset(3, 8, &PipelineConfig::default(), &SceneConfig::default()).unwrap();
    let samples: Vec<MapSample> = scenes.into_iter().map(|s| s.sample).collect();
    let perfect = perturbed_predictions(&samples, 0.0);
    assert_eq!(mean_ap(&perfect, &samples, &EvalConfig::default()).unwrap().map, 1.0);
    assert_eq!(mean_ap(&[], &samples, &EvalConfig::default()).unwrap().map, 0.0);
}

#[test]
fn predictions_for_unknown_samples_are_rejected() {
    let samples = vec![MapSample { sample_id: "a".into(), scene_seed: 0, ground_truth: vec![] }];
    let preds = vec![PredictionSet { sample_id: "b".into(), elements: vec![] }];
    assert!(mean_ap(&preds, &samples, &EvalConfig::default()).is_err());
}
