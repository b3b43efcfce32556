//! Metric implementations against brute-force oracles, plus the metric
//! invariants.

mod common;

use common::{det_instance, oracle_gaps, oracle_outcomes, DetInstance, rng, ORACLE_INSTANCES, ORACLE_TOL};
use percept::dataio::GtBox;
use percept::detect::{Detection, PixelBox};
use percept::evalkit::{average_precision, error_cdf, mean_ap, segmentation_scores, EvalAccumulator};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn fifty_instances_match_oracles() {
    let g = oracle_gaps(ORACLE_INSTANCES);
    assert_eq!(g.ap_presence_mismatch, 0);
    assert!(g.ap <= ORACLE_TOL, "AP gap {:e}", g.ap);
    assert!(g.cdf <= ORACLE_TOL, "CDF gap {:e}", g.cdf);
    assert!(g.box_iou <= ORACLE_TOL, "IoU gap {:e}", g.box_iou);
    assert!(g.seg <= ORACLE_TOL, "seg gap {:e}", g.seg);
}

#[test]
fn cdf_matches_counting_oracle_on_thousand_errors() {
    let mut r = rng(17);
    let errors: Vec<f64> = (0..1000).map(|_| r.random_range(0.0..1.5)).collect();
    assert_eq!(error_cdf(&errors), common::cdf_oracle(&errors));
}

fn gt(x: f64, class: usize) -> GtBox {
    GtBox { class, x, y: 0.0, w: 20.0, h: 20.0, depth: Some(10.0) }
}

fn det(x: f64, score: f64, class: usize, depth: f64) -> Detection {
    Detection { class, score, bbox: PixelBox { x, y: 0.0, w: 20.0, h: 20.0 }, depth }
}

#[test]
fn self_evaluation_is_perfect() {
    let mut acc = EvalAccumulator::new(10, 19);
    for image in 0..3 {
        let gts = [gt(0.0, 1), gt(50.0, 3), gt(100.0, 3)];
        let dets: Vec<Detection> = gts.iter().enumerate().map(|(i, g)| det(g.x, 0.9 - i as f64 * 0.1, g.class, 10.0)).collect();
        let mask: Vec<u8> = (0..64).map(|i| (i % 19) as u8).collect();
        acc.add_image(image, &dets, &gts, Some((&mask, &mask))).unwrap();
    }
    let r = acc.finish();
    assert_eq!(r.map, 1.0);
    assert_eq!(r.seg.mean_iou, 1.0);
    assert_eq!(r.seg.pixel_accuracy, 1.0);
    assert_eq!(r.mean_distance_error, Some(0.0));
    assert!(r.cdf.iter().all(|&(_, f)| f == 1.0));
}

#[test]
fn empty_detections_score_zero() {
    let mut acc = EvalAccumulator::new(10, 19);
    acc.add_image(0, &[], &[gt(0.0, 1)], None).unwrap();
    assert_eq!(acc.finish().map, 0.0);
}

#[test]
fn shard_and_merge_equals_single_pass() {
    let inst = det_instance(99, 3);
    let images = inst.gts.iter().map(|g| g.image).chain(inst.dets.iter().map(|d| d.image)).max().unwrap_or(0) + 1;
    let per_image = |i: usize| {
        let d: Vec<Detection> = inst.dets.iter().filter(|d| d.image == i).map(|d| d.det).collect();
        let g: Vec<GtBox> = inst.gts.iter().filter(|g| g.image == i).map(|g| g.gt).collect();
        (d, g)
    };
    let mut single = EvalAccumulator::new(3, 5);
    let mut shards = [EvalAccumulator::new(3, 5), EvalAccumulator::new(3, 5)];
    for i in 0..images {
        let (d, g) = per_image(i);
        let m: Vec<u8> = (0..16).map(|k| ((k + i) % 5) as u8).collect();
        let p: Vec<u8> = (0..16).map(|k| ((k * 3 + i) % 5) as u8).collect();
        single.add_image(i, &d, &g, Some((&p, &m))).unwrap();
        shards[i % 2].add_image(i, &d, &g, Some((&p, &m))).unwrap();
    }
    let [a, b] = shards;
    let mut merged = b;
    merged.merge(a);
    assert_eq!(merged.finish(), single.finish());
}

#[test]
fn small_ground_truth_is_ignored() {
    use percept::evalkit::{ImageDetection, ImageGt};
    let tiny = GtBox { class: 1, x: 0.0, y: 0.0, w: 9.0, h: 9.0, depth: None };
    let big = gt(50.0, 1);
    let gts = [ImageGt { image: 0, gt: tiny }, ImageGt { image: 0, gt: big }];
    let dets = [
        ImageDetection { image: 0, det: Detection { bbox: PixelBox { x: 0.0, y: 0.0, w: 9.0, h: 9.0 }, ..det(0.0, 0.9, 1, 1.0) } },
        ImageDetection { image: 0, det: det(50.0, 0.8, 1, 1.0) },
    ];
    let ap = average_precision(&dets, &gts, 1, 0.5, 100.0);
    assert_eq!(ap[0].n_gt, 1);
    assert_eq!(ap[0].ap, Some(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_ignores_input_order(seed in 0u64..10_000, rot in 0usize..50) {
        let inst = det_instance(seed, 3);
        let mut shuffled = inst.dets.clone();
        let n = shuffled.len().max(1);
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = average_precision(&inst.dets, &inst.gts, 3, 0.5, 100.0);
        let b = average_precision(&shuffled, &inst.gts, 3, 0.5, 100.0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.ap.is_some(), y.ap.is_some());
            prop_assert!((x.ap.unwrap_or(0.0) - y.ap.unwrap_or(0.0)).abs() < 1e-12);
        }
    }

    /// Holds when the removed detection's ground truth is not picked up by
    /// another detection; otherwise a later duplicate becomes the true
    /// positive and every later rank gains precision.
    #[test]
    fn removing_a_true_positive_never_raises_ap(seed in 0u64..10_000) {
        let inst = det_instance(seed, 1);
        let base_outcomes = oracle_outcomes(&inst, 1, 0.5, 100.0);
        let base = mean_ap(&average_precision(&inst.dets, &inst.gts, 1, 0.5, 100.0));
        for &(skip, outcome) in &base_outcomes {
            if outcome != Some(true) {
                continue;
            }
            let keep = |i: usize| i != skip;
            let fewer = DetInstance {
                dets: inst.dets.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, d)| *d).collect(),
                det_boxes: inst.det_boxes.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, b)| *b).collect(),
                gts: inst.gts.clone(),
                gt_boxes: inst.gt_boxes.clone(),
            };
            let others: Vec<Option<bool>> = base_outcomes.iter().filter(|(i, _)| *i != skip).map(|(_, o)| *o).collect();
            let after: Vec<Option<bool>> = oracle_outcomes(&fewer, 1, 0.5, 100.0).into_iter().map(|(_, o)| o).collect();
            if others != after {
                continue;
            }
            let ap = mean_ap(&average_precision(&fewer.dets, &fewer.gts, 1, 0.5, 100.0));
            prop_assert!(ap <= base + 1e-12, "removing det {} raised AP {} -> {}", skip, base, ap);
        }
    }

    #[test]
    fn cdf_is_monotone_and_bounded(errors in proptest::collection::vec(0.0f64..3.0, 0..60)) {
        let cdf = error_cdf(&errors);
        prop_assert_eq!(cdf.len(), 101);
        prop_assert_eq!(cdf[0].0, 0.0);
        prop_assert_eq!(cdf[100].0, 1.0);
        for w in cdf.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert!(cdf.iter().all(|&(_, f)| (0.0..=1.0).contains(&f)));
    }

    #[test]
    fn miou_invariant_under_relabeling(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gt: Vec<u8> = (0..256).map(|_| r.random_range(0..5)).collect();
        let pred: Vec<u8> = gt.iter().map(|&g| if r.random_bool(0.7) { g } else { r.random_range(0..5) }).collect();
        let perm = [3u8, 0, 4, 1, 2];
        let pg: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
        let pp: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let a = segmentation_scores(&[&pred], &[&gt], 5).unwrap();
        let b = segmentation_scores(&[&pp], &[&pg], 5).unwrap();
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        prop_assert_eq!(a.pixel_accuracy, b.pixel_accuracy);
    }
}
