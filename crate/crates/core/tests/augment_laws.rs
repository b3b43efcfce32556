//! Depth laws and mask/box coherence of the geometric augmentation.

mod common;

use common::{angle_range, augmentation_laws, coherence_violation, rng, single_object_scene, SIZE_DEPTH_TOL};
use percept::augment::{apply_augmentation, filter_small_boxes, transform_boxes, AugmentParams};
use percept::dataio::{synth_generate, CameraModel, GtBox};
use proptest::prelude::*;

#[test]
fn thousand_draws_obey_depth_laws() {
    let l = augmentation_laws(1000).unwrap();
    assert_eq!(l.rotation_depth_changes, 0);
    assert!(l.boxes_checked > 1000);
    assert!(l.resize_depth_max_rel <= SIZE_DEPTH_TOL, "{:e}", l.resize_depth_max_rel);
    assert!(l.size_depth_checked > 100);
    assert!(l.size_depth_max_rel <= SIZE_DEPTH_TOL, "{:e}", l.size_depth_max_rel);
    assert!(l.coherence_worst_px <= 1.0, "{}", l.coherence_worst_px);
}

#[test]
fn identity_is_bit_exact() {
    let s = synth_generate(5, 1, (128, 64), CameraModel::scaled_to_width(128)).unwrap().remove(0);
    assert_eq!(apply_augmentation(&s, &AugmentParams::identity()).unwrap(), s);
}

#[test]
fn double_scale_halves_ten_metres() {
    let b = GtBox { class: 1, x: 40.0, y: 30.0, w: 10.0, h: 20.0, depth: Some(10.0) };
    let p = AugmentParams { flip: false, angle_deg: 0.0, scale_x: 2.0, scale_y: 2.0, seed: 0 };
    let out = transform_boxes(&[b], &p, 128, 128)[0].unwrap();
    assert_eq!(out.depth, Some(5.0));
}

#[test]
fn small_box_filter_matches_direct_check() {
    let mut r = rng(8);
    use rand::Rng;
    let boxes: Vec<GtBox> = (0..200)
        .map(|_| GtBox { class: 1, x: 0.0, y: 0.0, w: r.random_range(1.0..20.0), h: r.random_range(1.0..20.0), depth: None })
        .collect();
    let kept = filter_small_boxes(&boxes, 100.0);
    let want: Vec<GtBox> = boxes.iter().filter(|b| !(b.w * b.h < 100.0)).copied().collect();
    assert_eq!(kept, want);
    let edge = [GtBox { class: 1, x: 0.0, y: 0.0, w: 10.0, h: 9.0, depth: None }, GtBox { class: 1, x: 0.0, y: 0.0, w: 10.0, h: 10.0, depth: None }];
    assert_eq!(filter_small_boxes(&edge, 100.0), vec![edge[1]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rotation_and_mirror_keep_depth(angle in angle_range(), flip: bool, seed: u64) {
        let s = synth_generate(seed % 50, 1, (128, 64), CameraModel::scaled_to_width(128)).unwrap().remove(0);
        let p = AugmentParams { flip, angle_deg: angle, scale_x: 1.0, scale_y: 1.0, seed };
        for (a, b) in s.boxes.iter().zip(transform_boxes(&s.boxes, &p, 128, 64)) {
            if let Some(b) = b {
                prop_assert_eq!(a.depth, b.depth);
            }
        }
    }

    #[test]
    fn same_seed_same_scene(seed in 0u64..1000) {
        let s = synth_generate(1, 1, (64, 64), CameraModel::scaled_to_width(64)).unwrap().remove(0);
        let p = AugmentParams::draw(seed);
        prop_assert_eq!(apply_augmentation(&s, &p).unwrap(), apply_augmentation(&s, &p).unwrap());
    }

    #[test]
    fn instance_pixels_stay_in_box(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let s = single_object_scene(&mut r, 128, 64);
        let out = apply_augmentation(&s, &AugmentParams::draw(seed)).unwrap();
        prop_assert!(coherence_violation(&out, 13) <= 1.0);
    }
}
