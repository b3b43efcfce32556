//! Disparity-to-distance ground truth on synthetic scenes.

mod common;

use common::{depth_recovery, formula_cases};
use image::{GrayImage, Luma};
use percept::dataio::{distance_from_disparity, subsample_mask, synth_generate, CameraModel};
use proptest::prelude::*;

#[test]
fn closed_form_cases_are_exact() {
    for (name, ok) in formula_cases() {
        assert!(ok, "{name}");
    }
}

#[test]
fn planted_depths_recovered_over_hundred_scenes() {
    let d = depth_recovery(100).unwrap();
    assert!(d.boxes >= 100);
    assert_eq!(d.clean_max_rel, 0.0);
    assert_eq!(d.noisy_missing, 0);
    assert!(d.noisy_max_rel < 0.05, "{}", d.noisy_max_rel);
}

#[test]
fn doubling_depth_halves_extent() {
    // Pinhole relation on the generator's own geometry.
    let scenes = synth_generate(9, 20, (256, 128), CameraModel::scaled_to_width(256)).unwrap();
    let cam = CameraModel::scaled_to_width(256);
    for s in &scenes {
        for b in &s.boxes {
            let d = b.depth.unwrap();
            let far = d * 2.0;
            let size_m = b.h * d / cam.f;
            assert!(((cam.f * size_m / far) - b.h / 2.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn inverse_consistency(depth in 0.5f64..500.0) {
        let cam = CameraModel::new(0.22, 2262.0).unwrap();
        let d = cam.b * cam.f / depth;
        let back = distance_from_disparity(&cam, d).unwrap();
        prop_assert!(((back - depth) / depth).abs() <= f64::EPSILON);
    }

    #[test]
    fn subsample_composes(seed in 0u64..1000) {
        let m = GrayImage::from_fn(32, 16, |x, y| Luma([((x * 7 + y * 13 + seed as u32) % 19) as u8]));
        let twice = subsample_mask(&subsample_mask(&m, 2).unwrap(), 2).unwrap();
        prop_assert_eq!(twice, subsample_mask(&m, 4).unwrap());
    }
}
