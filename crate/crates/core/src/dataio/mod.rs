//! Scenes, disparity-based distance ground truth, the synthetic generator,
//! the on-disk dataset format and the Cityscapes-layout adapter.

mod cityscapes;
mod disk;
mod registry;
mod scene;
mod synth;

pub use cityscapes::{decode_disparity_png, fill_polygon, load_cityscapes, CityscapesIter, SkippedFile};
pub use disk::{read_dataset, read_manifest, verify_manifest, write_dataset, DatasetManifest};
pub use registry::{ClassRegistry, DETECTION_CLASSES, SEGMENTATION_CLASSES};
pub use scene::{
    box_distance_gt, distance_from_disparity, median, resize_scene, subsample_mask, CameraModel, DisparityMap, GtBox, Scene,
};
pub use synth::{corrupt_disparity, synth_generate, DisparityNoise, SynthClass, SynthConfig};
