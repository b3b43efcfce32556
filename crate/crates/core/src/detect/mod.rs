//! Anchor-based detection with a per-object depth component.

mod boxes;
mod codec;
mod head;
mod matching;
mod nms;
mod priors;

pub use boxes::{corner_iou, NormBox, PixelBox};
pub use codec::{decode_box, decode_detection, encode_target, softmax, BoxTarget, Detection, CENTER_VARIANCE, SIZE_VARIANCE};
pub use head::{assign_targets, postprocess, DecodeUnit, DetectConfig, DetectHead, DetectOutput, GtObject, PostprocessConfig, REGRESSORS};
pub use matching::match_anchors;
pub use nms::nms;
pub use priors::{generate_priors, AnchorConfig, LayerSpec, PriorBox};
