//! The joint network: shared encoder, detection head and segmentation head,
//! plus batch preparation, the multi-task forward pass and inference.

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::MIN_BOX_AREA;
use crate::dataio::{subsample_mask, GtBox, Scene};
use crate::detect::{assign_targets, postprocess, BoxTarget, DetectConfig, DetectHead, DetectOutput, Detection, GtObject, PostprocessConfig, PriorBox};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, Preset};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, segmentation_loss, total_loss, LossReport};
use crate::ndgrad::{Float, ParamStore, Tensor, Var};
use crate::nn::Forward;
use crate::seghead::{argmax_masks, SegConfig, SegHead};

/// Per-channel normalization applied to 8-bit RGB input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Prior/ground-truth IoU needed for a positive match.
pub const MATCH_IOU: f64 = 0.5;
/// Segmentation output stride.
pub const SEG_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub detect: DetectConfig,
    pub seg: SegConfig,
}

impl ModelConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            encoder: EncoderConfig::for_preset(preset),
            detect: DetectConfig::for_preset(preset),
            seg: SegConfig::for_preset(preset),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub detect: DetectHead,
    pub seg: SegHead,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub det: DetectOutput,
    /// `N × classes × H/4 × W/4`.
    pub seg: Var,
}

/// Graph handles of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_reg: Var,
    pub l_seg: Var,
    pub total: Var,
    pub n_matched: usize,
}

/// Training targets of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    pub detection: Vec<Vec<Option<BoxTarget>>>,
    /// Row-major `N × H/4 × W/4` labels.
    pub seg: Vec<u8>,
}

impl Model {
    /// Builds all parameters into `store` from one seeded stream.
    pub fn build<T: Float>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::build(&config.encoder, store, &mut rng)?;
        let detect = DetectHead::build(&config.detect, &config.encoder, store, &mut rng)?;
        let seg = SegHead::build(&config.seg, &config.encoder, store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            detect,
            seg,
        })
    }

    /// With `block_gradients`, the segmentation branch reads `res3`/`res4`
    /// through stop-gradient and `res5` is computed from a detached `res4`,
    /// so the segmentation loss only trains `res5` and its own head.
    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, image: Var, block_gradients: bool) -> Result<ModelOutput> {
        let pyramid = self.encoder.encode(f, image, block_gradients)?;
        let det = self.detect.forward(f, &pyramid)?;
        let seg = self.seg.forward(f, &pyramid, block_gradients)?;
        Ok(ModelOutput { pyramid, det, seg })
    }

    pub fn priors(&self, width: usize, height: usize) -> Result<Vec<PriorBox>> {
        self.detect.priors(width, height)
    }

    /// Forward pass plus `L_cls + L_reg + w_seg · L_seg`.
    pub fn losses<T: Float>(
        &self,
        f: &mut Forward<'_, T>,
        images: Tensor<T>,
        targets: &BatchTargets,
        w_seg: f64,
        block_gradients: bool,
    ) -> Result<(ModelOutput, LossVars)> {
        let x = f.graph.constant(images);
        let out = self.forward(f, x, block_gradients)?;
        let det = detection_loss(&mut f.graph, out.det.logits, out.det.regressors, &targets.detection)?;
        let l_seg = segmentation_loss(&mut f.graph, out.seg, &targets.seg)?;
        let total = total_loss(&mut f.graph, det.l_cls, det.l_reg, l_seg, w_seg)?;
        Ok((
            out,
            LossVars {
                l_cls: det.l_cls,
                l_reg: det.l_reg,
                l_seg,
                total,
                n_matched: det.n_matched,
            },
        ))
    }
}

impl LossVars {
    pub fn report<T: Float>(&self, f: &Forward<'_, T>, w_seg: f64) -> LossReport {
        let v = |x: Var| f.graph.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossReport {
            l_cls: v(self.l_cls),
            l_reg: v(self.l_reg),
            l_seg: v(self.l_seg),
            w_seg,
            total: v(self.total),
            n_matched: self.n_matched,
        }
    }
}

/// Normalized `N × 3 × H × W` tensor from equally sized RGB images.
pub fn image_tensor<T: Float>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("image_tensor", "empty batch"))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "image_tensor",
                lhs: vec![h as usize, w as usize],
                rhs: vec![img.height() as usize, img.width() as usize],
            });
        }
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                let v = (px[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                data[(i * 3 + c) * plane + p] = T::from_f64_lossy(v);
            }
        }
    }
    Tensor::new([images.len(), 3, h as usize, w as usize], data)
}

/// Ground-truth objects of a scene in normalized coordinates, dropping boxes
/// below the minimum area.
pub fn gt_objects(boxes: &[GtBox], width: usize, height: usize) -> Vec<GtObject> {
    boxes
        .iter()
        .filter(|b| b.area() >= MIN_BOX_AREA)
        .map(|b| GtObject {
            class: b.class,
            bbox: b.normalized(width, height),
            depth: b.depth,
        })
        .collect()
}

/// Matches every scene against `priors` and subsamples its mask to the
/// segmentation output resolution.
pub fn batch_targets(scenes: &[&Scene], priors: &[PriorBox]) -> Result<BatchTargets> {
    let mut detection = Vec::with_capacity(scenes.len());
    let mut seg = Vec::new();
    for s in scenes {
        let objects = gt_objects(&s.boxes, s.width(), s.height());
        detection.push(assign_targets(priors, &objects, MATCH_IOU)?);
        seg.extend_from_slice(subsample_mask(&s.mask, SEG_STRIDE)?.as_raw());
    }
    Ok(BatchTargets { detection, seg })
}

/// Inference result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    /// Class id per pixel at a quarter of the input resolution.
    pub mask: GrayImage,
}

/// Eval-mode inference over equally sized images.
pub fn predict<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    images: &[&RgbImage],
    cfg: &PostprocessConfig,
) -> Result<Vec<Prediction>> {
    let tensor = image_tensor::<T>(images)?;
    let (n, _, h, w) = tensor.dims4()?;
    let priors = model.priors(w, h)?;
    let mut f = Forward::new(store, false);
    let x = f.graph.constant(tensor);
    let out = model.forward(&mut f, x, false)?;
    model.detect.check_prior_count(&f, &out.det, priors.len())?;
    let logits = f.graph.value(out.det.logits).to_f64_vec();
    let regs = f.graph.value(out.det.regressors).to_f64_vec();
    let seg = f.graph.value(out.seg);
    let (_, _, mh, mw) = seg.dims4()?;
    let masks = argmax_masks(seg)?;
    let per_logits = logits.len() / n;
    let per_regs = regs.len() / n;
    Ok(masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| Prediction {
            detections: postprocess(
                &priors,
                &logits[i * per_logits..(i + 1) * per_logits],
                &regs[i * per_regs..(i + 1) * per_regs],
                w,
                h,
                cfg,
            ),
            mask: GrayImage::from_raw(mw as u32, mh as u32, mask).expect("mask extents"),
        })
        .collect())
}
