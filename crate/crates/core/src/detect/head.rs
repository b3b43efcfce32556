use rand::Rng;

use super::boxes::NormBox;
use super::codec::{decode_box, encode_target, softmax, BoxTarget, Detection};
use super::matching::match_anchors;
use super::nms::nms;
use super::priors::{generate_priors, AnchorConfig, PriorBox};
use crate::encoder::{EncoderConfig, FeaturePyramid, Preset};
use crate::error::{Error, Result};
use crate::ndgrad::{Float, ParamStore, Var};
use crate::nn::{Conv2d, Forward};

/// Regressed components per prior: x, y, w, h, depth.
pub const REGRESSORS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    /// Object classes, background excluded.
    pub num_classes: usize,
    pub anchors: AnchorConfig,
    /// Width of the 1×1 reduction in each extra decode unit.
    pub unit_mid: usize,
    /// Width of the stride-2 3×3 convolution in each extra decode unit.
    pub unit_out: usize,
}

impl DetectConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (unit_mid, unit_out) = match preset {
            Preset::Full => (128, 256),
            Preset::Mini => (32, 64),
        };
        Self {
            num_classes: 10,
            anchors: AnchorConfig::default(),
            unit_mid,
            unit_out,
        }
    }

    /// Logit count per prior, background included.
    pub fn logits_per_prior(&self) -> usize {
        self.num_classes + 1
    }
}

#[derive(Clone, Debug)]
pub struct DecodeUnit {
    pub reduce: Conv2d,
    pub down: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DetectHead {
    pub config: DetectConfig,
    pub units: Vec<DecodeUnit>,
    pub cls: Vec<Conv2d>,
    pub reg: Vec<Conv2d>,
}

/// Per-prior outputs of one batch, rows ordered like [`generate_priors`].
#[derive(Clone, Copy, Debug)]
pub struct DetectOutput {
    /// `N × P × (classes + 1)`.
    pub logits: Var,
    /// `N × P × 5`.
    pub regressors: Var,
}

impl DetectHead {
    /// The first prediction layer reads `res4`; every further layer reads an
    /// extra decode unit (1×1 conv, 3×3 stride-2 conv, ReLU after each).
    pub fn build<T: Float>(
        config: &DetectConfig,
        encoder: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = config.anchors.layers.len();
        if layers == 0 || config.num_classes == 0 {
            return Err(Error::invalid("detect", "need at least one layer and one class"));
        }
        let mut units = Vec::new();
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        let mut in_ch = encoder.res4_channels();
        for (i, layer) in config.anchors.layers.iter().enumerate() {
            if i > 0 {
                let name = format!("detect.unit{i}");
                units.push(DecodeUnit {
                    reduce: Conv2d::new(store, &format!("{name}.reduce"), in_ch, config.unit_mid, 1, 1, true, rng),
                    down: Conv2d::new(store, &format!("{name}.down"), config.unit_mid, config.unit_out, 3, 2, true, rng),
                });
                in_ch = config.unit_out;
            }
            let a = layer.anchors_per_cell();
            let c = config.logits_per_prior();
            cls.push(Conv2d::with_std(store, &format!("detect.cls{i}"), in_ch, a * c, 3, 0.01, true, rng));
            reg.push(Conv2d::with_std(store, &format!("detect.reg{i}"), in_ch, a * REGRESSORS, 3, 0.01, true, rng));
        }
        Ok(Self {
            config: config.clone(),
            units,
            cls,
            reg,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, pyramid: &FeaturePyramid) -> Result<DetectOutput> {
        let n = f.graph.shape(pyramid.res4)[0];
        let c = self.config.logits_per_prior();
        let mut x = pyramid.res4;
        let mut logits = Vec::new();
        let mut regs = Vec::new();
        for (i, layer) in self.config.anchors.layers.iter().enumerate() {
            if i > 0 {
                let u = &self.units[i - 1];
                x = u.reduce.forward(f, x)?;
                x = f.graph.relu(x);
                x = u.down.forward(f, x)?;
                x = f.graph.relu(x);
            }
            let a = layer.anchors_per_cell();
            for (conv, width, out) in [(&self.cls[i], c, &mut logits), (&self.reg[i], REGRESSORS, &mut regs)] {
                let y = conv.forward(f, x)?;
                let (_, _, h, w) = f.graph.value(y).dims4()?;
                let y = f.graph.permute(y, &[0, 2, 3, 1])?;
                out.push(f.graph.reshape(y, &[n, h * w * a, width])?);
            }
        }
        Ok(DetectOutput {
            logits: f.graph.concat(&logits, 1)?,
            regressors: f.graph.concat(&regs, 1)?,
        })
    }

    /// Verifies the produced row count against the prior layout.
    pub fn check_prior_count<T: Float>(&self, f: &Forward<'_, T>, out: &DetectOutput, priors: usize) -> Result<()> {
        let rows = f.graph.shape(out.logits)[1];
        if rows != priors {
            return Err(Error::invalid(
                "detect_forward",
                format!("head produced {rows} rows but the anchor layout has {priors} priors"),
            ));
        }
        Ok(())
    }

    pub fn priors(&self, width: usize, height: usize) -> Result<Vec<PriorBox>> {
        generate_priors(width, height, &self.config.anchors)
    }
}

/// Ground-truth object in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtObject {
    /// Detection label, 1-based.
    pub class: usize,
    pub bbox: NormBox,
    pub depth: Option<f64>,
}

/// Matches `gts` to `priors` and encodes a target for every matched prior.
pub fn assign_targets(priors: &[PriorBox], gts: &[GtObject], iou_threshold: f64) -> Result<Vec<Option<BoxTarget>>> {
    let boxes: Vec<NormBox> = gts.iter().map(|g| g.bbox).collect();
    let matched = match_anchors(priors, &boxes, iou_threshold)?;
    matched
        .iter()
        .zip(priors)
        .map(|(m, prior)| {
            m.map(|j| encode_target(prior, &gts[j].bbox, gts[j].depth, gts[j].class))
                .transpose()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: 0.45,
            top_k: 200,
        }
    }
}

/// Turns one image's per-prior outputs into final detections: every
/// (prior, class) pair above the score threshold becomes a candidate, then
/// per-class suppression.
pub fn postprocess(
    priors: &[PriorBox],
    logits: &[f64],
    regressors: &[f64],
    width: usize,
    height: usize,
    cfg: &PostprocessConfig,
) -> Vec<Detection> {
    let c = logits.len() / priors.len().max(1);
    let mut candidates = Vec::new();
    for (p, prior) in priors.iter().enumerate() {
        let probs = softmax(&logits[p * c..(p + 1) * c]);
        let mut reg = [0.0; REGRESSORS];
        reg.copy_from_slice(&regressors[p * REGRESSORS..(p + 1) * REGRESSORS]);
        let mut decoded = None;
        for (class, &score) in probs.iter().enumerate().skip(1) {
            if score < cfg.score_threshold {
                continue;
            }
            let (b, depth) = *decoded.get_or_insert_with(|| decode_box(prior, &reg));
            candidates.push(Detection {
                class,
                score,
                bbox: b.to_pixels(width, height),
                depth,
            });
        }
    }
    nms(&candidates, cfg.nms_iou, cfg.top_k)
}
