use super::boxes::{NormBox, PixelBox};
use super::priors::PriorBox;
use crate::error::{Error, Result};

/// Center offsets are divided by this before regression.
pub const CENTER_VARIANCE: f64 = 0.1;
/// Log-size offsets are divided by this before regression.
pub const SIZE_VARIANCE: f64 = 0.2;

/// Regression target of a matched prior: box offsets plus log depth ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    /// Detection label, 0 = background.
    pub class: usize,
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    /// `ln(depth / depth_ref)`; `None` when the object has no depth ground truth.
    pub dd: Option<f64>,
}

impl BoxTarget {
    pub fn regressors(&self) -> [f64; 5] {
        [self.dx, self.dy, self.dw, self.dh, self.dd.unwrap_or(0.0)]
    }
}

/// Decoded per-object output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: PixelBox,
    /// Metres.
    pub depth: f64,
}

pub fn encode_target(prior: &PriorBox, gt: &NormBox, depth: Option<f64>, class: usize) -> Result<BoxTarget> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::invalid("encode_target", format!("non-positive box extents {gt:?}")));
    }
    let dd = match depth {
        Some(d) if d > 0.0 && d.is_finite() => Some((d / prior.depth_ref).ln()),
        Some(d) => return Err(Error::invalid("encode_target", format!("non-positive depth {d}"))),
        None => None,
    };
    Ok(BoxTarget {
        class,
        dx: (gt.cx - prior.cx) / prior.w / CENTER_VARIANCE,
        dy: (gt.cy - prior.cy) / prior.h / CENTER_VARIANCE,
        dw: (gt.w / prior.w).ln() / SIZE_VARIANCE,
        dh: (gt.h / prior.h).ln() / SIZE_VARIANCE,
        dd,
    })
}

/// Inverse of [`encode_target`]: normalized box and depth in metres.
pub fn decode_box(prior: &PriorBox, reg: &[f64; 5]) -> (NormBox, f64) {
    let b = NormBox {
        cx: prior.cx + reg[0] * CENTER_VARIANCE * prior.w,
        cy: prior.cy + reg[1] * CENTER_VARIANCE * prior.h,
        w: prior.w * (reg[2] * SIZE_VARIANCE).exp(),
        h: prior.h * (reg[3] * SIZE_VARIANCE).exp(),
    };
    (b, prior.depth_ref * reg[4].exp())
}

/// Softmax over `logits` (index 0 = background).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Decodes one prior into its most probable non-background class.
pub fn decode_detection(prior: &PriorBox, reg: &[f64; 5], logits: &[f64], width: usize, height: usize) -> Detection {
    let probs = softmax(logits);
    let (class, score) = probs
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
    let (b, depth) = decode_box(prior, reg);
    Detection {
        class,
        score: score.max(0.0),
        bbox: b.to_pixels(width, height),
        depth,
    }
}
