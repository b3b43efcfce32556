//! Multi-task objective: `L = L_cls + L_reg + w_seg · L_seg`.

use std::cmp::Ordering;

use crate::detect::{BoxTarget, REGRESSORS};
use crate::error::{Error, Result};
use crate::ndgrad::{Float, Graph, Reduction, Tensor, Var};

/// Label value excluded from the segmentation loss and metrics.
pub const IGNORE_LABEL: u8 = 255;
/// Hard negatives kept per positive prior.
pub const NEG_POS_RATIO: usize = 3;
pub const DEFAULT_W_SEG: f64 = 4.0;

/// Classification target meaning "not part of the loss".
const SKIP: usize = usize::MAX;

/// Scalar values of one evaluated objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_seg: f64,
    pub w_seg: f64,
    pub total: f64,
    pub n_matched: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_cls,l_reg,l_seg,total";

    pub fn csv_line(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.l_cls, self.l_reg, self.l_seg, self.total)
    }

    /// Fails on the first non-finite component, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (component, value) in [
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_seg", self.l_seg),
            ("total", self.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { component, value });
            }
        }
        Ok(())
    }
}

/// Graph handles of the detection terms.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub l_cls: Var,
    pub l_reg: Var,
    pub n_matched: usize,
}

/// Per-prior classification targets of one image: the matched class for
/// positives, background for the `ratio · positives` negatives with the
/// largest background loss `−log p₀` (ties by ascending prior index), and
/// `None` for everything else.
pub fn mine_hard_negatives(logits: &[f64], classes: usize, targets: &[Option<BoxTarget>], ratio: usize) -> Vec<Option<usize>> {
    let mut out: Vec<Option<usize>> = targets.iter().map(|t| t.map(|t| t.class)).collect();
    let positives = out.iter().filter(|t| t.is_some()).count();
    let mut negatives: Vec<(usize, f64)> = out
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(p, _)| (p, background_loss(&logits[p * classes..(p + 1) * classes])))
        .collect();
    negatives.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    for &(p, _) in negatives.iter().take(ratio * positives) {
        out[p] = Some(0);
    }
    out
}

fn background_loss(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Classification and regression terms for a batch. `logits` is
/// `N × P × (classes + 1)`, `regressors` is `N × P × 5`, `targets` holds one
/// per-prior assignment per image. Both terms are sums normalized by the
/// number of matched priors; with no matches both are zero.
pub fn detection_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    regressors: Var,
    targets: &[Vec<Option<BoxTarget>>],
) -> Result<DetectionLoss> {
    let shape = g.shape(logits).to_vec();
    let reg_shape = g.shape(regressors).to_vec();
    let (n, p, c) = match shape[..] {
        [n, p, c] => (n, p, c),
        _ => return Err(Error::invalid("detection_loss", format!("logits must be N×P×C, got {shape:?}"))),
    };
    if reg_shape != [n, p, REGRESSORS] {
        return Err(Error::ShapeMismatch {
            op: "detection_loss regressors",
            lhs: vec![n, p, REGRESSORS],
            rhs: reg_shape,
        });
    }
    if targets.len() != n || targets.iter().any(|t| t.len() != p) {
        return Err(Error::invalid("detection_loss", format!("need {n} target lists of {p} priors")));
    }
    let n_matched = targets.iter().flatten().filter(|t| t.is_some()).count();
    if n_matched == 0 {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(DetectionLoss {
            l_cls: zero,
            l_reg: zero,
            n_matched,
        });
    }

    let values = g.value(logits).to_f64_vec();
    let mut cls_targets = Vec::with_capacity(n * p);
    for (i, image) in targets.iter().enumerate() {
        let mined = mine_hard_negatives(&values[i * p * c..(i + 1) * p * c], c, image, NEG_POS_RATIO);
        cls_targets.extend(mined.into_iter().map(|t| t.unwrap_or(SKIP)));
    }
    let norm = T::from_usize(n_matched).unwrap().recip();
    let ce = g.softmax_cross_entropy(logits, &cls_targets, SKIP, 2, Reduction::Sum)?;
    let l_cls = g.scale(ce, norm);

    // Unmatched rows and missing depths are masked to zero on both sides.
    let mut mask = vec![T::zero(); n * p * REGRESSORS];
    let mut goal = vec![T::zero(); n * p * REGRESSORS];
    for (row, t) in targets.iter().flatten().enumerate() {
        let Some(t) = t else { continue };
        let valid = [true, true, true, true, t.dd.is_some()];
        for (k, (v, on)) in t.regressors().iter().zip(valid).enumerate() {
            if on {
                mask[row * REGRESSORS + k] = T::one();
                goal[row * REGRESSORS + k] = T::from_f64_lossy(*v);
            }
        }
    }
    let mask = g.constant(Tensor::new(reg_shape.clone(), mask)?);
    let goal = g.constant(Tensor::new(reg_shape, goal)?);
    let masked = g.mul(regressors, mask)?;
    let l1 = g.smooth_l1(masked, goal)?;
    let l_reg = g.scale(l1, norm);
    Ok(DetectionLoss { l_cls, l_reg, n_matched })
}

/// Mean pixel cross-entropy of `N × C × h × w` logits against row-major
/// `N × h × w` labels; [`IGNORE_LABEL`] pixels are skipped.
pub fn segmentation_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("segmentation_loss", format!("logits must be N×C×h×w, got {shape:?}")));
    }
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    g.softmax_cross_entropy(logits, &targets, IGNORE_LABEL as usize, 1, Reduction::Mean)
}

pub fn total_loss<T: Float>(g: &mut Graph<T>, l_cls: Var, l_reg: Var, l_seg: Var, w_seg: f64) -> Result<Var> {
    if !(w_seg > 0.0 && w_seg.is_finite()) {
        return Err(Error::invalid("total_loss", format!("w_seg must be positive, got {w_seg}")));
    }
    let det = g.add(l_cls, l_reg)?;
    let seg = g.scale(l_seg, T::from_f64_lossy(w_seg));
    g.add(det, seg)
}
