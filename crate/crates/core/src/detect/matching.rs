use super::boxes::NormBox;
use super::priors::PriorBox;
use crate::error::{Error, Result};

/// Assigns ground-truth boxes to priors.
///
/// Each GT first claims its best-IoU prior (a prior claimed by several GTs
/// goes to the one it overlaps most). Every remaining prior whose best IoU
/// reaches `iou_threshold` is matched to that best GT. Ties go to the lower
/// index. Returns the matched GT index per prior.
pub fn match_anchors(priors: &[PriorBox], gts: &[NormBox], iou_threshold: f64) -> Result<Vec<Option<usize>>> {
    if let Some(bad) = gts.iter().find(|g| !(g.w > 0.0 && g.h > 0.0)) {
        return Err(Error::invalid("match_anchors", format!("degenerate ground-truth box {bad:?}")));
    }
    let mut assigned = vec![None; priors.len()];
    if gts.is_empty() {
        return Ok(assigned);
    }
    let mut best_gt = vec![(0usize, f64::NEG_INFINITY); priors.len()];
    let mut best_prior = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (p, prior) in priors.iter().enumerate() {
        let pb = prior.as_box();
        for (j, gt) in gts.iter().enumerate() {
            let iou = pb.iou(gt);
            if iou > best_gt[p].1 {
                best_gt[p] = (j, iou);
            }
            if iou > best_prior[j].1 {
                best_prior[j] = (p, iou);
            }
        }
    }
    for (p, &(j, iou)) in best_gt.iter().enumerate() {
        if iou >= iou_threshold {
            assigned[p] = Some(j);
        }
    }
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; priors.len()];
    for (j, &(p, iou)) in best_prior.iter().enumerate() {
        match forced[p] {
            Some((_, prev)) if prev >= iou => {}
            _ => forced[p] = Some((j, iou)),
        }
    }
    for (p, f) in forced.into_iter().enumerate() {
        if let Some((j, _)) = f {
            assigned[p] = Some(j);
        }
    }
    Ok(assigned)
}
