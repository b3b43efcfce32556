//! Detection AP/mAP, relative distance error and its CDF, segmentation
//! IoU/mIoU/pixel accuracy, and report files.

mod report;

pub use report::{cdf_csv, cdf_svg, metrics_csv, per_class_error_svg, read_report, write_report};

use std::collections::BTreeMap;

use crate::dataio::GtBox;
use crate::detect::{Detection, PixelBox};
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;

pub const AP_IOU: f64 = 0.5;
/// Ground-truth boxes smaller than this (pixels²) are ignored.
pub const IGNORE_AREA: f64 = 100.0;
/// CDF grid step; the grid runs from 0 to 1 inclusive.
pub const CDF_STEP: f64 = 0.01;

/// Outcome of one detection after matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Overlaps an ignored ground truth; excluded from precision and recall.
    Ignored,
}

/// Detection associated with the image it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageDetection {
    pub image: usize,
    pub det: Detection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGt {
    pub image: usize,
    pub gt: GtBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAp {
    pub class: usize,
    /// `None` for classes without a non-ignored ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
}

/// Area under the precision/recall curve with all-points interpolation.
/// `outcomes` must be in descending score order; `n_gt` counts non-ignored
/// ground truths.
pub fn ap_from_outcomes(outcomes: &[MatchOutcome], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut curve = Vec::new();
    for &o in outcomes {
        match o {
            MatchOutcome::Ignored => continue,
            MatchOutcome::TruePositive => tp += 1,
            MatchOutcome::FalsePositive => {}
        }
        seen += 1;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
    }
    // Precision envelope from the right.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Indexed detections and `(box, ignored)` ground truths of one image.
type ImageMatchInput = (Vec<(usize, PixelDet)>, Vec<(PixelBox, bool)>);

/// Greedy matching of one class in one image. Detections are visited by
/// descending score (ties by input order); each takes the unmatched,
/// non-ignored ground truth of highest IoU if it reaches `iou_threshold`,
/// otherwise it is ignored when it overlaps an ignored ground truth that
/// much, and a false positive else.
pub fn match_detections(
    dets: &[PixelDet],
    gts: &[(PixelBox, bool)],
    iou_threshold: f64,
) -> Vec<MatchOutcome> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, ignored)) in gts.iter().enumerate() {
                if *ignored || taken[j] {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                MatchOutcome::TruePositive
            } else if gts.iter().any(|(g, ignored)| *ignored && d.bbox.iou(g) >= iou_threshold) {
                MatchOutcome::Ignored
            } else {
                MatchOutcome::FalsePositive
            }
        })
        .collect()
}

/// Scored pixel box, the part of a detection that matching looks at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDet {
    pub score: f64,
    pub bbox: PixelBox,
}

/// Per-class AP over a set of images for labels `1..=num_classes`.
pub fn average_precision(
    dets: &[ImageDetection],
    gts: &[ImageGt],
    num_classes: usize,
    iou_threshold: f64,
    ignore_area: f64,
) -> Vec<ClassAp> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score).then(a.cmp(&b)));
    (1..=num_classes)
        .map(|class| {
            let class_gts: Vec<&ImageGt> = gts.iter().filter(|g| g.gt.class == class).collect();
            let n_gt = class_gts.iter().filter(|g| g.gt.area() >= ignore_area).count();
            if n_gt == 0 {
                return ClassAp { class, ap: None, n_gt };
            }
            let mut per_image: BTreeMap<usize, ImageMatchInput> = BTreeMap::new();
            for g in &class_gts {
                per_image
                    .entry(g.image)
                    .or_default()
                    .1
                    .push((g.gt.pixel_box(), g.gt.area() < ignore_area));
            }
            for (rank, &i) in order.iter().enumerate() {
                let d = &dets[i];
                if d.det.class == class {
                    let det = PixelDet {
                        score: d.det.score,
                        bbox: d.det.bbox,
                    };
                    per_image.entry(d.image).or_default().0.push((rank, det));
                }
            }
            // Images are matched independently, then outcomes are put back in global rank order.
            let mut ranked = Vec::new();
            for (image_dets, image_gts) in per_image.values() {
                let plain: Vec<PixelDet> = image_dets.iter().map(|(_, d)| *d).collect();
                let outcomes = match_detections(&plain, image_gts, iou_threshold);
                ranked.extend(image_dets.iter().map(|(r, _)| *r).zip(outcomes));
            }
            ranked.sort_by_key(|(r, _)| *r);
            let outcomes: Vec<MatchOutcome> = ranked.into_iter().map(|(_, o)| o).collect();
            ClassAp {
                class,
                ap: Some(ap_from_outcomes(&outcomes, n_gt)),
                n_gt,
            }
        })
        .collect()
}

/// Mean over classes that have ground truth; 0 when none do.
pub fn mean_ap(aps: &[ClassAp]) -> f64 {
    let present: Vec<f64> = aps.iter().filter_map(|a| a.ap).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// `|d_est − d_gt| / d_gt`.
pub fn distance_error(d_est: f64, d_gt: f64) -> Result<f64> {
    if !(d_gt > 0.0) {
        return Err(Error::invalid("distance_error", format!("ground-truth distance {d_gt} must be positive")));
    }
    Ok((d_est - d_gt).abs() / d_gt)
}

/// `(x, F(x))` on the grid `0, 0.01, …, 1` where `F(x)` is the fraction of
/// errors `≤ x`; all zeros for an empty input.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let steps = (1.0 / CDF_STEP).round() as usize;
    (0..=steps)
        .map(|i| {
            let x = i as f64 / steps as f64;
            let count = sorted.partition_point(|&e| e <= x);
            let f = if sorted.is_empty() { 0.0 } else { count as f64 / sorted.len() as f64 };
            (x, f)
        })
        .collect()
}

/// A detection's depth paired with the ground truth it overlaps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthPair {
    /// Class of the ground truth.
    pub class: usize,
    pub estimate: f64,
    pub truth: f64,
}

impl DepthPair {
    pub fn error(&self) -> f64 {
        (self.estimate - self.truth).abs() / self.truth
    }
}

/// Pairs detections (descending score) with the unpaired ground truth of
/// highest IoU `≥ iou_threshold`, regardless of class. Ground truths
/// without depth take no part.
pub fn pair_depths(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Vec<DepthPair> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.depth.is_none() {
                continue;
            }
            let iou = d.bbox.iou(&g.pixel_box());
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            pairs.push(DepthPair {
                class: gts[j].class,
                estimate: d.depth,
                truth: gts[j].depth.unwrap(),
            });
        }
    }
    pairs
}

/// Global `ground truth × prediction` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds one image; ground-truth pixels labelled 255 are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "segmentation_scores",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            for label in [p, g] {
                if label as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: label as usize,
                        classes: self.classes,
                    });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging confusion matrices of different widths");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn scores(&self) -> SegScores {
        let c = self.classes;
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt_total: u64 = (0..c).map(|p| self.get(k, p)).sum();
                if gt_total == 0 {
                    return None;
                }
                let pred_total: u64 = (0..c).map(|g| self.get(g, k)).sum();
                Some(tp as f64 / (gt_total + pred_total - tp) as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        SegScores {
            mean_iou: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
            pixel_accuracy: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    /// Per class; `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

/// One-shot scores for a batch of equally sized masks.
pub fn segmentation_scores(pred: &[&[u8]], gt: &[&[u8]], num_classes: usize) -> Result<SegScores> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("segmentation_scores", "prediction and ground-truth counts differ"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in pred.iter().zip(gt) {
        cm.add(p, g)?;
    }
    Ok(cm.scores())
}

/// Everything the evaluation reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ap: Vec<ClassAp>,
    pub map: f64,
    /// Mean relative distance error per ground-truth class (`None` without pairs).
    pub class_distance_error: Vec<(usize, Option<f64>)>,
    pub mean_distance_error: Option<f64>,
    pub cdf: Vec<(f64, f64)>,
    pub seg: SegScores,
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
    pub depth_pairs: usize,
}

/// Mergeable evaluation state: evaluating shards separately and merging
/// gives the same report as a single pass, provided image ids are global.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalAccumulator {
    pub det_classes: usize,
    detections: Vec<ImageDetection>,
    gts: Vec<ImageGt>,
    depth_pairs: Vec<(usize, DepthPair)>,
    confusion: ConfusionMatrix,
    images: usize,
}

impl EvalAccumulator {
    pub fn new(det_classes: usize, seg_classes: usize) -> Self {
        Self {
            det_classes,
            detections: Vec::new(),
            gts: Vec::new(),
            depth_pairs: Vec::new(),
            confusion: ConfusionMatrix::new(seg_classes),
            images: 0,
        }
    }

    /// Adds one image. `seg` is `(predicted, ground-truth)` quarter-resolution masks.
    pub fn add_image(&mut self, image: usize, dets: &[Detection], gts: &[GtBox], seg: Option<(&[u8], &[u8])>) -> Result<()> {
        if let Some((pred, gt)) = seg {
            self.confusion.add(pred, gt)?;
        }
        self.detections.extend(dets.iter().map(|&det| ImageDetection { image, det }));
        self.gts.extend(gts.iter().map(|&gt| ImageGt { image, gt }));
        self.depth_pairs
            .extend(pair_depths(dets, gts, AP_IOU).into_iter().map(|p| (image, p)));
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.confusion.merge(&other.confusion);
        self.detections.extend(other.detections);
        self.gts.extend(other.gts);
        self.depth_pairs.extend(other.depth_pairs);
        self.images += other.images;
    }

    pub fn finish(&self) -> MetricsReport {
        // Sort by image so merge order cannot change score ties.
        let mut dets = self.detections.clone();
        dets.sort_by_key(|d| d.image);
        let mut pairs = self.depth_pairs.clone();
        pairs.sort_by_key(|(image, _)| *image);
        let ap = average_precision(&dets, &self.gts, self.det_classes, AP_IOU, IGNORE_AREA);
        let errors: Vec<f64> = pairs.iter().map(|(_, p)| p.error()).collect();
        let class_distance_error = (1..=self.det_classes)
            .map(|c| {
                let e: Vec<f64> = pairs.iter().filter(|(_, p)| p.class == c).map(|(_, p)| p.error()).collect();
                (c, (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64))
            })
            .collect();
        MetricsReport {
            map: mean_ap(&ap),
            ap,
            class_distance_error,
            mean_distance_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
            cdf: error_cdf(&errors),
            seg: self.confusion.scores(),
            images: self.images,
            gt_boxes: self.gts.len(),
            detections: self.detections.len(),
            depth_pairs: pairs.len(),
        }
    }
}
