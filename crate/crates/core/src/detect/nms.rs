use super::codec::Detection;

/// Greedy per-class suppression in descending score order (ties by input
/// index), keeping at most `top_k` detections overall.
pub fn nms(detections: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
