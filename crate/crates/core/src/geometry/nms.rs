use super::{rotated_iou, GeometryError, OrientedBox};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub class_id: usize,
    pub score: f64,
}

/// Indices of `dets` sorted by descending score, ties by lower index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy class-aware non-maximum suppression. A detection is dropped when
/// its IoU with an already kept detection of the same class reaches
/// `iou_threshold`. The result is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, GeometryError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(GeometryError::Threshold(iou_threshold));
    }
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && rotated_iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    Ok(kept)
}
