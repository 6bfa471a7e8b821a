use super::{rotated_iou, Anchor, GeometryError, OrientedBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    pub num_pos: usize,
}

impl AssignmentResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive(g) => Some((i, *g)),
            _ => None,
        })
    }
}

/// Labels anchors by their best rotated IoU with the ground truth:
/// positive at `>= fg_thr`, negative below `bg_thr`, ignored in between.
/// Each ground-truth box that ends up without a positive then claims its
/// highest-IoU anchor, as long as that IoU is above zero.
pub fn assign_targets(
    anchors: &[Anchor],
    gts: &[OrientedBox],
    fg_thr: f64,
    bg_thr: f64,
) -> Result<AssignmentResult, GeometryError> {
    if anchors.is_empty() {
        return Err(GeometryError::NoAnchors);
    }
    if fg_thr < bg_thr {
        return Err(GeometryError::Thresholds { fg: fg_thr, bg: bg_thr });
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    // (anchor, iou) pairs with positive overlap, per gt
    let mut overlaps: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let ab = a.as_box();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let iou = rotated_iou(&ab, g);
            if iou > 0.0 {
                overlaps[gi].push((ai, iou));
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            labels[ai] = if iou >= fg_thr {
                AnchorLabel::Positive(gi)
            } else if iou < bg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
        }
    }

    let mut per_gt = vec![0usize; gts.len()];
    for l in &labels {
        if let AnchorLabel::Positive(g) = l {
            per_gt[*g] += 1;
        }
    }
    for gi in 0..gts.len() {
        if per_gt[gi] > 0 {
            continue;
        }
        let mut cands = std::mem::take(&mut overlaps[gi]);
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (ai, _) in cands {
            match labels[ai] {
                AnchorLabel::Positive(other) if per_gt[other] <= 1 => continue,
                AnchorLabel::Positive(other) => per_gt[other] -= 1,
                _ => {}
            }
            labels[ai] = AnchorLabel::Positive(gi);
            per_gt[gi] += 1;
            break;
        }
    }
    let num_pos = per_gt.iter().sum();
    Ok(AssignmentResult { labels, num_pos })
}
