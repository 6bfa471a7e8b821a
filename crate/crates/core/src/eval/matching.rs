use crate::geometry::{rotated_iou, score_order, Detection, OrientedBox};

/// Ground truth as seen by the matcher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalGt {
    pub bbox: OrientedBox,
    /// `None` marks a don't-care region that absorbs detections of any class.
    pub class: Option<usize>,
    /// Counted in recall. Non-counted boxes of a class absorb one match each.
    pub care: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched a don't-care box: neither TP nor FP.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matches {
    /// One flag per detection, in input order.
    pub flags: Vec<MatchFlag>,
    /// Ground-truth index of each matched detection.
    pub gt: Vec<Option<usize>>,
    /// Number of counted ground truths.
    pub num_gt: usize,
}

/// Greedy matching in descending score order. `affinity` returns a match
/// quality (higher is better) or `None` when the pair does not qualify.
/// Counted gts are preferred, then unmatched non-counted gts of the class,
/// then don't-care regions. Ties go to the lower gt index.
pub fn greedy_match(
    dets: &[Detection],
    gts: &[EvalGt],
    affinity: impl Fn(&Detection, &EvalGt) -> Option<f64>,
) -> Matches {
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::Fp; dets.len()];
    let mut gt_of = vec![None; dets.len()];
    for di in score_order(dets) {
        let d = &dets[di];
        let best = |pred: &dyn Fn(usize, &EvalGt) -> bool| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if !pred(gi, g) {
                    continue;
                }
                if let Some(a) = affinity(d, g) {
                    if best.is_none_or(|(_, b)| a > b) {
                        best = Some((gi, a));
                    }
                }
            }
            best.map(|b| b.0)
        };
        let same = |g: &EvalGt| g.class == Some(d.class_id);
        if let Some(gi) = best(&|gi, g| g.care && same(g) && !taken[gi]) {
            taken[gi] = true;
            flags[di] = MatchFlag::Tp;
            gt_of[di] = Some(gi);
        } else if let Some(gi) = best(&|gi, g| !g.care && same(g) && !taken[gi]) {
            taken[gi] = true;
            flags[di] = MatchFlag::Ignored;
            gt_of[di] = Some(gi);
        } else if let Some(gi) = best(&|_, g| g.class.is_none()) {
            flags[di] = MatchFlag::Ignored;
            gt_of[di] = Some(gi);
        }
    }
    Matches {
        flags,
        gt: gt_of,
        num_gt: gts.iter().filter(|g| g.care && g.class.is_some()).count(),
    }
}

/// Rotated-IoU matching at `iou_thr` (a pair qualifies at IoU >= thr).
pub fn match_by_iou(dets: &[Detection], gts: &[EvalGt], iou_thr: f64) -> Matches {
    greedy_match(dets, gts, |d, g| {
        let iou = rotated_iou(&d.bbox, &g.bbox);
        (iou >= iou_thr && iou > 0.0).then_some(iou)
    })
}

pub fn center_distance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Top-view center-distance matching (a pair qualifies at distance <= thr).
pub fn match_by_center_distance(dets: &[Detection], gts: &[EvalGt], d_thr: f64) -> Matches {
    greedy_match(dets, gts, |d, g| {
        let dist = center_distance(&d.bbox, &g.bbox);
        (dist <= d_thr).then_some(-dist)
    })
}
