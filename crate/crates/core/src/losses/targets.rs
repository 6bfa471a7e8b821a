use super::LossError;
use crate::autodiff::{Scalar, Tensor};
use crate::geometry::{assign_targets, encode_box, rotated_iou, AnchorLabel, Anchor, OrientedBox, PyramidConfig};

/// Which dataset a training example comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    /// Domain label `d`: 0 for source, 1 for target.
    pub fn label(self) -> f64 {
        match self {
            Self::Source => 0.0,
            Self::Target => 1.0,
        }
    }
}

pub const IGNORE: i8 = -2;
pub const BACKGROUND: i8 = -1;

/// Compact anchor labels of one example, anchors of all levels concatenated
/// (P1 first).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    pub domain: DomainTag,
    /// Class id of positive anchors, [`BACKGROUND`] or [`IGNORE`].
    pub labels: Vec<i8>,
    /// `(anchor index, encoded box)` of each positive anchor.
    pub boxes: Vec<(usize, [f32; 6])>,
}

impl SampleTargets {
    pub fn num_pos(&self) -> usize {
        self.boxes.len()
    }
}

/// Assigns `gts` (box, class) to `anchors`. Anchors that overlap a don't-care
/// region by at least `bg_thr` and are not positive are ignored.
pub fn sample_targets(
    anchors: &[Anchor],
    gts: &[(OrientedBox, usize)],
    dont_care: &[OrientedBox],
    fg_thr: f64,
    bg_thr: f64,
    domain: DomainTag,
) -> Result<SampleTargets, LossError> {
    let boxes: Vec<OrientedBox> = gts.iter().map(|g| g.0).collect();
    let assigned = assign_targets(anchors, &boxes, fg_thr, bg_thr)?;
    let mut labels = Vec::with_capacity(anchors.len());
    let mut enc = Vec::with_capacity(assigned.num_pos);
    for (i, (label, anchor)) in assigned.labels.iter().zip(anchors).enumerate() {
        labels.push(match *label {
            AnchorLabel::Positive(gi) => {
                let t = encode_box(&gts[gi].0, anchor)?;
                enc.push((i, t.0.map(|v| v as f32)));
                gts[gi].1 as i8
            }
            AnchorLabel::Ignore => IGNORE,
            AnchorLabel::Negative => {
                let ab = anchor.as_box();
                if dont_care.iter().any(|d| rotated_iou(&ab, d) >= bg_thr) {
                    IGNORE
                } else {
                    BACKGROUND
                }
            }
        });
    }
    Ok(SampleTargets {
        domain,
        labels,
        boxes: enc,
    })
}

/// Dense targets of one pyramid level for a batch, laid out like the head
/// outputs: class channel `slot * K + k`, box channel `slot * 6 + j`.
#[derive(Clone, Debug)]
pub struct LevelTargets<S> {
    /// 1 for the matched class of a positive anchor, else 0.
    pub cls_target: Tensor<S>,
    /// Focal weighting `alpha_t`, 0 for ignored anchors.
    pub cls_weight: Tensor<S>,
    pub box_target: Tensor<S>,
    /// 1 on the six channels of each positive anchor.
    pub box_mask: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DetTargets<S> {
    pub levels: Vec<LevelTargets<S>>,
    pub num_pos: usize,
    pub domains: Vec<DomainTag>,
}

/// Expands compact per-example targets to dense tensors. `alpha` is the
/// positive-class focal weight (`None` weights everything by 1).
pub fn dense_targets<S: Scalar>(
    samples: &[&SampleTargets],
    pyramid: &PyramidConfig,
    num_classes: usize,
    alpha: Option<f64>,
) -> Result<DetTargets<S>, LossError> {
    let a_n = pyramid.anchors_per_cell();
    let n = samples.len();
    let (w_pos, w_neg) = match alpha {
        Some(a) => (S::of(a), S::of(1.0 - a)),
        None => (S::one(), S::one()),
    };
    let mut total = 0;
    let mut levels = Vec::with_capacity(pyramid.num_levels());
    let mut offsets = Vec::new();
    for l in 1..=pyramid.num_levels() {
        let (h, w) = pyramid.level_dims(l)?;
        offsets.push(total);
        total += h * w * a_n;
    }
    for s in samples {
        if s.labels.len() != total {
            return Err(LossError::Targets(format!("{} anchor labels for {total} anchors", s.labels.len())));
        }
    }
    for l in 1..=pyramid.num_levels() {
        let (h, w) = pyramid.level_dims(l)?;
        let hw = h * w;
        let (start, count) = (offsets[l - 1], hw * a_n);
        let kc = a_n * num_classes;
        let mut ct = vec![S::zero(); n * kc * hw];
        let mut cw = vec![S::zero(); n * kc * hw];
        let mut bt = vec![S::zero(); n * a_n * 6 * hw];
        let mut bm = vec![S::zero(); n * a_n * 6 * hw];
        for (b, s) in samples.iter().enumerate() {
            for (i, &lab) in s.labels[start..start + count].iter().enumerate() {
                let (cell, slot) = (i / a_n, i % a_n);
                for k in 0..num_classes {
                    let idx = (b * kc + slot * num_classes + k) * hw + cell;
                    if lab == IGNORE {
                        continue;
                    }
                    if lab >= 0 && lab as usize == k {
                        ct[idx] = S::one();
                        cw[idx] = w_pos;
                    } else {
                        cw[idx] = w_neg;
                    }
                }
            }
            for &(ai, enc) in &s.boxes {
                if ai < start || ai >= start + count {
                    continue;
                }
                let (cell, slot) = ((ai - start) / a_n, (ai - start) % a_n);
                for (j, &v) in enc.iter().enumerate() {
                    let idx = (b * a_n * 6 + slot * 6 + j) * hw + cell;
                    bt[idx] = S::of(v as f64);
                    bm[idx] = S::one();
                }
            }
        }
        let cls_shape = [n, kc, h, w];
        let box_shape = [n, a_n * 6, h, w];
        levels.push(LevelTargets {
            cls_target: Tensor::new(cls_shape.to_vec(), ct)?,
            cls_weight: Tensor::new(cls_shape.to_vec(), cw)?,
            box_target: Tensor::new(box_shape.to_vec(), bt)?,
            box_mask: Tensor::new(box_shape.to_vec(), bm)?,
        });
    }
    Ok(DetTargets {
        levels,
        num_pos: samples.iter().map(|s| s.num_pos()).sum(),
        domains: samples.iter().map(|s| s.domain).collect(),
    })
}
