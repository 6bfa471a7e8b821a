//! Detection benchmarks: rotated-IoU AP over difficulty bands and
//! center-distance mAP with translation/scale errors.

mod ap;
mod matching;

pub use ap::{ap40, PrCurve, RECALL_POSITIONS};
pub use matching::{center_distance, greedy_match, match_by_center_distance, match_by_iou, EvalGt, MatchFlag, Matches};

use crate::data::{Difficulty, Label, ObjectClass};
use crate::geometry::{Detection, OrientedBox};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// IoU thresholds per detected class id, ascending.
    pub iou_thresholds: Vec<Vec<f64>>,
    /// Center-distance thresholds in meters, ascending.
    pub distance_thresholds: Vec<f64>,
    /// Distance threshold whose true positives feed ATE and ASE.
    pub tp_distance: f64,
    pub difficulties: Vec<Difficulty>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![vec![0.5, 0.7], vec![0.5], vec![0.5]],
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_distance: 2.0,
            difficulties: Difficulty::ALL.to_vec(),
        }
    }
}

fn ascending_positive(v: &[f64]) -> bool {
    v.iter().all(|&t| t > 0.0 && t.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.len() != ObjectClass::DETECTED.len() {
            return Err(EvalError::Config(format!(
                "need IoU thresholds for {} classes",
                ObjectClass::DETECTED.len()
            )));
        }
        for t in &self.iou_thresholds {
            if !ascending_positive(t) || t.iter().any(|&x| x > 1.0) {
                return Err(EvalError::Config(format!("IoU thresholds {t:?} must be ascending in (0, 1]")));
            }
        }
        if !ascending_positive(&self.distance_thresholds) || self.distance_thresholds.is_empty() {
            return Err(EvalError::Config("distance thresholds must be positive and ascending".into()));
        }
        if !(self.tp_distance > 0.0) {
            return Err(EvalError::Config("tp distance must be positive".into()));
        }
        Ok(())
    }
}

/// Detections and annotations of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub labels: Vec<Label>,
}

/// Ground truth of one class at one difficulty: boxes in the band (or any
/// easier band) count, the rest of the class and don't-care regions absorb.
pub fn kitti_gts(labels: &[Label], class_id: usize, difficulty: Difficulty) -> Vec<EvalGt> {
    labels
        .iter()
        .filter_map(|l| match l.class {
            ObjectClass::DontCare => Some(EvalGt {
                bbox: l.bbox,
                class: None,
                care: false,
            }),
            c if c.id() == Some(class_id) => Some(EvalGt {
                bbox: l.bbox,
                class: Some(class_id),
                care: l.difficulty.is_some_and(|d| d <= difficulty),
            }),
            _ => None,
        })
        .collect()
}

/// Every annotated box of the class counts regardless of difficulty.
pub fn all_gts(labels: &[Label], class_id: usize) -> Vec<EvalGt> {
    labels
        .iter()
        .filter_map(|l| match l.class {
            ObjectClass::DontCare => Some(EvalGt {
                bbox: l.bbox,
                class: None,
                care: false,
            }),
            c if c.id() == Some(class_id) => Some(EvalGt {
                bbox: l.bbox,
                class: Some(class_id),
                care: true,
            }),
            _ => None,
        })
        .collect()
}

/// Result of one pooled sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub curve: PrCurve,
    /// `(detection, gt)` of every true positive.
    pub tps: Vec<(OrientedBox, OrientedBox)>,
}

/// Matches every frame, pools the non-ignored detections of `class_id`
/// across frames by score and computes AP.
pub fn pooled_sweep(
    frames: &[EvalFrame],
    class_id: usize,
    gts_of: impl Fn(&[Label]) -> Vec<EvalGt>,
    matcher: impl Fn(&[Detection], &[EvalGt]) -> Matches,
) -> Sweep {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    let mut tps = Vec::new();
    for f in frames {
        let dets: Vec<Detection> = f.dets.iter().filter(|d| d.class_id == class_id).copied().collect();
        let gts = gts_of(&f.labels);
        let m = matcher(&dets, &gts);
        num_gt += m.num_gt;
        for (i, flag) in m.flags.iter().enumerate() {
            match flag {
                MatchFlag::Tp => {
                    scored.push((dets[i].score, true));
                    tps.push((dets[i].bbox, gts[m.gt[i].expect("tp has a gt")].bbox));
                }
                MatchFlag::Fp => scored.push((dets[i].score, false)),
                MatchFlag::Ignored => {}
            }
        }
    }
    // Stable: equal scores keep frame order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
    Sweep {
        ap: ap40(&flags, num_gt),
        num_gt,
        curve: PrCurve::from_sequence(&flags, num_gt),
        tps,
    }
}

pub fn kitti_sweep(frames: &[EvalFrame], class_id: usize, difficulty: Difficulty, iou_thr: f64) -> Sweep {
    pooled_sweep(
        frames,
        class_id,
        |l| kitti_gts(l, class_id, difficulty),
        |d, g| match_by_iou(d, g, iou_thr),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApEntry {
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub iou_thr: f64,
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KittiReport {
    pub entries: Vec<ApEntry>,
}

impl KittiReport {
    pub fn get(&self, class: ObjectClass, difficulty: Difficulty, iou_thr: f64) -> Option<&ApEntry> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.difficulty == difficulty && (e.iou_thr - iou_thr).abs() < 1e-9)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class\tdifficulty\tiou\tap\tnum_gt\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{:.2}\t{}\t{}\n",
                e.class.name(),
                e.difficulty.name(),
                e.iou_thr,
                fmt_opt(e.ap, 2),
                e.num_gt
            ));
        }
        s
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// AP per class, difficulty and IoU threshold, pooled over frames.
pub fn evaluate_kitti_style(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<KittiReport, EvalError> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for (ci, class) in ObjectClass::DETECTED.iter().enumerate() {
        for &difficulty in &cfg.difficulties {
            for &iou_thr in &cfg.iou_thresholds[ci] {
                let s = kitti_sweep(frames, ci, difficulty, iou_thr);
                entries.push(ApEntry {
                    class: *class,
                    difficulty,
                    iou_thr,
                    ap: s.ap,
                    num_gt: s.num_gt,
                });
            }
        }
    }
    Ok(KittiReport { entries })
}

/// `1 - IoU` of two footprints after aligning centers and headings.
pub fn scale_error(det: &OrientedBox, gt: &OrientedBox) -> f64 {
    let inter = det.w.min(gt.w) * det.h.min(gt.h);
    let union = det.area() + gt.area() - inter;
    1.0 - inter / union
}

#[derive(Clone, Debug, PartialEq)]
pub struct NuscenesClass {
    pub class: ObjectClass,
    /// `(distance threshold, AP)`.
    pub ap: Vec<(f64, Option<f64>)>,
    pub map: Option<f64>,
    pub ate: Option<f64>,
    pub ase: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NuscenesReport {
    pub classes: Vec<NuscenesClass>,
    /// Means over classes that have a value.
    pub map: Option<f64>,
    pub ate: Option<f64>,
    pub ase: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl NuscenesReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class\tmAP\tATE\tASE\n");
        for c in &self.classes {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.class.name(),
                fmt_opt(c.map, 2),
                fmt_opt(c.ate, 3),
                fmt_opt(c.ase, 3)
            ));
        }
        s.push_str(&format!(
            "all\t{}\t{}\t{}\n",
            fmt_opt(self.map, 2),
            fmt_opt(self.ate, 3),
            fmt_opt(self.ase, 3)
        ));
        s
    }
}

/// Center-distance AP averaged over the distance thresholds, with ATE and
/// ASE over the true positives at `tp_distance`.
pub fn evaluate_nuscenes_style(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<NuscenesReport, EvalError> {
    cfg.validate()?;
    let mut classes = Vec::new();
    for (ci, class) in ObjectClass::DETECTED.iter().enumerate() {
        let sweep = |thr: f64| pooled_sweep(frames, ci, |l| all_gts(l, ci), |d, g| match_by_center_distance(d, g, thr));
        let ap: Vec<(f64, Option<f64>)> = cfg.distance_thresholds.iter().map(|&t| (t, sweep(t).ap)).collect();
        let map = if ap.iter().all(|a| a.1.is_some()) {
            mean(ap.iter().filter_map(|a| a.1))
        } else {
            None
        };
        let tp = sweep(cfg.tp_distance).tps;
        classes.push(NuscenesClass {
            class: *class,
            map,
            ate: mean(tp.iter().map(|(d, g)| center_distance(d, g))),
            ase: mean(tp.iter().map(|(d, g)| scale_error(d, g))),
            ap,
        });
    }
    Ok(NuscenesReport {
        map: mean(classes.iter().filter_map(|c| c.map)),
        ate: mean(classes.iter().filter_map(|c| c.ate)),
        ase: mean(classes.iter().filter_map(|c| c.ase)),
        classes,
    })
}

/// IoU thresholds 0.2, 0.3, ..., 0.9 of the AP-vs-IoU export.
pub fn sweep_thresholds() -> Vec<f64> {
    (2..=9).map(|k| k as f64 / 10.0).collect()
}

/// `(IoU threshold, AP)` for one class and difficulty.
pub fn ap_vs_iou(frames: &[EvalFrame], class_id: usize, difficulty: Difficulty) -> Vec<(f64, Option<f64>)> {
    sweep_thresholds()
        .into_iter()
        .map(|t| (t, kitti_sweep(frames, class_id, difficulty, t).ap))
        .collect()
}

/// Tab-separated `iou\tap` table.
pub fn ap_vs_iou_tsv(rows: &[(f64, Option<f64>)]) -> String {
    let mut s = String::from("iou\tap\n");
    for (t, ap) in rows {
        s.push_str(&format!("{t:.1}\t{}\n", fmt_opt(*ap, 2)));
    }
    s
}
