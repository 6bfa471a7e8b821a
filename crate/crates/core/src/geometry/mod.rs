//! Rotated-box algebra: encoding, anchors, IoU, suppression and matching.

mod anchors;
mod assign;
mod boxes;
mod iou;
mod nms;

pub use anchors::{Anchor, PyramidConfig};
pub use assign::{assign_targets, AnchorLabel, AssignmentResult};
pub use boxes::{
    angle_diff_mod_pi, canonical_angle, decode_box, encode_box, BoxEncoding, OrientedBox, MAX_LOG_SCALE,
};
pub use iou::{intersection_area, rotated_iou};
pub use nms::{nms, score_order, Detection};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("box sides must be positive and finite (w = {w}, h = {h})")]
    InvalidBox { w: f64, h: f64 },
    #[error("unknown pyramid level P{0}")]
    UnknownLevel(usize),
    #[error("IoU threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("target assignment needs at least one anchor")]
    NoAnchors,
    #[error("foreground threshold {fg} below background threshold {bg}")]
    Thresholds { fg: f64, bg: f64 },
}
