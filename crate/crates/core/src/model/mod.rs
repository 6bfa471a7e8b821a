//! Single-stage detector: depthwise stem, residual backbone, FPN over P1-P4
//! and a detection head shared by every pyramid level.

mod checkpoint;
mod forward;
pub(crate) mod init;
mod predict;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{forward, head_forward, FeaturePyramid, ForwardOutput, HeadOutputs, Mode, NormStats};
pub use init::{init_model, DetectorModel};
pub use predict::{decode_detections, predict, PredictConfig};

use crate::autodiff::AutodiffError;
use crate::geometry::GeometryError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} channels, model expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("input size {h}x{w} is not a multiple of 16")]
    InputSize { h: usize, w: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Group,
    Batch,
    None,
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "group" => Ok(Self::Group),
            "batch" => Ok(Self::Batch),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown norm `{s}` (expected group, batch or none)")),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Group => "group",
            Self::Batch => "batch",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub fpn_width: usize,
    pub head_convs: usize,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    pub norm: NormKind,
    pub groups: usize,
    /// Fixed per-channel scale applied to the raw grid map.
    pub input_scale: Vec<f64>,
    /// Prior foreground probability used to initialise the classification bias.
    pub prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: crate::gridmap::NUM_CHANNELS,
            widths: [16, 32, 64, 128],
            blocks: [2, 2, 2, 2],
            fpn_width: 64,
            head_convs: 2,
            num_classes: 3,
            anchors_per_cell: 6,
            norm: NormKind::Group,
            groups: 8,
            input_scale: vec![0.1, 1.0, 1.0, 0.1, 1.0],
            prior: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.widths.contains(&0) || self.fpn_width == 0 {
            return bad(format!("widths must be positive: {:?} / fpn {}", self.widths, self.fpn_width));
        }
        if self.blocks.contains(&0) {
            return bad(format!("each stage needs at least one block: {:?}", self.blocks));
        }
        if self.num_classes == 0 || self.anchors_per_cell == 0 || self.in_channels == 0 {
            return bad("classes, anchors and input channels must be positive".into());
        }
        if self.input_scale.len() != self.in_channels {
            return bad(format!(
                "input_scale has {} entries for {} channels",
                self.input_scale.len(),
                self.in_channels
            ));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return bad(format!("prior {} outside (0, 1)", self.prior));
        }
        if self.norm == NormKind::Group {
            for c in self.widths.iter().chain([&self.fpn_width]) {
                if c % self.norm_groups(*c) != 0 {
                    return bad(format!("{c} channels not divisible into groups"));
                }
            }
        }
        Ok(())
    }

    /// Group count for a layer of `c` channels: the configured count, or
    /// fewer when the layer is narrower.
    pub fn norm_groups(&self, c: usize) -> usize {
        self.groups.min(c).max(1)
    }
}

#[cfg(test)]
mod tests;
