//! Samples, label and manifest files, the two-domain lidar simulator and
//! KITTI ingestion.

mod kitti;
mod labels;
mod sim;
mod synth;

pub use kitti::{ingest_kitti, parse_calib, parse_kitti_labels, read_velodyne, KittiCalib, KittiFrame, KITTI_MOUNT_HEIGHT};
pub use labels::{format_labels, parse_labels, read_labels, write_labels};
pub use sim::{sample_scene, simulate_lidar, DomainSpec, ScenePrior, SceneObject, SceneSpec, SensorPose, Surface};
pub use synth::{difficulty_of, synth_dataset, synth_sample, SynthConfig};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::geometry::{GeometryError, OrientedBox};
use crate::gridmap::{read_gridmap, GridError, GridMap};
use crate::losses::DomainTag;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: calibration: {detail}")]
    Calib { path: String, detail: String },
    #[error("invalid data config: {0}")]
    Config(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    /// Region whose detections count neither as true nor false positives.
    DontCare,
}

impl ObjectClass {
    pub const DETECTED: [ObjectClass; 3] = [Self::Car, Self::Pedestrian, Self::Cyclist];

    /// Head class index; `None` for don't-care regions.
    pub fn id(self) -> Option<usize> {
        match self {
            Self::Car => Some(0),
            Self::Pedestrian => Some(1),
            Self::Cyclist => Some(2),
            Self::DontCare => None,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::DETECTED.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Pedestrian => "pedestrian",
            Self::Cyclist => "cyclist",
            Self::DontCare => "dontcare",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "car" => Some(Self::Car),
            "pedestrian" => Some(Self::Pedestrian),
            "cyclist" => Some(Self::Cyclist),
            "dontcare" => Some(Self::DontCare),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Self::Easy, Self::Moderate, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Moderate => "moderate",
            Self::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Self::Easy),
            "moderate" => Some(Self::Moderate),
            "hard" => Some(Self::Hard),
            _ => None,
        }
    }
}

/// One annotated top-view box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub class: ObjectClass,
    pub bbox: OrientedBox,
    /// Evaluation band; `None` when the object falls outside every band.
    pub difficulty: Option<Difficulty>,
}

/// One training or evaluation example.
///
/// Label access on target-domain samples is counted so that training code
/// can prove it never looked at target annotations.
#[derive(Debug)]
pub struct Sample {
    pub gridmap: GridMap,
    labels: Vec<Label>,
    pub domain: DomainTag,
    target_reads: AtomicUsize,
}

impl Clone for Sample {
    fn clone(&self) -> Self {
        Self::new(self.gridmap.clone(), self.labels.clone(), self.domain)
    }
}

impl Sample {
    pub fn new(gridmap: GridMap, labels: Vec<Label>, domain: DomainTag) -> Self {
        Self {
            gridmap,
            labels,
            domain,
            target_reads: AtomicUsize::new(0),
        }
    }

    pub fn labels(&self) -> &[Label] {
        if self.domain == DomainTag::Target {
            self.target_reads.fetch_add(1, Ordering::Relaxed);
        }
        &self.labels
    }

    /// How often the labels of a target-domain sample were read.
    pub fn target_label_reads(&self) -> usize {
        self.target_reads.load(Ordering::Relaxed)
    }

    /// Horizontally mirrored copy (x -> -x), boxes follow with theta -> pi - theta.
    pub fn mirrored(&self) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|l| Label {
                bbox: l.bbox.mirror_x(),
                ..*l
            })
            .collect();
        Self::new(self.gridmap.mirror_x(), labels, self.domain)
    }
}

pub fn domain_name(d: DomainTag) -> &'static str {
    match d {
        DomainTag::Source => "source",
        DomainTag::Target => "target",
    }
}

pub fn parse_domain(s: &str) -> Option<DomainTag> {
    match s {
        "source" | "0" => Some(DomainTag::Source),
        "target" | "1" => Some(DomainTag::Target),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub gridmap: PathBuf,
    pub labels: PathBuf,
    pub domain: DomainTag,
}

/// Sample list of one split. Relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn format(&self) -> String {
        let mut s = format!("# split={}\n", self.split);
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.gridmap.display(),
                e.labels.display(),
                domain_name(e.domain)
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.format()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut split = String::from("train");
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(s) = rest.trim().strip_prefix("split=") {
                    split = s.trim().to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |detail: String| DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated columns, got {}", cols.len())));
            }
            let domain = parse_domain(cols[2]).ok_or_else(|| parse_err(format!("unknown domain `{}`", cols[2])))?;
            entries.push(ManifestEntry {
                gridmap: cols[0].into(),
                labels: cols[1].into(),
                domain,
            });
        }
        Ok(Self { root, split, entries })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample, DataError> {
        let e = &self.entries[index];
        let map = read_gridmap(&self.resolve(&e.gridmap))?;
        let labels = read_labels(&self.resolve(&e.labels))?;
        Ok(Sample::new(map, labels, e.domain))
    }

    /// Loads every sample, in parallel.
    pub fn load_all(&self) -> Result<Vec<Sample>, DataError> {
        use rayon::prelude::*;
        (0..self.entries.len()).into_par_iter().map(|i| self.load_sample(i)).collect()
    }
}
