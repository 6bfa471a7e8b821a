//! Five-channel top-view grid maps built from single-frame point clouds.
//!
//! Channel layout: 0 reflection count, 1 height difference, 2 mean intensity,
//! 3 transmission count, 4 occlusion height. Cell `(row, col)` covers
//! `x ∈ [-E/2 + col·s, -E/2 + (col+1)·s)` and the same in `y` for the row,
//! with `E` the extent and `s` the cell size.

mod io;
mod raster;
mod raycast;

pub use io::{decode_gridmap, encode_gridmap, read_gridmap, write_gridmap};
pub use raster::rasterize_points;
pub use raycast::raycast_channels;

use std::path::PathBuf;

pub const NUM_CHANNELS: usize = 5;
pub const CH_COUNT: usize = 0;
pub const CH_HEIGHT_DIFF: usize = 1;
pub const CH_INTENSITY: usize = 2;
pub const CH_TRANSMISSION: usize = 3;
pub const CH_OCCLUSION: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid spec: extent {extent} m is not a positive multiple of cell size {cell_size} m")]
    InvalidSpec { cell_size: f64, extent: f64 },
    #[error("sensor origin ({x}, {y}) lies outside the grid")]
    SensorOutside { x: f64, y: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub sensor_origin: [f64; 3],
}

impl PointCloud {
    /// Builds a cloud, dropping non-finite points and clamping intensities to `[0, 1]`.
    pub fn new(points: impl IntoIterator<Item = Point>, sensor_origin: [f64; 3]) -> Self {
        let points = points
            .into_iter()
            .filter(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
            .map(|p| Point {
                intensity: if p.intensity.is_finite() {
                    p.intensity.clamp(0.0, 1.0)
                } else {
                    0.0
                },
                ..p
            })
            .collect();
        Self { points, sensor_origin }
    }
}

/// Square ego-centred raster geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub cell_size: f64,
    pub extent: f64,
}

impl Default for GridSpec {
    /// 15 cm cells over 60 m × 60 m (400 × 400 cells).
    fn default() -> Self {
        Self {
            cell_size: 0.15,
            extent: 60.0,
        }
    }
}

impl GridSpec {
    pub fn new(cell_size: f64, extent: f64) -> Result<Self, GridError> {
        let spec = Self { cell_size, extent };
        spec.cells()?;
        Ok(spec)
    }

    /// Cells per side.
    pub fn cells(&self) -> Result<usize, GridError> {
        let err = GridError::InvalidSpec {
            cell_size: self.cell_size,
            extent: self.extent,
        };
        if !(self.cell_size > 0.0 && self.extent > 0.0) {
            return Err(err);
        }
        let ratio = self.extent / self.cell_size;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
            return Err(err);
        }
        Ok(n as usize)
    }

    pub fn half_extent(&self) -> f64 {
        self.extent / 2.0
    }

    /// Continuous grid coordinate of a metric coordinate along one axis.
    pub fn to_grid(&self, v: f64) -> f64 {
        (v + self.half_extent()) / self.cell_size
    }

    /// Half-open cell index along one axis; `None` outside the extent.
    pub fn cell_index(&self, v: f64, n: usize) -> Option<usize> {
        let g = self.to_grid(v).floor();
        (g >= 0.0 && g < n as f64).then_some(g as usize)
    }

    /// Metric centre of a cell index along one axis.
    pub fn cell_center(&self, i: usize) -> f64 {
        -self.half_extent() + (i as f64 + 0.5) * self.cell_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub spec: GridSpec,
    pub height: usize,
    pub width: usize,
    /// `NUM_CHANNELS × height × width`, channel-major then row-major.
    pub data: Vec<f32>,
}

impl GridMap {
    pub fn zeros(spec: GridSpec) -> Result<Self, GridError> {
        let n = spec.cells()?;
        Ok(Self {
            spec,
            height: n,
            width: n,
            data: vec![0.0; NUM_CHANNELS * n * n],
        })
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[channel * hw..(channel + 1) * hw]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[channel * hw..(channel + 1) * hw]
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// Mirror image under `x -> -x` (columns reversed).
    pub fn mirror_x(&self) -> Self {
        let mut out = self.clone();
        for c in 0..NUM_CHANNELS {
            for r in 0..self.height {
                for col in 0..self.width {
                    out.data[(c * self.height + r) * self.width + col] =
                        self.data[(c * self.height + r) * self.width + (self.width - 1 - col)];
                }
            }
        }
        out
    }
}

/// Builds the grid map of one or more clouds. Points of every cloud are
/// rasterized together; each cloud is ray-cast from its own sensor origin.
pub fn compose_gridmap_multi(clouds: &[PointCloud], spec: GridSpec) -> Result<GridMap, GridError> {
    let mut map = GridMap::zeros(spec)?;
    let all_points: Vec<Point> = clouds.iter().flat_map(|c| c.points.iter().copied()).collect();
    let merged = PointCloud {
        points: all_points,
        sensor_origin: clouds.first().map_or([0.0; 3], |c| c.sensor_origin),
    };
    let [count, hdiff, inten] = rasterize_points(&merged, spec)?;
    map.plane_mut(CH_COUNT).copy_from_slice(&count);
    map.plane_mut(CH_HEIGHT_DIFF).copy_from_slice(&hdiff);
    map.plane_mut(CH_INTENSITY).copy_from_slice(&inten);
    let n = map.height;
    let mut trans = vec![0.0f32; n * n];
    let mut occ_min = vec![f64::INFINITY; n * n];
    for cloud in clouds {
        raycast::accumulate(cloud, spec, n, &mut trans, &mut occ_min)?;
    }
    map.plane_mut(CH_TRANSMISSION).copy_from_slice(&trans);
    let occ = map.plane_mut(CH_OCCLUSION);
    for (o, m) in occ.iter_mut().zip(&occ_min) {
        *o = if m.is_finite() { *m as f32 } else { 0.0 };
    }
    Ok(map)
}

/// Single-cloud grid map: channels 0–2 from rasterization, 3–4 from ray casting.
pub fn compose_gridmap(pc: &PointCloud, spec: GridSpec) -> Result<GridMap, GridError> {
    compose_gridmap_multi(std::slice::from_ref(pc), spec)
}
