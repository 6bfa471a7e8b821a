use std::f64::consts::SQRT_2;

use super::{GeometryError, OrientedBox};

/// Axis-aligned reference box tied to one feature-map cell of one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Pyramid level, 1-based (P1 is 1).
    pub level: usize,
    /// `(u, v)` = (column, row) in the level's feature map.
    pub cell: (usize, usize),
}

impl Anchor {
    pub fn as_box(&self) -> OrientedBox {
        OrientedBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            theta: 0.0,
        }
    }
}

/// Anchor layout over the pyramid. Sizes are in grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    pub cell_size: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(stride, basis size)` per level, P1 first.
    pub levels: Vec<(usize, f64)>,
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
}

impl PyramidConfig {
    /// Strides 2/4/8/16 with basis sizes 8/16/32/64 cells, ratios 1:2, 1:1,
    /// 2:1 and scales 1, sqrt 2.
    pub fn standard(cell_size: f64, grid_h: usize, grid_w: usize) -> Self {
        Self {
            cell_size,
            grid_h,
            grid_w,
            levels: vec![(2, 8.0), (4, 16.0), (8, 32.0), (16, 64.0)],
            ratios: vec![0.5, 1.0, 2.0],
            scales: vec![1.0, SQRT_2],
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Feature-map size `(rows, cols)` of a 1-based level.
    pub fn level_dims(&self, level: usize) -> Result<(usize, usize), GeometryError> {
        let &(stride, _) = self
            .levels
            .get(level.wrapping_sub(1))
            .ok_or(GeometryError::UnknownLevel(level))?;
        Ok((self.grid_h / stride, self.grid_w / stride))
    }

    /// `(w, h)` in cells for each anchor slot of a level, in slot order
    /// (ratio-major, then scale).
    pub fn slot_sizes(&self, level: usize) -> Result<Vec<(f64, f64)>, GeometryError> {
        let &(_, basis) = self
            .levels
            .get(level.wrapping_sub(1))
            .ok_or(GeometryError::UnknownLevel(level))?;
        let mut out = Vec::with_capacity(self.anchors_per_cell());
        for &r in &self.ratios {
            for &s in &self.scales {
                out.push((basis * s * r.sqrt(), basis * s / r.sqrt()));
            }
        }
        Ok(out)
    }

    /// All anchors of a level ordered by `((v * cols) + u) * A + slot`,
    /// matching the channel layout of the detection head.
    pub fn level_anchors(&self, level: usize) -> Result<Vec<Anchor>, GeometryError> {
        let (rows, cols) = self.level_dims(level)?;
        let stride = self.levels[level - 1].0 as f64;
        let sizes = self.slot_sizes(level)?;
        let cs = self.cell_size;
        let (x0, y0) = (-(self.grid_w as f64) * cs / 2.0, -(self.grid_h as f64) * cs / 2.0);
        let mut out = Vec::with_capacity(rows * cols * sizes.len());
        for v in 0..rows {
            for u in 0..cols {
                let x = x0 + (u as f64 + 0.5) * stride * cs;
                let y = y0 + (v as f64 + 0.5) * stride * cs;
                for &(w, h) in &sizes {
                    out.push(Anchor {
                        x,
                        y,
                        w: w * cs,
                        h: h * cs,
                        level,
                        cell: (u, v),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Anchors of every level, concatenated P1 first.
    pub fn all_anchors(&self) -> Vec<Vec<Anchor>> {
        (1..=self.num_levels())
            .map(|l| self.level_anchors(l).expect("level in range"))
            .collect()
    }
}
