use super::{GridError, GridSpec, PointCloud};

/// One cell visited by a ray, with the ray parameters at which it enters and
/// leaves the cell (`t = 1` is the reflection point).
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Visit {
    pub col: usize,
    pub row: usize,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Amanatides–Woo traversal of the 2-D ray `start + t * dir` (grid units)
/// from `t = 0` until it leaves the `n × n` grid. Corner crossings step both
/// axes at once, so cells the ray only touches at a corner are skipped.
pub(crate) fn traverse(start: [f64; 2], dir: [f64; 2], n: usize, mut visit: impl FnMut(Visit)) {
    let mut cell = [start[0].floor() as i64, start[1].floor() as i64];
    let mut step = [0i64; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for k in 0..2 {
        if dir[k] > 0.0 {
            step[k] = 1;
            t_max[k] = ((cell[k] + 1) as f64 - start[k]) / dir[k];
            t_delta[k] = 1.0 / dir[k];
        } else if dir[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (cell[k] as f64 - start[k]) / dir[k];
            t_delta[k] = -1.0 / dir[k];
        }
    }
    let inside = |c: [i64; 2]| c[0] >= 0 && c[1] >= 0 && c[0] < n as i64 && c[1] < n as i64;
    let mut t = 0.0;
    while inside(cell) {
        let t_next = t_max[0].min(t_max[1]);
        visit(Visit {
            col: cell[0] as usize,
            row: cell[1] as usize,
            t_enter: t,
            t_exit: t_next,
        });
        if !t_next.is_finite() {
            break;
        }
        for k in 0..2 {
            if t_max[k] == t_next {
                cell[k] += step[k];
                t_max[k] += t_delta[k];
            }
        }
        t = t_next;
    }
}

/// Adds transmissions and folds occlusion candidates (`occ_min`, infinite
/// where never shadowed) for every ray of one cloud.
pub(crate) fn accumulate(
    pc: &PointCloud,
    spec: GridSpec,
    n: usize,
    trans: &mut [f32],
    occ_min: &mut [f64],
) -> Result<(), GridError> {
    let [sx, sy, sz] = pc.sensor_origin;
    if spec.cell_index(sx, n).is_none() || spec.cell_index(sy, n).is_none() {
        return Err(GridError::SensorOutside { x: sx, y: sy });
    }
    let start = [spec.to_grid(sx), spec.to_grid(sy)];
    for p in &pc.points {
        let end = [spec.to_grid(p.x), spec.to_grid(p.y)];
        let dir = [end[0] - start[0], end[1] - start[1]];
        if dir[0] == 0.0 && dir[1] == 0.0 {
            continue;
        }
        let hit = (spec.cell_index(p.x, n), spec.cell_index(p.y, n));
        let dz = p.z - sz;
        let mut beyond = false;
        traverse(start, dir, n, |v| {
            if !beyond && (hit == (Some(v.col), Some(v.row)) || v.t_enter >= 1.0) {
                beyond = true;
                return;
            }
            let i = v.row * n + v.col;
            if !beyond {
                trans[i] += 1.0;
            } else {
                let z_in = sz + dz * v.t_enter;
                let z_out = sz + dz * v.t_exit;
                let cand = z_in.min(z_out).max(0.0);
                if cand < occ_min[i] {
                    occ_min[i] = cand;
                }
            }
        });
    }
    Ok(())
}

/// Channels 3–4: per-cell transmission count and minimum occlusion height.
/// Each ray adds one transmission to every cell it crosses before the cell of
/// its reflection; beyond that cell it follows the line sensor → point to the
/// grid border and offers each cell the lowest height of that line inside the
/// cell (clamped at 0). Cells never shadowed stay 0.
pub fn raycast_channels(pc: &PointCloud, spec: GridSpec) -> Result<[Vec<f32>; 2], GridError> {
    let n = spec.cells()?;
    let mut trans = vec![0.0f32; n * n];
    let mut occ_min = vec![f64::INFINITY; n * n];
    accumulate(pc, spec, n, &mut trans, &mut occ_min)?;
    let occ = occ_min
        .iter()
        .map(|m| if m.is_finite() { *m as f32 } else { 0.0 })
        .collect();
    Ok([trans, occ])
}
