use super::{GridError, GridSpec, PointCloud};

/// Fixed-point scale for intensity sums; integer accumulation keeps the
/// per-cell mean independent of point order.
const INTENSITY_SCALE: f64 = (1u64 << 32) as f64;

/// Channels 0–2: reflection count, height difference (max z − min z, zero
/// below two points) and mean intensity (zero for empty cells).
pub fn rasterize_points(pc: &PointCloud, spec: GridSpec) -> Result<[Vec<f32>; 3], GridError> {
    let n = spec.cells()?;
    let mut count = vec![0u32; n * n];
    let mut zmin = vec![f64::INFINITY; n * n];
    let mut zmax = vec![f64::NEG_INFINITY; n * n];
    let mut isum = vec![0u64; n * n];
    for p in &pc.points {
        let (Some(col), Some(row)) = (spec.cell_index(p.x, n), spec.cell_index(p.y, n)) else {
            continue;
        };
        let i = row * n + col;
        count[i] += 1;
        zmin[i] = zmin[i].min(p.z);
        zmax[i] = zmax[i].max(p.z);
        isum[i] += (p.intensity.clamp(0.0, 1.0) * INTENSITY_SCALE).round() as u64;
    }
    let mut c0 = vec![0.0f32; n * n];
    let mut c1 = vec![0.0f32; n * n];
    let mut c2 = vec![0.0f32; n * n];
    for i in 0..n * n {
        let k = count[i];
        c0[i] = k as f32;
        if k >= 2 {
            c1[i] = (zmax[i] - zmin[i]) as f32;
        }
        if k > 0 {
            c2[i] = (isum[i] as f64 / INTENSITY_SCALE / k as f64) as f32;
        }
    }
    Ok([c0, c1, c2])
}
