use std::path::{Path, PathBuf};

use super::{io_err, write_labels, DataError, DatasetManifest, Difficulty, Label, ManifestEntry, ObjectClass};
use crate::geometry::OrientedBox;
use crate::gridmap::{compose_gridmap, write_gridmap, GridSpec, Point, PointCloud};
use crate::losses::DomainTag;

/// Height of the KITTI lidar above the road.
pub const KITTI_MOUNT_HEIGHT: f64 = 1.73;

type Mat3 = [[f64; 3]; 3];

/// Rectification and lidar-to-camera transforms of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiCalib {
    pub r0_rect: Mat3,
    /// `[R | t]` mapping lidar coordinates into the reference camera.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse(m: &Mat3) -> Option<Mat3> {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = c(k, r) / det;
        }
    }
    Some(inv)
}

impl KittiCalib {
    /// Rectified camera coordinates to lidar coordinates.
    pub fn rect_to_velo(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let r0i = inverse(&self.r0_rect)?;
        let ref_cam = mat_vec(&r0i, p);
        let rot: Mat3 = [0, 1, 2].map(|i| [self.tr_velo_to_cam[i][0], self.tr_velo_to_cam[i][1], self.tr_velo_to_cam[i][2]]);
        let t = [0, 1, 2].map(|i| self.tr_velo_to_cam[i][3]);
        let ri = inverse(&rot)?;
        Some(mat_vec(&ri, [ref_cam[0] - t[0], ref_cam[1] - t[1], ref_cam[2] - t[2]]))
    }

    /// Direction (no translation) from rectified camera to lidar coordinates.
    pub fn rect_dir_to_velo(&self, d: [f64; 3]) -> Option<[f64; 3]> {
        let r0i = inverse(&self.r0_rect)?;
        let rot: Mat3 = [0, 1, 2].map(|i| [self.tr_velo_to_cam[i][0], self.tr_velo_to_cam[i][1], self.tr_velo_to_cam[i][2]]);
        Some(mat_vec(&inverse(&rot)?, mat_vec(&r0i, d)))
    }
}

pub fn parse_calib(text: &str, path: &Path) -> Result<KittiCalib, DataError> {
    let err = |detail: String| DataError::Calib {
        path: path.display().to_string(),
        detail,
    };
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, vals)) = line.split_once(':') else { continue };
        let nums: Result<Vec<f64>, _> = vals.split_whitespace().map(str::parse::<f64>).collect();
        match key.trim() {
            "R0_rect" => {
                let v = nums.map_err(|e| err(format!("R0_rect: {e}")))?;
                if v.len() != 9 {
                    return Err(err(format!("R0_rect has {} values", v.len())));
                }
                r0 = Some([0, 1, 2].map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]));
            }
            "Tr_velo_to_cam" => {
                let v = nums.map_err(|e| err(format!("Tr_velo_to_cam: {e}")))?;
                if v.len() != 12 {
                    return Err(err(format!("Tr_velo_to_cam has {} values", v.len())));
                }
                tr = Some([0, 1, 2].map(|i| [v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]]));
            }
            _ => {}
        }
    }
    let calib = KittiCalib {
        r0_rect: r0.ok_or_else(|| err("missing R0_rect".into()))?,
        tr_velo_to_cam: tr.ok_or_else(|| err("missing Tr_velo_to_cam".into()))?,
    };
    if calib.rect_to_velo([0.0; 3]).is_none() {
        return Err(err("singular transform".into()));
    }
    Ok(calib)
}

/// Reads little-endian `(x, y, z, reflectance)` f32 records.
pub fn read_velodyne(path: &Path) -> Result<Vec<[f32; 4]>, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 16 != 0 {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| [0, 1, 2, 3].map(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"))))
        .collect())
}

fn kitti_difficulty(truncation: f64, occlusion: i64, bbox_height: f64) -> Option<Difficulty> {
    if bbox_height >= 40.0 && occlusion <= 0 && truncation <= 0.15 {
        Some(Difficulty::Easy)
    } else if bbox_height >= 25.0 && occlusion <= 1 && truncation <= 0.3 {
        Some(Difficulty::Moderate)
    } else if bbox_height >= 25.0 && occlusion <= 2 && truncation <= 0.5 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

/// Top-view labels of one KITTI label file in the lidar frame.
pub fn parse_kitti_labels(text: &str, calib: &KittiCalib, path: &Path) -> Result<Vec<Label>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 15 && tok.len() != 16 {
            return Err(err(format!("expected 15 fields, got {}", tok.len())));
        }
        let num = |k: usize| tok[k].parse::<f64>().map_err(|_| err(format!("field {} `{}` is not a number", k + 1, tok[k])));
        let class = match tok[0] {
            "Car" => ObjectClass::Car,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Cyclist" => ObjectClass::Cyclist,
            "DontCare" => ObjectClass::DontCare,
            _ => continue,
        };
        let (trunc, occ) = (num(1)?, num(2)? as i64);
        let bbox_h = num(7)? - num(5)?;
        let (w, l) = (num(9)?, num(10)?);
        let loc = [num(11)?, num(12)?, num(13)?];
        let ry = num(14)?;
        if class == ObjectClass::DontCare && !(w > 0.0 && l > 0.0) {
            // image-only region without a 3D extent
            continue;
        }
        let c = calib.rect_to_velo(loc).ok_or_else(|| err("singular calibration".into()))?;
        let d = calib
            .rect_dir_to_velo([ry.cos(), 0.0, -ry.sin()])
            .ok_or_else(|| err("singular calibration".into()))?;
        let bbox = OrientedBox::new(c[0], c[1], l, w, d[1].atan2(d[0])).map_err(|e| err(e.to_string()))?;
        out.push(Label {
            class,
            bbox,
            difficulty: if class == ObjectClass::DontCare {
                None
            } else {
                kitti_difficulty(trunc, occ, bbox_h)
            },
        });
    }
    Ok(out)
}

/// One ingested frame id with the reason it was skipped, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiFrame {
    pub id: String,
    pub skipped: Option<String>,
}

/// Converts every `velodyne/NNNNNN.bin` with matching label and calibration
/// files into a grid map and label file under `out`.
pub fn ingest_kitti(
    velodyne_dir: &Path,
    label_dir: &Path,
    calib_dir: &Path,
    spec: GridSpec,
    out: &Path,
    domain: DomainTag,
) -> Result<(DatasetManifest, Vec<KittiFrame>), DataError> {
    let mut ids: Vec<String> = std::fs::read_dir(velodyne_dir)
        .map_err(io_err(velodyne_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "bin")).then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();
    let dir = out.join("kitti");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut entries = Vec::new();
    let mut frames = Vec::new();
    for id in ids {
        let calib_path = calib_dir.join(format!("{id}.txt"));
        let result = (|| -> Result<ManifestEntry, DataError> {
            let text = std::fs::read_to_string(&calib_path).map_err(|_| DataError::Calib {
                path: calib_path.display().to_string(),
                detail: "missing".into(),
            })?;
            let calib = parse_calib(&text, &calib_path)?;
            let raw = read_velodyne(&velodyne_dir.join(format!("{id}.bin")))?;
            let lp = label_dir.join(format!("{id}.txt"));
            let labels = parse_kitti_labels(&std::fs::read_to_string(&lp).map_err(io_err(&lp))?, &calib, &lp)?;
            let pts = raw.iter().map(|p| Point {
                x: p[0] as f64,
                y: p[1] as f64,
                z: p[2] as f64 + KITTI_MOUNT_HEIGHT,
                intensity: p[3] as f64,
            });
            let map = compose_gridmap(&PointCloud::new(pts, [0.0, 0.0, KITTI_MOUNT_HEIGHT]), spec)?;
            let gm = PathBuf::from("kitti").join(format!("{id}.gmap"));
            let lb = PathBuf::from("kitti").join(format!("{id}.txt"));
            write_gridmap(&out.join(&gm), &map)?;
            write_labels(&out.join(&lb), &labels)?;
            Ok(ManifestEntry {
                gridmap: gm,
                labels: lb,
                domain,
            })
        })();
        match result {
            Ok(e) => {
                entries.push(e);
                frames.push(KittiFrame { id, skipped: None });
            }
            Err(e) => {
                log::warn!("skipping KITTI frame {id}: {e}");
                frames.push(KittiFrame {
                    id,
                    skipped: Some(e.to_string()),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        split: "kitti".into(),
        entries,
    };
    manifest.write(&out.join("kitti.tsv"))?;
    Ok((manifest, frames))
}
