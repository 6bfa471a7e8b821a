#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use gridda::data::ObjectClass;
use gridda::eval::{evaluate_nuscenes_style, EvalConfig, EvalFrame, NuscenesReport};
use gridda::geometry::{Detection, OrientedBox};
use gridda::gridmap::{compose_gridmap, GridMap, GridSpec, Point, PointCloud, CH_OCCLUSION, CH_TRANSMISSION};
use rand::Rng;

// ---------- rotated IoU by rasterization ----------

/// Interval of x on the horizontal line at `y` covered by `b`, if any.
fn row_span(b: &OrientedBox, y: f64) -> Option<(f64, f64)> {
    let (s, c) = b.theta.sin_cos();
    let dy = y - b.y;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // |a X + k| <= r with X = x - cx, for the two box axes
    for (a, k, r) in [(c, dy * s, b.w / 2.0), (-s, dy * c, b.h / 2.0)] {
        if a.abs() < 1e-15 {
            if k.abs() > r {
                return None;
            }
            continue;
        }
        let (p, q) = ((-r - k) / a, (r - k) / a);
        lo = lo.max(p.min(q));
        hi = hi.min(p.max(q));
    }
    (lo <= hi).then_some((lo + b.x, hi + b.x))
}

/// IoU from counting pixel centres of an `n x n` raster laid over the union
/// bounding box of both boxes.
pub fn raster_iou(a: &OrientedBox, b: &OrientedBox, n: usize) -> f64 {
    let pts: Vec<[f64; 2]> = a.corners().into_iter().chain(b.corners()).collect();
    let x0 = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let y0 = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let count = |span: Option<(f64, f64)>| -> u64 {
        let Some((lo, hi)) = span else { return 0 };
        let first = ((lo - x0) / dx - 0.5).ceil().max(0.0);
        let last = ((hi - x0) / dx - 0.5).floor().min(n as f64 - 1.0);
        if last < first {
            0
        } else {
            (last - first) as u64 + 1
        }
    };
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for j in 0..n {
        let y = y0 + (j as f64 + 0.5) * dy;
        let (sa, sb) = (row_span(a, y), row_span(b, y));
        na += count(sa);
        nb += count(sb);
        if let (Some(p), Some(q)) = (sa, sb) {
            let (lo, hi) = (p.0.max(q.0), p.1.min(q.1));
            if lo <= hi {
                nab += count(Some((lo, hi)));
            }
        }
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

pub fn random_box<R: Rng>(rng: &mut R) -> OrientedBox {
    OrientedBox::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(0.3..6.0),
        rng.random_range(0.3..3.0),
        rng.random_range(-PI..PI),
    )
    .unwrap()
}

/// Pairs that mostly overlap, with occasional identical or distant partners.
pub fn random_pair<R: Rng>(rng: &mut R) -> (OrientedBox, OrientedBox) {
    let a = random_box(rng);
    let b = match rng.random_range(0..10) {
        0 => a,
        1 => OrientedBox {
            x: a.x + 20.0,
            ..random_box(rng)
        },
        2 => OrientedBox {
            theta: a.theta + PI,
            ..a
        },
        _ => random_box(rng),
    };
    (a, b)
}

// ---------- AP40 by brute force ----------

/// Walks every operating point of the score-sorted sequence and, for each of
/// the 40 recall positions, keeps the best precision among the points that
/// reach it.
pub fn ap40_oracle(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut pts = Vec::new();
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        pts.push((hits, hits as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 1..=40usize {
        let best = pts
            .iter()
            .filter(|(h, _)| h * 40 >= k * num_gt)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(100.0 / 40.0 * sum)
}

/// A random score-sorted TP/FP sequence with at most `num_gt` hits.
pub fn random_sequence<R: Rng>(rng: &mut R) -> (Vec<bool>, usize) {
    let num_gt = rng.random_range(1..30);
    let len = rng.random_range(0..60);
    let p = rng.random_range(0.0..1.0);
    let mut hits = 0;
    let tp = (0..len)
        .map(|_| {
            let t = hits < num_gt && rng.random_bool(p);
            hits += t as usize;
            t
        })
        .collect();
    (tp, num_gt)
}

// ---------- hand-traced rays ----------

/// Cell size 1 m over 8 m: the sensor at (0.5, 0.5) sits in column and row 4.
pub fn ray_grid() -> GridSpec {
    GridSpec::new(1.0, 8.0).unwrap()
}

pub struct RayFixture {
    pub name: &'static str,
    pub map: GridMap,
    /// `(row, col, transmission, occlusion)` for every cell with a nonzero value.
    pub expected: Vec<(usize, usize, f32, f32)>,
}

fn pt(x: f64, y: f64, z: f64) -> Point {
    Point { x, y, z, intensity: 0.5 }
}

pub fn ray_fixtures() -> Vec<RayFixture> {
    let spec = ray_grid();
    let mut out = Vec::new();

    // Along +x from grid (4.5, 4.5) to (6.5, 4.5): crosses columns 4 and 5,
    // reflects in 6, then column 7 spans t in [1.25, 1.75] where the line
    // z = 2 - t sits at 0.75 .. 0.25.
    let pc = PointCloud::new([pt(2.5, 0.5, 1.0)], [0.5, 0.5, 2.0]);
    out.push(RayFixture {
        name: "axis ray",
        map: compose_gridmap(&pc, spec).unwrap(),
        expected: vec![(4, 4, 1.0, 0.0), (4, 5, 1.0, 0.0), (4, 7, 0.0, 0.25)],
    });

    // Diagonal through cell corners: only (4,4) and (5,5) transmit, the
    // corner-touching neighbours stay empty. Beyond the reflection in (6,6)
    // the line z = 2 - 0.5 t over t in [1.25, 1.75] bottoms out at 1.125.
    let pc = PointCloud::new([pt(2.5, 2.5, 1.5)], [0.5, 0.5, 2.0]);
    out.push(RayFixture {
        name: "diagonal ray",
        map: compose_gridmap(&pc, spec).unwrap(),
        expected: vec![(4, 4, 1.0, 0.0), (5, 5, 1.0, 0.0), (7, 7, 0.0, 1.125)],
    });

    // A ray that reflects inside the sensor cell transmits nothing but still
    // shadows the cells beyond it, here up-left at a constant z = 2.
    let pc = PointCloud::new([pt(-1.5, 0.5, 2.0), pt(0.25, 0.75, 2.0)], [0.5, 0.5, 2.0]);
    out.push(RayFixture {
        name: "backward ray",
        // along -x: column 4, then 3, reflection in 2; columns 1 and 0 are
        // shadowed by a horizontal line at z = 2
        map: compose_gridmap(&pc, spec).unwrap(),
        expected: vec![
            (4, 4, 1.0, 0.0),
            (4, 3, 1.0, 0.0),
            (4, 1, 0.0, 2.0),
            (4, 0, 0.0, 2.0),
            (5, 3, 0.0, 2.0),
            (6, 2, 0.0, 2.0),
            (7, 1, 0.0, 2.0),
        ],
    });
    out
}

/// Differences between a fixture and the mapper output, empty when they match.
pub fn ray_mismatches(f: &RayFixture) -> Vec<String> {
    let n = f.map.width;
    let mut bad = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let (t, o) = f
                .expected
                .iter()
                .find(|e| e.0 == r && e.1 == c)
                .map(|e| (e.2, e.3))
                .unwrap_or((0.0, 0.0));
            let got = (f.map.at(CH_TRANSMISSION, r, c), f.map.at(CH_OCCLUSION, r, c));
            if got != (t, o) {
                bad.push(format!("{} cell ({r},{c}): got {got:?}, want {:?}", f.name, (t, o)));
            }
        }
    }
    bad
}

/// Random cloud with some returns outside the extent; the second value is
/// the number inside `[-E/2, E/2)` in both axes.
pub fn random_cloud<R: Rng>(rng: &mut R, spec: GridSpec, n: usize) -> (PointCloud, usize) {
    let h = spec.half_extent();
    let pts: Vec<Point> = (0..n)
        .map(|_| pt(rng.random_range(-1.3 * h..1.3 * h), rng.random_range(-1.3 * h..1.3 * h), rng.random_range(0.0..3.0)))
        .collect();
    let inside = pts.iter().filter(|p| (-h..h).contains(&p.x) && (-h..h).contains(&p.y)).count();
    (PointCloud::new(pts, [0.0, 0.0, 1.8]), inside)
}

// ---------- KITTI fixture ----------

/// Lidar x forward, y left, z up; camera x right, y down, z forward, offset
/// by (0, -0.08, -0.27) in camera coordinates. Rectification is the identity.
pub const TR_VELO_TO_CAM: [f64; 12] = [0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27];

pub struct KittiObject {
    pub kind: &'static str,
    /// Camera-frame centre of the bottom face and rotation about camera y.
    pub loc: [f64; 3],
    pub ry: f64,
    /// KITTI height, width, length.
    pub hwl: [f64; 3],
}

impl KittiObject {
    /// Expected top-view box, worked out by hand from the fixed calibration:
    /// lidar x = z_c + 0.27, lidar y = -x_c, and the heading (cos ry, 0,
    /// -sin ry) in the camera frame becomes yaw -ry - pi/2 in the lidar frame.
    pub fn expected(&self) -> (f64, f64, f64, f64, f64) {
        (self.loc[2] + 0.27, -self.loc[0], self.hwl[2], self.hwl[1], -self.ry - PI / 2.0)
    }

    fn line(&self) -> String {
        let [h, w, l] = self.hwl;
        let [x, y, z] = self.loc;
        format!("{} 0.00 0 0.0 100.0 100.0 200.0 200.0 {h} {w} {l} {x} {y} {z} {}", self.kind, self.ry)
    }
}

pub fn kitti_objects() -> Vec<KittiObject> {
    vec![
        KittiObject { kind: "Car", loc: [-3.2, 1.65, 12.4], ry: 0.3, hwl: [1.5, 1.7, 4.1] },
        KittiObject { kind: "Pedestrian", loc: [2.05, 1.7, 7.75], ry: -1.2, hwl: [1.8, 0.6, 0.9] },
        KittiObject { kind: "Cyclist", loc: [5.5, 1.6, 20.125], ry: 2.9, hwl: [1.7, 0.7, 1.8] },
        KittiObject { kind: "Car", loc: [0.3, 1.7, 25.0], ry: -3.0, hwl: [1.4, 1.6, 3.8] },
    ]
}

/// Writes `velodyne/`, `label_2/` and `calib/` for frame 000000 under `root`
/// (plus a `Misc` line that ingestion must ignore) and returns the three dirs.
pub fn write_kitti_fixture(root: &Path) -> [PathBuf; 3] {
    let dirs = ["velodyne", "label_2", "calib"].map(|d| root.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).unwrap();
    }
    let mut bin = Vec::new();
    for p in [[5.0f32, 1.0, -1.5, 0.3], [12.0, -3.0, -1.0, 0.7], [40.0, 2.0, 0.2, 0.1]] {
        for v in p {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dirs[0].join("000000.bin"), bin).unwrap();
    let mut labels: Vec<String> = kitti_objects().iter().map(KittiObject::line).collect();
    labels.push("Misc 0.00 0 0.0 0 0 10 10 1.0 1.0 1.0 1.0 1.0 10.0 0.0".into());
    std::fs::write(dirs[1].join("000000.txt"), labels.join("\n") + "\n").unwrap();
    let tr: Vec<String> = TR_VELO_TO_CAM.iter().map(|v| v.to_string()).collect();
    let calib = format!(
        "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: {}\n",
        tr.join(" ")
    );
    std::fs::write(dirs[2].join("000000.txt"), calib).unwrap();
    dirs
}

pub fn angle_gap_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

// ---------- center-distance metrics ----------

/// Five frames of three cars each, with one detection per car produced by
/// `f` from the gt box.
pub fn nuscenes_fixture(f: impl Fn(OrientedBox) -> OrientedBox) -> NuscenesReport {
    use gridda::data::Label;
    let frames: Vec<EvalFrame> = (0..5)
        .map(|i| {
            let gts: Vec<OrientedBox> = (0..3)
                .map(|j| OrientedBox::new(j as f64 * 12.0 - 12.0, i as f64 * 3.0, 4.0, 1.8, 0.2 * j as f64).unwrap())
                .collect();
            EvalFrame {
                dets: gts
                    .iter()
                    .enumerate()
                    .map(|(j, &b)| Detection {
                        bbox: f(b),
                        class_id: 0,
                        score: 0.9 - 0.1 * j as f64,
                    })
                    .collect(),
                labels: gts
                    .iter()
                    .map(|&b| Label {
                        class: ObjectClass::Car,
                        bbox: b,
                        difficulty: None,
                    })
                    .collect(),
            }
        })
        .collect();
    evaluate_nuscenes_style(&frames, &EvalConfig::default()).unwrap()
}
