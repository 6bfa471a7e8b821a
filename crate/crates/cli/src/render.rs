use gridda::data::{Label, ObjectClass};
use gridda::geometry::{Detection, OrientedBox};
use gridda::gridmap::{GridMap, CH_COUNT, NUM_CHANNELS};

pub type Rgb = [u8; 3];

pub const CAR: Rgb = [0, 200, 0];
pub const CYCLIST: Rgb = [154, 205, 50];
pub const PEDESTRIAN: Rgb = [255, 230, 0];
pub const DONT_CARE: Rgb = [128, 128, 128];
pub const EGO: Rgb = [40, 90, 255];

pub fn class_color(c: ObjectClass) -> Rgb {
    match c {
        ObjectClass::Car => CAR,
        ObjectClass::Cyclist => CYCLIST,
        ObjectClass::Pedestrian => PEDESTRIAN,
        ObjectClass::DontCare => DONT_CARE,
    }
}

/// RGB raster, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn get(&self, col: usize, row: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    fn put(&mut self, col: i64, row: i64, c: Rgb) {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            self.pixels[row as usize * self.width + col as usize] = c;
        }
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6 {} {} 255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Pixel `(col, row)` of a metric point. Columns follow x; rows run from +y
/// at the top to -y at the bottom.
pub fn pixel_of(map: &GridMap, x: f64, y: f64) -> (i64, i64) {
    let col = map.spec.to_grid(x).floor() as i64;
    let row = map.height as i64 - 1 - map.spec.to_grid(y).floor() as i64;
    (col, row)
}

/// Mean of the channels, each scaled to [0, 1] by its maximum over the map;
/// the count channel is log-scaled first.
fn gray(map: &GridMap) -> Vec<u8> {
    let hw = map.height * map.width;
    let mut acc = vec![0.0f64; hw];
    for ch in 0..NUM_CHANNELS {
        let plane = &map.data[ch * hw..(ch + 1) * hw];
        let f = |v: f32| {
            let v = (v as f64).max(0.0);
            if ch == CH_COUNT {
                v.ln_1p()
            } else {
                v
            }
        };
        let max = plane.iter().map(|&v| f(v)).fold(0.0, f64::max);
        if max > 0.0 {
            for (a, &v) in acc.iter_mut().zip(plane) {
                *a += f(v) / max;
            }
        }
    }
    acc.iter().map(|a| (255.0 * a / NUM_CHANNELS as f64).round() as u8).collect()
}

fn line(img: &mut Image, a: (i64, i64), b: (i64, i64), c: Rgb, dashed: bool) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let mut err = dx + dy;
    let mut i = 0usize;
    loop {
        if !dashed || (i / 2) % 2 == 0 {
            img.put(x, y, c);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        i += 1;
    }
}

fn outline(img: &mut Image, map: &GridMap, b: &OrientedBox, c: Rgb, dashed: bool) {
    let px: Vec<(i64, i64)> = b.corners().iter().map(|p| pixel_of(map, p[0], p[1])).collect();
    for k in 0..4 {
        line(img, px[k], px[(k + 1) % 4], c, dashed);
    }
}

/// One pixel per cell. Labels are drawn solid and detections dashed, both in
/// their class colour, with the ego position marked in the centre.
pub fn render(map: &GridMap, labels: &[Label], dets: &[Detection]) -> Image {
    let (w, h) = (map.width, map.height);
    let g = gray(map);
    let mut img = Image {
        width: w,
        height: h,
        pixels: vec![[0; 3]; w * h],
    };
    for r in 0..h {
        for c in 0..w {
            let v = g[r * w + c];
            img.pixels[(h - 1 - r) * w + c] = [v; 3];
        }
    }
    for l in labels {
        outline(&mut img, map, &l.bbox, class_color(l.class), false);
    }
    for d in dets {
        let class = ObjectClass::from_id(d.class_id).unwrap_or(ObjectClass::DontCare);
        outline(&mut img, map, &d.bbox, class_color(class), true);
    }
    let (ec, er) = pixel_of(map, 0.0, 0.0);
    for dr in -1..=1 {
        for dc in -1..=1 {
            img.put(ec + dc, er + dr, EGO);
        }
    }
    img
}
