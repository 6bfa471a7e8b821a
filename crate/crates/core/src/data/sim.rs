use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::ObjectClass;
use crate::geometry::{intersection_area, OrientedBox};
use crate::gridmap::{Point, PointCloud};

/// Rigid mounting of an additional sensor relative to the ego origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorPose {
    pub offset: [f64; 3],
    pub yaw: f64,
}

/// Sensor setup of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub beams: usize,
    /// Elevation span of the beams in degrees, lowest first.
    pub elevation: (f64, f64),
    pub azimuth_res: f64,
    pub range_noise: f64,
    pub max_range: f64,
    pub mount: [f64; 3],
    pub extra_sensors: Vec<SensorPose>,
    /// Standard deviation of the per-frame pose error of the extra sensors
    /// (meters for translation; the yaw error uses a tenth of it in radians).
    pub misalignment: f64,
    pub dropout: f64,
    pub intensity_scale: f64,
    pub intensity_noise: f64,
}

impl DomainSpec {
    /// 64-beam roof sensor.
    pub fn source() -> Self {
        Self {
            beams: 64,
            elevation: (-24.9, 2.0),
            azimuth_res: 0.2,
            range_noise: 0.02,
            max_range: 80.0,
            mount: [0.0, 0.0, 1.73],
            extra_sensors: Vec::new(),
            misalignment: 0.0,
            dropout: 0.05,
            intensity_scale: 1.0,
            intensity_noise: 0.05,
        }
    }

    /// 32-beam roof sensor at a different height with coarser azimuth
    /// sampling, noisier ranges, a different intensity calibration and a
    /// second, slightly misaligned sensor.
    pub fn target() -> Self {
        Self {
            beams: 32,
            elevation: (-30.67, 10.67),
            azimuth_res: 0.33,
            range_noise: 0.07,
            dropout: 0.1,
            intensity_scale: 0.4,
            mount: [0.0, 0.0, 1.84],
            extra_sensors: vec![SensorPose {
                offset: [-1.0, 0.0, 1.9],
                yaw: 0.0,
            }],
            misalignment: 0.05,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.beams == 0 {
            return Err("a sensor needs at least one beam".into());
        }
        if !(self.range_noise >= 0.0 && self.misalignment >= 0.0 && self.intensity_noise >= 0.0) {
            return Err("noise levels must be >= 0".into());
        }
        if !(self.azimuth_res > 0.0 && self.max_range > 0.0) {
            return Err("azimuth resolution and max range must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.elevation.0 > self.elevation.1 {
            return Err("elevation span must be ordered low to high".into());
        }
        Ok(())
    }

    pub fn elevations(&self) -> Vec<f64> {
        let (lo, hi) = self.elevation;
        if self.beams == 1 {
            return vec![lo.to_radians()];
        }
        (0..self.beams)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.beams - 1) as f64).to_radians())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    /// `None` for static clutter such as walls and poles.
    pub class: Option<ObjectClass>,
    pub footprint: OrientedBox,
    pub height: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

/// Layout statistics used to sample scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrior {
    /// Objects are kept inside `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
    /// Mean count per frame for car, pedestrian, cyclist.
    pub mean_counts: [f64; 3],
    /// Mean footprint `(w, h)` per class; sampled within +-15 %.
    pub sizes: [(f64, f64); 3],
    pub heights: [f64; 3],
    /// Probability that an object is aligned with one of the road axes.
    pub aligned: f64,
    pub clutter: f64,
    /// No object centre closer to the ego origin than this.
    pub ego_clearance: f64,
}

impl Default for ScenePrior {
    fn default() -> Self {
        Self {
            half_extent: 30.0,
            mean_counts: [3.0, 1.5, 1.0],
            sizes: [(4.2, 1.8), (0.6, 0.6), (1.8, 0.6)],
            heights: [1.5, 1.75, 1.7],
            aligned: 0.7,
            clutter: 2.0,
            ego_clearance: 3.0,
        }
    }
}

fn overlaps_too_much(a: &OrientedBox, others: &[SceneObject]) -> bool {
    others.iter().any(|o| {
        let inter = intersection_area(a, &o.footprint);
        inter > 0.2 * a.area().min(o.footprint.area())
    })
}

fn inside(b: &OrientedBox, half: f64) -> bool {
    b.corners().iter().all(|c| c[0].abs() <= half && c[1].abs() <= half)
}

fn place<R: Rng>(
    rng: &mut R,
    prior: &ScenePrior,
    objects: &[SceneObject],
    size: (f64, f64),
    aligned: bool,
) -> Option<OrientedBox> {
    let jitter = Normal::new(0.0, 0.1).expect("valid");
    for _ in 0..200 {
        let x = rng.random_range(-prior.half_extent..prior.half_extent);
        let y = rng.random_range(-prior.half_extent..prior.half_extent);
        if x.hypot(y) < prior.ego_clearance {
            continue;
        }
        let theta = if aligned {
            let axis = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            axis + jitter.sample(rng)
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let b = OrientedBox::new(x, y, size.0, size.1, theta).ok()?;
        if inside(&b, prior.half_extent) && !overlaps_too_much(&b, objects) {
            return Some(b);
        }
    }
    None
}

/// Random scene with Poisson-distributed object counts per class plus clutter.
pub fn sample_scene<R: Rng>(prior: &ScenePrior, rng: &mut R) -> SceneSpec {
    let mut objects = Vec::new();
    for (ci, class) in ObjectClass::DETECTED.iter().enumerate() {
        let count = poisson(rng, prior.mean_counts[ci]);
        for _ in 0..count {
            let s = rng.random_range(0.85..1.15);
            let (w, h) = prior.sizes[ci];
            let aligned = rng.random_bool(prior.aligned.clamp(0.0, 1.0));
            if let Some(fp) = place(rng, prior, &objects, (w * s, h * s), aligned) {
                let height = prior.heights[ci] * rng.random_range(0.9..1.1);
                objects.push(SceneObject {
                    class: Some(*class),
                    footprint: fp,
                    height,
                });
            }
        }
    }
    for _ in 0..poisson(rng, prior.clutter) {
        let (size, height) = if rng.random_bool(0.5) {
            ((0.3, 0.3), 3.0)
        } else {
            ((rng.random_range(3.0..8.0), 0.3), 2.0)
        };
        if let Some(fp) = place(rng, prior, &objects, size, true) {
            objects.push(SceneObject {
                class: None,
                footprint: fp,
                height,
            });
        }
    }
    SceneSpec { objects }
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Nearest intersection of the ray `o + t d` (unit `d`) with the ground or
/// an object wall, as `(t, surface)`.
pub(crate) fn cast(scene: &SceneSpec, o: [f64; 3], d: [f64; 3], max_range: f64) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    if d[2] < 0.0 {
        let t = -o[2] / d[2];
        if t > 0.0 && t <= max_range {
            best = Some((t, Surface::Ground));
        }
    }
    for (k, obj) in scene.objects.iter().enumerate() {
        let c = obj.footprint.corners();
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            let e = [b[0] - a[0], b[1] - a[1]];
            // o + t d = a + s e in the plane
            let den = d[0] * e[1] - d[1] * e[0];
            if den.abs() < 1e-15 {
                continue;
            }
            let r = [a[0] - o[0], a[1] - o[1]];
            let t = (r[0] * e[1] - r[1] * e[0]) / den;
            let s = (r[0] * d[1] - r[1] * d[0]) / den;
            if t <= 0.0 || !(0.0..=1.0).contains(&s) || t > max_range {
                continue;
            }
            let z = o[2] + t * d[2];
            if !(0.0..=obj.height).contains(&z) {
                continue;
            }
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Surface::Object(k)));
            }
        }
    }
    best
}

fn base_intensity(scene: &SceneSpec, s: Surface) -> f64 {
    match s {
        Surface::Ground => 0.15,
        Surface::Object(k) => match scene.objects[k].class {
            Some(ObjectClass::Car) => 0.55,
            Some(ObjectClass::Pedestrian) => 0.35,
            Some(ObjectClass::Cyclist) => 0.45,
            _ => 0.25,
        },
    }
}

fn scan<R: Rng>(
    scene: &SceneSpec,
    spec: &DomainSpec,
    origin: [f64; 3],
    yaw: f64,
    rng: &mut R,
    out: &mut Vec<Point>,
) {
    let noise = (spec.range_noise > 0.0).then(|| Normal::new(0.0, spec.range_noise).expect("valid"));
    let inoise = (spec.intensity_noise > 0.0).then(|| Normal::new(0.0, spec.intensity_noise).expect("valid"));
    let steps = (360.0 / spec.azimuth_res).round().max(1.0) as usize;
    for &el in &spec.elevations() {
        let (se, ce) = el.sin_cos();
        for j in 0..steps {
            let az = yaw + (j as f64 * 360.0 / steps as f64).to_radians();
            let (sa, ca) = az.sin_cos();
            let d = [ce * ca, ce * sa, se];
            let Some((t, surface)) = cast(scene, origin, d, spec.max_range) else {
                continue;
            };
            // draw noise before dropout so the random stream does not depend on it
            let dt = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            let di = inoise.as_ref().map_or(0.0, |n| n.sample(rng));
            if spec.dropout > 0.0 && rng.random_bool(spec.dropout) {
                continue;
            }
            let r = t + dt;
            let intensity = ((base_intensity(scene, surface) + di) * spec.intensity_scale).clamp(0.0, 1.0);
            out.push(Point {
                x: origin[0] + r * d[0],
                y: origin[1] + r * d[1],
                z: origin[2] + r * d[2],
                intensity,
            });
        }
    }
}

/// Simulated returns of every sensor of `spec`, one cloud per sensor in
/// the ego frame. Extra sensors are registered with their nominal pose
/// although their actual pose carries a random error, which misaligns
/// their points.
pub fn simulate_lidar<R: Rng>(scene: &SceneSpec, spec: &DomainSpec, rng: &mut R) -> Vec<PointCloud> {
    let mut clouds = Vec::with_capacity(1 + spec.extra_sensors.len());
    let mut pts = Vec::new();
    scan(scene, spec, spec.mount, 0.0, rng, &mut pts);
    clouds.push(PointCloud::new(pts, spec.mount));
    for pose in &spec.extra_sensors {
        let (dx, dy, dz, dyaw) = if spec.misalignment > 0.0 {
            let n = Normal::new(0.0, spec.misalignment).expect("valid");
            (n.sample(rng), n.sample(rng), n.sample(rng), 0.1 * n.sample(rng))
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        let actual = [pose.offset[0] + dx, pose.offset[1] + dy, pose.offset[2] + dz];
        let mut raw = Vec::new();
        scan(scene, spec, actual, pose.yaw + dyaw, rng, &mut raw);
        // express the returns relative to the nominal instead of the actual pose
        let (s, c) = (-dyaw).sin_cos();
        let pts: Vec<Point> = raw
            .into_iter()
            .map(|p| {
                let (lx, ly, lz) = (p.x - actual[0], p.y - actual[1], p.z - actual[2]);
                Point {
                    x: pose.offset[0] + c * lx - s * ly,
                    y: pose.offset[1] + s * lx + c * ly,
                    z: pose.offset[2] + lz,
                    intensity: p.intensity,
                }
            })
            .collect();
        clouds.push(PointCloud::new(pts, pose.offset));
    }
    clouds
}
