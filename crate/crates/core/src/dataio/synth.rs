//! Ray-cast synthetic scenes with exact labels.
//!
//! Ground, walls, boxes, poles and spheres around a lidar at the origin. The
//! spheres come in two classes drawn from one geometric distribution with
//! one remission distribution: only their color tells them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FrameBundle;
use crate::camproj::CameraModel;
use crate::error::Result;
use crate::numcore::{Shape, Tensor};
use crate::rangeview::{PointCloud, SensorConfig};
use crate::IGNORE_LABEL;

pub const SYNTHETIC_CLASSES: [&str; 6] = ["ground", "wall", "box", "pole", "sphere-red", "sphere-blue"];

/// Classes separable only by camera color.
pub const AMBIGUOUS_PAIR: (u8, u8) = (4, 5);

/// Lidar mounting height above the ground plane.
const SENSOR_HEIGHT: f64 = 1.73;
const MAX_RANGE: f64 = 60.0;
const REMISSION: [f64; 6] = [0.25, 0.5, 0.6, 0.35, 0.7, 0.7];
const SKY: [f32; 3] = [0.55, 0.7, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectCounts {
    pub walls: usize,
    pub boxes: usize,
    pub poles: usize,
    /// Spheres, each of a uniformly drawn class from the ambiguous pair.
    pub spheres: usize,
}

impl Default for ObjectCounts {
    fn default() -> Self {
        ObjectCounts {
            walls: 2,
            boxes: 4,
            poles: 4,
            spheres: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub sensor: SensorConfig,
    pub camera_height: usize,
    pub camera_width: usize,
    pub camera_hfov_deg: f64,
    /// Lidar → camera translation.
    pub camera_translation: [f64; 3],
    pub counts: ObjectCounts,
    pub palette: [[f32; 3]; 6],
    /// Share of boxes, poles and spheres placed inside the camera's view.
    pub front_fraction: f64,
    /// Standard deviation of range noise, meters.
    pub range_noise: f64,
    /// Standard deviation of per-pixel image noise.
    pub pixel_noise: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            frames: 4,
            sensor: SensorConfig {
                height: 32,
                width: 256,
                ..SensorConfig::default()
            },
            camera_height: 96,
            camera_width: 192,
            camera_hfov_deg: 90.0,
            camera_translation: [0.0, 0.08, 0.0],
            counts: ObjectCounts::default(),
            palette: [
                [0.45, 0.4, 0.33],
                [0.72, 0.72, 0.78],
                [0.85, 0.55, 0.2],
                [0.25, 0.6, 0.3],
                [0.85, 0.15, 0.15],
                [0.15, 0.25, 0.85],
            ],
            front_fraction: 0.6,
            range_noise: 0.01,
            pixel_noise: 0.02,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn camera(&self) -> CameraModel {
        CameraModel::forward_facing(self.camera_height, self.camera_width, self.camera_hfov_deg, self.camera_translation)
    }
}

#[derive(Clone, Copy, Debug)]
enum Solid {
    Ground,
    /// Vertical rectangle over the segment `a → b`.
    Wall { a: [f64; 2], b: [f64; 2], height: f64 },
    /// Box standing on the ground, rotated by `yaw` about its center.
    Cuboid { c: [f64; 2], half: [f64; 2], yaw: f64, height: f64 },
    /// Vertical cylinder standing on the ground.
    Pole { c: [f64; 2], r: f64, height: f64 },
    Sphere { c: [f64; 3], r: f64 },
}

const EPS: f64 = 1e-9;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Solid {
    /// Distance along the unit ray and the surface normal at the hit.
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let ground = -SENSOR_HEIGHT;
        match *self {
            Solid::Ground => {
                if d[2].abs() < EPS {
                    return None;
                }
                let t = (ground - o[2]) / d[2];
                (t > EPS).then_some((t, [0.0, 0.0, 1.0]))
            }
            Solid::Wall { a, b, height } => {
                let e = [b[0] - a[0], b[1] - a[1]];
                let n = [-e[1], e[0]];
                let denom = n[0] * d[0] + n[1] * d[1];
                if denom.abs() < EPS {
                    return None;
                }
                let t = (n[0] * (a[0] - o[0]) + n[1] * (a[1] - o[1])) / denom;
                if t <= EPS {
                    return None;
                }
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let s = ((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / (e[0] * e[0] + e[1] * e[1]);
                let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
                ((0.0..=1.0).contains(&s) && p[2] >= ground && p[2] <= ground + height)
                    .then_some((t, [n[0] / len, n[1] / len, 0.0]))
            }
            Solid::Cuboid { c, half, yaw, height } => {
                let (s, co) = yaw.sin_cos();
                // into the box frame
                let rot = |v: [f64; 2]| [co * v[0] + s * v[1], -s * v[0] + co * v[1]];
                let lo = rot([o[0] - c[0], o[1] - c[1]]);
                let ld = rot([d[0], d[1]]);
                let lo = [lo[0], lo[1], o[2] - ground - height / 2.0];
                let ld = [ld[0], ld[1], d[2]];
                let ext = [half[0], half[1], height / 2.0];
                let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for k in 0..3 {
                    if ld[k].abs() < EPS {
                        if lo[k].abs() > ext[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-ext[k] - lo[k]) / ld[k], (ext[k] - lo[k]) / ld[k]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis = k;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= EPS {
                    return None;
                }
                let sign = -ld[axis].signum();
                let n = match axis {
                    0 => [co * sign, s * sign, 0.0],
                    1 => [-s * sign, co * sign, 0.0],
                    _ => [0.0, 0.0, sign],
                };
                Some((t0, n))
            }
            Solid::Pole { c, r, height } => {
                let (px, py) = (o[0] - c[0], o[1] - c[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                let mut best: Option<(f64, [f64; 3])> = None;
                if a > EPS {
                    let b = px * d[0] + py * d[1];
                    let cc = px * px + py * py - r * r;
                    let disc = b * b - a * cc;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let z = o[2] + t * d[2];
                        if t > EPS && z >= ground && z <= ground + height {
                            let n = [(px + t * d[0]) / r, (py + t * d[1]) / r, 0.0];
                            best = Some((t, n));
                        }
                    }
                }
                if d[2].abs() > EPS {
                    let t = (ground + height - o[2]) / d[2];
                    let (x, y) = (px + t * d[0], py + t * d[1]);
                    if t > EPS && x * x + y * y <= r * r && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, [0.0, 0.0, 1.0]));
                    }
                }
                best
            }
            Solid::Sphere { c, r } => {
                let p = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
                let b = dot(p, d);
                let disc = b * b - (dot(p, p) - r * r);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > EPS).then(|| {
                    let q = [p[0] + t * d[0], p[1] + t * d[1], p[2] + t * d[2]];
                    (t, [q[0] / r, q[1] / r, q[2] / r])
                })
            }
        }
    }
}

struct Scene {
    solids: Vec<(Solid, u8)>,
}

impl Scene {
    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3], u8)> {
        let mut best: Option<(f64, [f64; 3], u8)> = None;
        for (s, class) in &self.solids {
            if let Some((t, n)) = s.hit(o, d) {
                if t < MAX_RANGE && best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, *class));
                }
            }
        }
        best
    }

    fn random<R: Rng>(spec: &SyntheticSceneSpec, rng: &mut R) -> Scene {
        let half_fov = (spec.camera_hfov_deg / 2.0).to_radians();
        let azimuth = |rng: &mut R| {
            if rng.random_bool(spec.front_fraction.clamp(0.0, 1.0)) {
                rng.random_range(-half_fov..half_fov)
            } else {
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
            }
        };
        let polar = |r: f64, a: f64| [r * a.cos(), r * a.sin()];
        let mut solids = vec![(Solid::Ground, 0)];
        for _ in 0..spec.counts.walls {
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let center = polar(rng.random_range(12.0..25.0), a);
            let half = rng.random_range(3.0..8.0);
            let tangent = [-a.sin() * half, a.cos() * half];
            solids.push((
                Solid::Wall {
                    a: [center[0] - tangent[0], center[1] - tangent[1]],
                    b: [center[0] + tangent[0], center[1] + tangent[1]],
                    height: rng.random_range(2.0..5.0),
                },
                1,
            ));
        }
        for _ in 0..spec.counts.boxes {
            let az = azimuth(rng);
            solids.push((
                Solid::Cuboid {
                    c: polar(rng.random_range(5.0..20.0), az),
                    half: [rng.random_range(0.4..1.5), rng.random_range(0.4..1.5)],
                    yaw: rng.random_range(0.0..std::f64::consts::PI),
                    height: rng.random_range(0.8..2.2),
                },
                2,
            ));
        }
        for _ in 0..spec.counts.poles {
            let az = azimuth(rng);
            solids.push((
                Solid::Pole {
                    c: polar(rng.random_range(4.0..20.0), az),
                    r: rng.random_range(0.15..0.4),
                    height: rng.random_range(1.5..4.0),
                },
                3,
            ));
        }
        for _ in 0..spec.counts.spheres {
            let class = if rng.random_bool(0.5) { AMBIGUOUS_PAIR.0 } else { AMBIGUOUS_PAIR.1 };
            let az = azimuth(rng);
            let r = rng.random_range(0.5..0.9);
            let c = polar(rng.random_range(4.0..12.0), az);
            solids.push((
                Solid::Sphere {
                    c: [c[0], c[1], -SENSOR_HEIGHT + r],
                    r,
                },
                class,
            ));
        }
        Scene { solids }
    }
}

fn frame<R: Rng>(spec: &SyntheticSceneSpec, id: String, rng: &mut R) -> Result<FrameBundle> {
    let scene = Scene::random(spec, rng);
    let sensor = &spec.sensor;
    let range_noise = Normal::new(0.0, spec.range_noise.max(0.0)).expect("finite std");
    let rem_noise = Normal::new(0.0, 0.05).expect("finite std");
    let pitch_step = (sensor.fov_up - sensor.fov_down).to_radians() / sensor.height as f64;
    let yaw_step = 2.0 * std::f64::consts::PI / sensor.width as f64;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for v in 0..sensor.height {
        for u in 0..sensor.width {
            // stay well inside the pixel so every return projects back to it
            let pitch = sensor.row_pitch(v) + rng.random_range(-0.3..0.3) * pitch_step;
            let yaw = sensor.column_yaw(u) + rng.random_range(-0.3..0.3) * yaw_step;
            let d = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()];
            let noise = range_noise.sample(rng);
            let rem = rem_noise.sample(rng);
            let Some((t, _, class)) = scene.cast([0.0; 3], d) else {
                continue;
            };
            let r = (t + noise).max(0.1);
            points.push([
                (r * d[0]) as f32,
                (r * d[1]) as f32,
                (r * d[2]) as f32,
                (REMISSION[class as usize] + rem).clamp(0.0, 1.0) as f32,
            ]);
            labels.push(class);
        }
    }
    let cloud = PointCloud::new(points, Some(labels))?;

    let camera = spec.camera();
    let (h, w) = (spec.camera_height, spec.camera_width);
    let r = camera.rotation;
    let t = camera.translation;
    // camera center and ray directions in the lidar frame (Rᵀ)
    let rt = |q: [f64; 3]| {
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    };
    let center = rt([-t[0], -t[1], -t[2]]);
    let pixel_noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite std");
    let mut image = Tensor::<f32>::zeros(Shape::new(1, 3, h, w));
    let mut image_labels = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        for x in 0..w {
            let q = [(x as f64 + 0.5 - camera.cx) / camera.fx, (y as f64 + 0.5 - camera.cy) / camera.fy, 1.0];
            let d = rt(q);
            let len = dot(d, d).sqrt();
            let d = [d[0] / len, d[1] / len, d[2] / len];
            let (color, shade) = match scene.cast(center, d) {
                Some((_, n, class)) => {
                    image_labels[y * w + x] = class;
                    (spec.palette[class as usize], 0.55 + 0.45 * dot(n, d).abs())
                }
                None => (SKY, 1.0),
            };
            for (c, base) in color.iter().enumerate() {
                let v = (*base as f64 * shade + pixel_noise.sample(rng)).clamp(0.0, 1.0);
                let i = image.index(0, c, y, x);
                // 8-bit levels so the on-disk PPM reads back bit-exactly
                image.data_mut()[i] = (v * 255.0).round() as f32 / 255.0;
            }
        }
    }
    Ok(FrameBundle {
        id,
        cloud,
        image,
        camera,
        image_labels: Some(image_labels),
    })
}

/// Frames `000000`, `000001`, ...; a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSceneSpec) -> Result<Vec<FrameBundle>> {
    spec.sensor.validate()?;
    spec.camera().validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.frames)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            frame(spec, format!("{i:06}"), &mut rng)
        })
        .collect()
}
