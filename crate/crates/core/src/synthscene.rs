//! Analytic scenes with exact color, depth and visibility.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Intrinsics, Pixel, Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    /// Row-major RGB in `[0, 1]`.
    pub rgb: Vec<[f64; 3]>,
    /// Ray distance to the first hit; `+∞` on misses.
    pub depth: Vec<f64>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl PosedImage {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.rgb[row * self.width() + col]
    }

    /// Writes `path` as binary PPM and the depth grid as raw little-endian
    /// f32 next to it (`.depth`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for px in &self.rgb {
            for c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out)?;
        let mut depth = std::fs::File::create(depth_path(path))?;
        for d in &self.depth {
            depth.write_all(&(*d as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads an image written by [`save`](Self::save). The pose and
    /// intrinsics are not stored in the image files and must be supplied.
    pub fn load(path: &Path, pose: Pose, intrinsics: Intrinsics) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |r: &str| Error::format("ppm", r.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected 8-bit P6"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        if w != intrinsics.width || h != intrinsics.height {
            return Err(bad("size does not match intrinsics"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != 3 * w * h {
            return Err(bad("pixel data length"));
        }
        let rgb = data
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        let raw = std::fs::read(depth_path(path))?;
        if raw.len() != 4 * w * h {
            return Err(Error::format("depth sidecar", "length does not match image"));
        }
        let depth = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(PosedImage {
            rgb,
            depth,
            pose,
            intrinsics,
        })
    }
}

fn depth_path(path: &Path) -> PathBuf {
    path.with_extension("depth")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    Constant { rgb: [f64; 3] },
    /// Red and green ramp with x and y across `[-half, half]`; a checker of
    /// side `cell` shifts the blue channel. Color therefore identifies
    /// ground position up to the checker parity.
    PositionRamp { half: f64, cell: f64, contrast: f64 },
}

impl Texture {
    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        match *self {
            Texture::Constant { rgb } => rgb,
            Texture::PositionRamp { half, cell, contrast } => {
                let ramp = |v: f64| 0.15 + 0.7 * ((v + half) / (2.0 * half)).clamp(0.0, 1.0);
                let parity = ((p.x / cell).floor() + (p.y / cell).floor()).rem_euclid(2.0);
                [ramp(p.x), ramp(p.y), 0.5 + contrast * (parity - 0.5)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Primitive {
    /// Axis-aligned rectangle at height `z` (normal +z) covering
    /// `[min, max]` in x and y. Visible from both sides.
    Ground { z: f64, min: [f64; 2], max: [f64; 2], texture: Texture },
    Sphere { center: [f64; 3], radius: f64, texture: Texture },
    Box { min: [f64; 3], max: [f64; 3], texture: Texture },
}

impl Primitive {
    /// Smallest positive hit distance along a unit direction.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Primitive::Ground { z, min, max, .. } => {
                if dir.z.abs() < EPS {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                let p = origin + dir * t;
                (t > EPS && p.x >= min[0] && p.x <= max[0] && p.y >= min[1] && p.y <= max[1]).then_some(t)
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - Vec3::from(*center);
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > EPS)
            }
            Primitive::Box { min, max, .. } => {
                let aabb = Aabb { min: *min, max: *max };
                let (t0, t1) = aabb.ray_interval(origin, dir)?;
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Primitive::Ground { texture, .. } | Primitive::Sphere { texture, .. } | Primitive::Box { texture, .. } => {
                texture.albedo(p)
            }
        }
    }

    fn inside(&self, bounds: &Aabb) -> bool {
        let (lo, hi) = match self {
            Primitive::Ground { z, min, max, .. } => ([min[0], min[1], *z], [max[0], max[1], *z]),
            Primitive::Sphere { center, radius, .. } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
            Primitive::Box { min, max, .. } => (*min, *max),
        };
        (0..3).all(|i| lo[i] >= bounds.min[i] && hi[i] <= bounds.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
    /// Point cameras aim around; the middle of the ground.
    pub focus: [f64; 3],
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>, bounds: Aabb, focus: [f64; 3]) -> Result<Self> {
        if let Some(i) = primitives.iter().position(|p| !p.inside(&bounds)) {
            return Err(Error::InvalidArgument(format!("primitive {i} leaves the scene bounds")));
        }
        Ok(SyntheticScene {
            primitives,
            bounds,
            focus,
        })
    }

    /// The desk scene: a 20-unit textured ground square and three spheres.
    pub fn reference() -> Self {
        let sphere = |c: [f64; 3], r: f64, rgb: [f64; 3]| Primitive::Sphere {
            center: c,
            radius: r,
            texture: Texture::Constant { rgb },
        };
        let primitives = vec![
            Primitive::Ground {
                z: 0.0,
                min: [-10.0, -10.0],
                max: [10.0, 10.0],
                texture: Texture::PositionRamp {
                    half: 10.0,
                    cell: 2.0,
                    contrast: 0.3,
                },
            },
            sphere([-2.0, 1.5, 1.0], 1.0, [0.9, 0.85, 0.2]),
            sphere([2.5, -2.0, 1.0], 1.0, [0.2, 0.8, 0.85]),
            sphere([0.5, 3.5, 0.8], 0.8, [0.85, 0.3, 0.8]),
        ];
        let bounds = Aabb::new([-10.0, -10.0, -1.0], [10.0, 10.0, 7.0]).expect("valid bounds");
        SyntheticScene::new(primitives, bounds, [0.0, 0.0, 0.0]).expect("reference scene fits its bounds")
    }

    pub fn empty(bounds: Aabb) -> Self {
        SyntheticScene {
            primitives: Vec::new(),
            bounds,
            focus: bounds.center().into(),
        }
    }

    pub fn extent(&self) -> f64 {
        self.bounds.extent()
    }

    /// Nearest hit `(distance, color)` along a unit direction.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, [f64; 3])> {
        let (t, prim) = self
            .primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir).map(|t| (t, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        Some((t, prim.albedo(&(origin + dir * t))))
    }
}

/// Renders a view by nearest-hit ray casting under constant lighting.
pub fn raytrace(scene: &SyntheticScene, pose: &Pose, intrinsics: &Intrinsics) -> Result<PosedImage> {
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = pose.center();
    let hits: Vec<(f64, [f64; 3])> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = Pixel::new(i / w, i % w).center();
            let dir = pose.rotation() * intrinsics.bearing(u, v);
            scene.trace(&origin, &dir).unwrap_or((f64::INFINITY, [0.0; 3]))
        })
        .collect();
    Ok(PosedImage {
        depth: hits.iter().map(|h| h.0).collect(),
        rgb: hits.iter().map(|h| h.1).collect(),
        pose: *pose,
        intrinsics: *intrinsics,
    })
}

/// 64×64 with a 60° horizontal field of view.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::from_fov(64, 64, 60.0).expect("valid intrinsics")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layout {
    /// Evenly spaced on a circle, all looking at the scene focus.
    Ring,
    /// Jittered lattice over the middle of the scene, headings cycling
    /// through four directions, looking down ahead of the camera.
    Grid,
    /// `sites × headings` tight groups of poses.
    MultiSite { sites: usize, headings: usize },
}

/// Camera height above the focus for generated layouts.
const CAMERA_HEIGHT: f64 = 5.0;
/// Horizontal distance from camera to its ground aim point.
const AIM_AHEAD: f64 = 3.0;

fn aim(position: Vec3, yaw: f64, ground_z: f64) -> Pose {
    let target = Vec3::new(position.x + AIM_AHEAD * yaw.cos(), position.y + AIM_AHEAD * yaw.sin(), ground_z);
    Pose::look_at(position, target, Vec3::z()).expect("camera is above its target")
}

/// Poses with the ground-truth group of each one (all zero except for the
/// multi-site layout, where the group is `site * headings + heading`).
pub fn make_labeled_trajectory(scene: &SyntheticScene, layout: Layout, count: usize, rng_seed: u64) -> (Vec<Pose>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let f = Vec3::from(scene.focus);
    let spread = 0.2 * scene.extent();
    let mut poses = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    match layout {
        Layout::Ring => {
            for i in 0..count {
                let a = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                let eye = f + Vec3::new(spread * a.cos(), spread * a.sin(), CAMERA_HEIGHT);
                poses.push(Pose::look_at(eye, f, Vec3::z()).expect("ring camera above focus"));
                labels.push(0);
            }
        }
        Layout::Grid => {
            let side = (count as f64).sqrt().ceil() as usize;
            let cells = side * side;
            let step = 2.0 * spread / side as f64;
            for i in 0..count {
                let cell = i * cells / count;
                let (gx, gy) = ((cell % side) as f64, (cell / side) as f64);
                let x = f.x - spread + (gx + 0.5 + rng.random_range(-0.25..0.25)) * step;
                let y = f.y - spread + (gy + 0.5 + rng.random_range(-0.25..0.25)) * step;
                let z = f.z + CAMERA_HEIGHT + rng.random_range(-0.5..0.5);
                let yaw = (i % 4) as f64 * std::f64::consts::FRAC_PI_2
                    + std::f64::consts::FRAC_PI_4
                    + rng.random_range(-0.25..0.25);
                poses.push(aim(Vec3::new(x, y, z), yaw, f.z));
                labels.push(0);
            }
        }
        Layout::MultiSite { sites, headings } => {
            let groups = (sites * headings).max(1);
            for i in 0..count {
                let g = i % groups;
                let (site, heading) = (g / headings.max(1), g % headings.max(1));
                let a = 2.0 * std::f64::consts::PI * site as f64 / sites.max(1) as f64;
                let x = f.x + spread * a.cos() + rng.random_range(-0.15..0.15);
                let y = f.y + spread * a.sin() + rng.random_range(-0.15..0.15);
                let z = f.z + CAMERA_HEIGHT + rng.random_range(-0.1..0.1);
                let yaw = a + 2.0 * std::f64::consts::PI * heading as f64 / headings.max(1) as f64
                    + rng.random_range(-0.07..0.07);
                poses.push(aim(Vec3::new(x, y, z), yaw, f.z));
                labels.push(g);
            }
        }
    }
    (poses, labels)
}

pub fn make_trajectory(scene: &SyntheticScene, layout: Layout, count: usize, rng_seed: u64) -> Vec<Pose> {
    make_labeled_trajectory(scene, layout, count, rng_seed).0
}

/// One pose per line, 12 numbers (rotation row-major, then translation).
pub fn save_trajectory(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let line: Vec<String> = p.to_array().iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("trajectory", e.to_string()))?;
            let arr: [f64; 12] = vals
                .try_into()
                .map_err(|_| Error::format("trajectory", "expected 12 numbers per line"))?;
            Pose::from_array(&arr)
        })
        .collect()
}

/// The reference dataset: training and held-out query views of the desk scene.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: SyntheticScene,
    pub train: Vec<PosedImage>,
    pub query: Vec<PosedImage>,
}

impl Dataset {
    pub fn generate(scene: SyntheticScene, intrinsics: &Intrinsics, n_train: usize, n_query: usize, seed: u64) -> Result<Self> {
        let train_poses = make_trajectory(&scene, Layout::Grid, n_train, seed);
        let query_poses = make_trajectory(&scene, Layout::Grid, n_query, seed.wrapping_add(0x9e37_79b9));
        let render = |poses: &[Pose]| -> Result<Vec<PosedImage>> {
            poses.iter().map(|p| raytrace(&scene, p, intrinsics)).collect()
        };
        Ok(Dataset {
            train: render(&train_poses)?,
            query: render(&query_poses)?,
            scene,
        })
    }

    pub fn reference(seed: u64) -> Result<Self> {
        Dataset::generate(SyntheticScene::reference(), &default_intrinsics(), 100, 10, seed)
    }
}
