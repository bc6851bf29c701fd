//! Rigid poses, pinhole cameras, ray generation and stratified sampling.
//!
//! Conventions used everywhere in the crate:
//! - [`Pose`] is camera-to-world: `x_world = R * x_cam + t`.
//! - The camera looks down its local −z axis, +x is image-right and +y is
//!   image-up, so image rows grow downward.
//! - Pixel `(row, col)` is sampled through its center `(col + 0.5, row + 0.5)`.
//! - Depth is always distance along the unit ray direction, never z-depth.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform in SE(3), camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        if !ortho_err.is_finite() || ortho_err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max |RᵀR − I| = {ortho_err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Rotation given as axis–angle (radians) plus translation.
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Pose {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let back = -forward.normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let cam_up = back.cross(&right);
        let rotation = Mat3::from_columns(&[right, cam_up, back]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Unit optical axis (camera −z) in world coordinates.
    pub fn viewing_direction(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    /// `self · other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Re-projects the rotation onto SO(3) (polar decomposition via SVD).
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major R followed by t.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Pose::new(rotation, Vec3::new(a[9], a[10], a[11]))
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        for v in self.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn read_le(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 96 {
            return Err(Error::format("pose", "truncated pose record"));
        }
        let mut a = [0.0; 12];
        for (i, v) in a.iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
        Pose::from_array(&a)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

// Poses travel through JSON as the same 12-float row-major layout used on disk.
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 12]>::deserialize(d)?;
        Pose::from_array(&a).map_err(serde::de::Error::custom)
    }
}

/// Translation error (scene units) and rotation error (degrees) of `estimate`
/// against `truth`.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let trans = (estimate.translation - truth.translation).norm();
    // M = AᵀB summed explicitly so that swapping A and B transposes M bit for bit.
    let (a, b) = (&estimate.rotation, &truth.rotation);
    let m = |i: usize, j: usize| (0..3).map(|k| a[(k, i)] * b[(k, j)]).sum::<f64>();
    let trace = m(0, 0) + m(1, 1) + m(2, 2);
    let s = Vec3::new(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
    // atan2 stays accurate near 0° where acos of the trace does not.
    (trans, (0.5 * s.norm()).atan2(0.5 * (trace - 1.0)).to_degrees())
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Intrinsics::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit bearing in the camera frame through continuous image point `(u, v)`.
    pub fn bearing(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0).normalize()
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project_camera(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z >= -1e-12 {
            return None;
        }
        let depth = -p.z;
        Some((self.cx + self.fx * p.x / depth, self.cy - self.fy * p.y / depth))
    }
}

/// Continuous image coordinates of a world point seen from `pose`.
pub fn project(pose: &Pose, intrinsics: &Intrinsics, world: &Vec3) -> Option<(f64, f64)> {
    intrinsics.project_camera(&pose.inverse_transform_point(world))
}

/// Integer pixel address, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }

    /// Image coordinates of the pixel center.
    pub fn center(&self) -> (f64, f64) {
        (self.col as f64 + 0.5, self.row as f64 + 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("zero ray direction".into()));
        }
        if !(near >= 0.0 && near < far) {
            return Err(Error::InvalidArgument(format!("bad ray interval [{near}, {far}]")));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One ray per requested pixel (all pixels, row-major, when `pixels` is `None`)
/// spanning `[near, far]`.
pub fn generate_rays(
    pose: &Pose,
    intrinsics: &Intrinsics,
    pixels: Option<&[Pixel]>,
    near: f64,
    far: f64,
) -> Result<Vec<Ray>> {
    let all: Vec<Pixel>;
    let pixels = match pixels {
        Some(p) => p,
        None => {
            all = all_pixels(intrinsics, 1);
            &all
        }
    };
    pixels
        .iter()
        .map(|px| {
            if px.row >= intrinsics.height || px.col >= intrinsics.width {
                return Err(Error::PixelOutOfBounds {
                    row: px.row,
                    col: px.col,
                    width: intrinsics.width,
                    height: intrinsics.height,
                });
            }
            let (u, v) = px.center();
            let dir = pose.rotation * intrinsics.bearing(u, v);
            Ray::new(pose.translation, dir, near, far)
        })
        .collect()
}

/// Every `stride`-th pixel in row-major order, starting at (0, 0).
pub fn all_pixels(intrinsics: &Intrinsics, stride: usize) -> Vec<Pixel> {
    let stride = stride.max(1);
    (0..intrinsics.height)
        .step_by(stride)
        .flat_map(|row| (0..intrinsics.width).step_by(stride).map(move |col| Pixel::new(row, col)))
        .collect()
}

/// Grid shape `(rows, cols)` produced by [`all_pixels`] with this stride.
pub fn stride_grid(intrinsics: &Intrinsics, stride: usize) -> (usize, usize) {
    let s = stride.max(1);
    (intrinsics.height.div_ceil(s), intrinsics.width.div_ceil(s))
}

/// Axis-aligned box, also used to normalize coordinates for the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::InvalidArgument(format!("degenerate box {min:?}..{max:?}")));
        }
        Ok(Aabb { min, max })
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn half_extent(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.max[0] - self.min[0]),
            0.5 * (self.max[1] - self.min[1]),
            0.5 * (self.max[2] - self.min[2]),
        )
    }

    /// Longest side; the yardstick for translation tolerances.
    pub fn extent(&self) -> f64 {
        2.0 * self.half_extent().max()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Maps the box to `[-1, 1]³`.
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        (p - self.center()).component_div(&self.half_extent())
    }

    /// Parametric interval where the ray is inside the box (slab test).
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Restricts a ray to the part of `[min_near, ∞)` inside the box.
    pub fn clip_ray(&self, origin: Vec3, direction: Vec3, min_near: f64) -> Option<Ray> {
        let dir = direction.normalize();
        let (t0, t1) = self.ray_interval(&origin, &dir)?;
        let near = t0.max(min_near);
        (t1 > near + 1e-9).then_some(Ray {
            origin,
            direction: dir,
            near,
            far: t1,
        })
    }
}

/// Per-ray sample layout for quadrature. Samples of ray `r` occupy
/// `r * n_per_ray .. (r + 1) * n_per_ray`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub n_per_ray: usize,
    pub positions: Vec<Vec3>,
    pub t_start: Vec<f64>,
    pub t_end: Vec<f64>,
    pub ray_index: Vec<usize>,
}

/// Borrowed view of one ray's samples.
#[derive(Debug, Clone, Copy)]
pub struct RaySamples<'a> {
    pub positions: &'a [Vec3],
    pub t_start: &'a [f64],
    pub t_end: &'a [f64],
}

impl<'a> RaySamples<'a> {
    pub fn len(&self) -> usize {
        self.t_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_start.is_empty()
    }

    /// Ray distance of each sample (interval midpoint).
    pub fn distance(&self, k: usize) -> f64 {
        0.5 * (self.t_start[k] + self.t_end[k])
    }
}

impl SampleBatch {
    pub fn ray_count(&self) -> usize {
        self.t_start.len() / self.n_per_ray.max(1)
    }

    pub fn len(&self) -> usize {
        self.t_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_start.is_empty()
    }

    pub fn ray(&self, r: usize) -> RaySamples<'_> {
        let range = r * self.n_per_ray..(r + 1) * self.n_per_ray;
        RaySamples {
            positions: &self.positions[range.clone()],
            t_start: &self.t_start[range.clone()],
            t_end: &self.t_end[range],
        }
    }
}

/// Splits each ray's `[near, far]` into `n_per_ray` equal bins and draws one
/// uniform sample per bin. Consecutive samples (closed by `far`) bound the
/// quadrature intervals; positions sit at interval midpoints.
pub fn stratified_samples(rays: &[Ray], n_per_ray: usize, rng_seed: u64) -> Result<SampleBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_rays(rays, n_per_ray, || rng.random::<f64>())
}

/// Like [`stratified_samples`] but every sample sits at its bin start, so
/// intervals are exactly the bins. Used wherever rendering must be
/// reproducible without a seed.
pub fn uniform_samples(rays: &[Ray], n_per_ray: usize) -> Result<SampleBatch> {
    sample_rays(rays, n_per_ray, || 0.0)
}

fn sample_rays(rays: &[Ray], n: usize, mut jitter: impl FnMut() -> f64) -> Result<SampleBatch> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need ≥ 2 samples per ray, got {n}")));
    }
    let total = rays.len() * n;
    let mut batch = SampleBatch {
        n_per_ray: n,
        positions: Vec::with_capacity(total),
        t_start: Vec::with_capacity(total),
        t_end: Vec::with_capacity(total),
        ray_index: Vec::with_capacity(total),
    };
    let mut ts = vec![0.0; n + 1];
    for (r, ray) in rays.iter().enumerate() {
        let bin = (ray.far - ray.near) / n as f64;
        for (k, t) in ts.iter_mut().take(n).enumerate() {
            // Keep the draw strictly inside the bin so t stays strictly increasing.
            let u = jitter().min(1.0 - 1e-9);
            *t = ray.near + (k as f64 + u) * bin;
        }
        ts[n] = ray.far;
        for k in 0..n {
            let mid = 0.5 * (ts[k] + ts[k + 1]);
            batch.positions.push(ray.at(mid));
            batch.t_start.push(ts[k]);
            batch.t_end.push(ts[k + 1]);
            batch.ray_index.push(r);
        }
    }
    Ok(batch)
}

/// Uniformly random rotation axis with angle uniform in `[0, max_angle]`.
pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Mat3 {
    let axis = random_unit_vector(rng);
    let angle = rng.random::<f64>() * max_angle;
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

pub fn random_unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Uniform point in the ball of radius `radius`.
pub fn random_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    random_unit_vector(rng) * radius * rng.random::<f64>().cbrt()
}
