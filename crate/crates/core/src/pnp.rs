//! Camera pose from 2D–3D correspondences: a three-point solver inside
//! RANSAC, followed by reprojection-error refinement.

use nalgebra::{DMatrix, Matrix2x6, Matrix6, Rotation3, Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Mat3, Pose, Vec3};
use crate::matcher::Correspondences;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 2000,
            threshold: 2.0,
            confidence: 0.999,
            seed: 0,
            refine_iterations: 30,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidArgument("RANSAC threshold must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidArgument("RANSAC confidence must be in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("RANSAC needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<usize>,
    /// Mean reprojection error of the inliers, pixels.
    pub mean_error: f64,
    pub iterations: usize,
}

/// Reprojection error in pixels, `+∞` for points at or behind the camera.
pub fn reprojection_error(pose: &Pose, intrinsics: &Intrinsics, point: &Vec3, observed: (f64, f64)) -> f64 {
    let pc = pose.inverse_transform_point(point);
    if pc.z >= -1e-12 {
        return f64::INFINITY;
    }
    let u = intrinsics.cx + intrinsics.fx * pc.x / -pc.z;
    let v = intrinsics.cy - intrinsics.fy * pc.y / -pc.z;
    ((u - observed.0).powi(2) + (v - observed.1).powi(2)).sqrt()
}

/// Real roots of `Σ coeffs[k] x^(n-k)` (highest degree first).
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs.iter().position(|c| c.abs() > 1e-14 * scale).unwrap_or(coeffs.len());
    let c = &coeffs[lead..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        comp[(0, k)] = -c[k + 1] / c[0];
        if k + 1 < n {
            comp[(k + 1, k)] = 1.0;
        }
    }
    let eval = |x: f64| c.iter().fold(0.0, |acc, &a| acc * x + a);
    let deriv = |x: f64| {
        c[..n]
            .iter()
            .enumerate()
            .fold(0.0, |acc, (k, &a)| acc * x + a * (n - k) as f64)
    };
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let d = deriv(x);
                if d == 0.0 {
                    break;
                }
                let step = eval(x) / d;
                x -= step;
                if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Rigid transform `(R, t)` minimizing `Σ |R·p + t − q|²`.
pub fn absolute_orientation(p: &[Vec3], q: &[Vec3]) -> (Mat3, Vec3) {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vec3>() / n;
    let qc = q.iter().sum::<Vec3>() / n;
    let h: Mat3 = p.iter().zip(q).map(|(a, b)| (a - pc) * (b - qc).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    (r, qc - r * pc)
}

fn camera_to_world(r_wc: Mat3, t_wc: Vec3) -> Option<Pose> {
    let r = r_wc.transpose();
    Pose::new(r, -(r * t_wc)).ok().map(|p| p.orthonormalized())
}

/// All real solutions of the three-point problem (Grunert's quartic in the
/// depth ratios). Returns camera-to-world poses.
pub fn solve_p3p(points: &[Vec3; 3], pixels: &[(f64, f64); 3], intrinsics: &Intrinsics) -> Result<Vec<Pose>> {
    let bearings = pixels.map(|(u, v)| intrinsics.bearing(u, v));
    solve_p3p_bearings(points, &bearings)
}

fn solve_p3p_bearings(points: &[Vec3; 3], bearings: &[Vec3; 3]) -> Result<Vec<Pose>> {
    let [p1, p2, p3] = points;
    let area = (p2 - p1).cross(&(p3 - p1)).norm();
    let size = (p2 - p1).norm().max((p3 - p1).norm());
    if area <= 1e-9 * size * size || size == 0.0 {
        return Err(Error::Degenerate("collinear 3D points"));
    }
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let [j1, j2, j3] = bearings;
    let ca = j2.dot(j3);
    let cb = j1.dot(j3);
    let cg = j1.dot(j2);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (ca * ca, cb * cb, cg * cg);
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca2 * cb);
    let a2c = 2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2 - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg2);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg2 * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2;

    let mut poses = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let s1sq = b2 / (1.0 + v * v - 2.0 * v * cb);
        if !(s1sq > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = s1sq.sqrt();
        let q = [j1 * s1, j2 * (u * s1), j3 * (v * s1)];
        let (r, t) = absolute_orientation(&points[..], &q);
        if let Some(pose) = camera_to_world(r, t) {
            poses.push(pose);
        }
    }
    Ok(poses)
}

fn mean_error(pose: &Pose, intrinsics: &Intrinsics, points: &[Vec3], pixels: &[(f64, f64)], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::INFINITY;
    }
    idx.iter()
        .map(|&i| reprojection_error(pose, intrinsics, &points[i], pixels[i]))
        .sum::<f64>()
        / idx.len() as f64
}

/// Damped Gauss–Newton on reprojection error with left axis–angle
/// increments on the world-to-camera transform. A step is kept only if it
/// lowers the mean reprojection error, so the result is never worse than
/// the start.
pub fn refine_pose(pose: &Pose, intrinsics: &Intrinsics, points: &[Vec3], pixels: &[(f64, f64)], iterations: usize) -> Pose {
    let idx: Vec<usize> = (0..points.len()).collect();
    let mut best = *pose;
    let mut best_err = mean_error(&best, intrinsics, points, pixels, &idx);
    if !best_err.is_finite() {
        return best;
    }
    let mut lambda = 1e-3;
    let (fx, fy) = (intrinsics.fx, intrinsics.fy);
    for _ in 0..iterations {
        let r_wc = best.rotation().transpose();
        let t_wc = -(r_wc * best.translation());
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, &(uo, vo)) in points.iter().zip(pixels) {
            let x = r_wc * p + t_wc;
            if x.z >= -1e-12 {
                continue;
            }
            let iz = 1.0 / x.z;
            let u = intrinsics.cx - fx * x.x * iz;
            let v = intrinsics.cy + fy * x.y * iz;
            let res = Vector2::new(u - uo, v - vo);
            // d(u,v)/dX_c
            let dproj = nalgebra::Matrix2x3::new(-fx * iz, 0.0, fx * x.x * iz * iz, 0.0, fy * iz, -fy * x.y * iz * iz);
            // dX_c/d(ω, δ) = [−[X_c]×, I]
            let skew = Mat3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0);
            let mut j = Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(step[0], step[1], step[2]);
            let d = Vec3::new(step[3], step[4], step[5]);
            let rot = Rotation3::new(w).into_inner();
            let r_new = rot * r_wc;
            let t_new = rot * t_wc + d;
            if let Some(cand) = camera_to_world(r_new, t_new) {
                let err = mean_error(&cand, intrinsics, points, pixels, &idx);
                if err < best_err {
                    best = cand;
                    best_err = err;
                    lambda = (lambda * 0.3).max(1e-9);
                    improved = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    best
}

fn inliers_of(pose: &Pose, intrinsics: &Intrinsics, points: &[Vec3], pixels: &[(f64, f64)], threshold: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| reprojection_error(pose, intrinsics, &points[i], pixels[i]) <= threshold)
        .collect()
}

/// Adaptive RANSAC bound `log(1 − confidence) / log(1 − w³)`.
pub fn required_iterations(inlier_ratio: f64, confidence: f64, max_iterations: usize) -> usize {
    if inlier_ratio <= 0.0 {
        return max_iterations;
    }
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if n.is_finite() {
        (n.ceil().max(1.0) as usize).min(max_iterations)
    } else {
        max_iterations
    }
}

/// Robust pose from point/pixel pairs. Points are in the frame the returned
/// pose maps camera coordinates into.
pub fn ransac_pnp_points(points: &[Vec3], pixels: &[(f64, f64)], intrinsics: &Intrinsics, config: &RansacConfig) -> Result<PoseEstimate> {
    config.validate()?;
    let n = points.len();
    if n < 4 || pixels.len() != n {
        return Err(Error::NotEnoughCorrespondences { required: 4, got: n.min(pixels.len()) });
    }
    let bearings: Vec<Vec3> = pixels.iter().map(|&(u, v)| intrinsics.bearing(u, v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut bound = config.max_iterations;
    let mut iter = 0;
    while iter < bound {
        iter += 1;
        let s = rand::seq::index::sample(&mut rng, n, 4);
        let (i0, i1, i2, i3) = (s.index(0), s.index(1), s.index(2), s.index(3));
        let Ok(cands) = solve_p3p_bearings(&[points[i0], points[i1], points[i2]], &[bearings[i0], bearings[i1], bearings[i2]]) else {
            continue;
        };
        let Some(model) = cands
            .into_iter()
            .map(|p| (reprojection_error(&p, intrinsics, &points[i3], pixels[i3]), p))
            .filter(|(e, _)| e.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
        else {
            continue;
        };
        let inl = inliers_of(&model, intrinsics, points, pixels, config.threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            bound = bound.min(required_iterations(inl.len() as f64 / n as f64, config.confidence, config.max_iterations));
            best = Some((model, inl));
        }
    }
    let (model, inl) = best.filter(|(_, inl)| inl.len() >= 4).ok_or_else(|| {
        Error::LocalizationFailed(format!("no model with 4 inliers among {n} correspondences"))
    })?;
    let pts: Vec<Vec3> = inl.iter().map(|&i| points[i]).collect();
    let pxs: Vec<(f64, f64)> = inl.iter().map(|&i| pixels[i]).collect();
    let refined = refine_pose(&model, intrinsics, &pts, &pxs, config.refine_iterations);
    let refined_inl = inliers_of(&refined, intrinsics, points, pixels, config.threshold);
    let (pose, inliers) = if refined_inl.len() >= inl.len() {
        (refined, refined_inl)
    } else {
        (model, inl)
    };
    Ok(PoseEstimate {
        mean_error: mean_error(&pose, intrinsics, points, pixels, &inliers),
        pose,
        inliers,
        iterations: iter,
    })
}

fn split(corrs: &Correspondences) -> (Vec<Vec3>, Vec<(f64, f64)>) {
    corrs.items.iter().map(|c| (c.point, c.pixel.center())).unzip()
}

pub fn ransac_pnp(corrs: &Correspondences, intrinsics: &Intrinsics, config: &RansacConfig) -> Result<PoseEstimate> {
    let (points, pixels) = split(corrs);
    ransac_pnp_points(&points, &pixels, intrinsics, config)
}

/// World pose from a pose relative to the initialized camera.
pub fn compose_with_initial(relative: &PoseEstimate, initial: &Pose) -> Pose {
    initial.compose(&relative.pose)
}

/// Expresses the world points in the initial camera's frame, solves for the
/// relative pose there, and returns it with the composed world pose.
pub fn localize_relative(
    corrs: &Correspondences,
    initial: &Pose,
    intrinsics: &Intrinsics,
    config: &RansacConfig,
) -> Result<(PoseEstimate, Pose)> {
    let (points, pixels) = split(corrs);
    let local: Vec<Vec3> = points.iter().map(|p| initial.inverse_transform_point(p)).collect();
    let rel = ransac_pnp_points(&local, &pixels, intrinsics, config)?;
    let world = compose_with_initial(&rel, initial);
    Ok((rel, world))
}

/// Uniformly random pixel-space outlier helper for tests and benchmarks.
pub fn random_pixel(rng: &mut impl Rng, intrinsics: &Intrinsics) -> (f64, f64) {
    (
        rng.random::<f64>() * intrinsics.width as f64,
        rng.random::<f64>() * intrinsics.height as f64,
    )
}
