//! Volumetric quadrature along rays: color, intermediate features and depth,
//! plus lifting rendered features into a 3D point cloud.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FeatureDims, FieldParams};
use crate::geometry::{all_pixels, stride_grid, uniform_samples, Intrinsics, Pixel, Pose, Ray, RaySamples, Vec3};
use crate::selection::SelectionMask;

/// Quadrature weights of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub weights: Vec<f64>,
    /// `T_1 … T_{n+1}`; `T_1 = 1`.
    pub transmittance: Vec<f64>,
}

impl Composite {
    /// `1 − T_{n+1}`, which equals `Σ w_k` up to rounding and stays in `[0, 1]`.
    pub fn acc(&self) -> f64 {
        1.0 - self.transmittance.last().copied().unwrap_or(1.0)
    }
}

/// `w_k = T_k (1 − exp(−σ_k Δ_k))`, `T_{k+1} = T_k exp(−σ_k Δ_k)`.
pub fn composite(sigma: &[f64], t_start: &[f64], t_end: &[f64]) -> Composite {
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut t = 1.0;
    transmittance.push(t);
    for k in 0..n {
        let tau = sigma[k] * (t_end[k] - t_start[k]);
        weights.push(t * -(-tau).exp_m1());
        t *= (-tau).exp();
        transmittance.push(t);
    }
    Composite { weights, transmittance }
}

/// Gradients of a composited color w.r.t. per-sample densities and colors,
/// given `dL/dC`.
pub fn composite_backward(
    comp: &Composite,
    sigma: &[f64],
    t_start: &[f64],
    t_end: &[f64],
    colors: ArrayView2<f64>,
    d_rendered: &[f64; 3],
) -> (Array1<f64>, Array2<f64>) {
    let n = sigma.len();
    let mut d_sigma = Array1::zeros(n);
    let mut d_color = Array2::zeros((n, 3));
    // suffix = Σ_{j>k} w_j c_j · dL/dC
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let dot: f64 = (0..3).map(|ch| colors[(k, ch)] * d_rendered[ch]).sum();
        let delta = t_end[k] - t_start[k];
        d_sigma[k] = delta * (comp.transmittance[k + 1] * dot - suffix);
        for ch in 0..3 {
            d_color[(k, ch)] = comp.weights[k] * d_rendered[ch];
        }
        suffix += comp.weights[k] * dot;
    }
    (d_sigma, d_color)
}

/// Gradient of `Σ w_k v_k` w.r.t. per-sample densities, given its upstream
/// derivative `d_out`.
pub fn composite_backward_scalar(comp: &Composite, t_start: &[f64], t_end: &[f64], values: &[f64], d_out: f64) -> Array1<f64> {
    let n = values.len();
    let mut d_sigma = Array1::zeros(n);
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let dot = values[k] * d_out;
        d_sigma[k] = (t_end[k] - t_start[k]) * (comp.transmittance[k + 1] * dot - suffix);
        suffix += comp.weights[k] * dot;
    }
    d_sigma
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    /// Weighted ray distance, not renormalized by `acc`.
    pub depth: f64,
    pub acc: f64,
    pub weights: Vec<f64>,
}

impl RayRender {
    fn vacuum(dims: usize) -> Self {
        RayRender {
            color: [0.0; 3],
            feature: vec![0.0; dims],
            depth: 0.0,
            acc: 0.0,
            weights: Vec::new(),
        }
    }
}

/// What a batched render should produce.
#[derive(Debug, Clone, Copy)]
pub struct RenderRequest<'a> {
    pub color: bool,
    pub features: bool,
    pub selection: Option<&'a SelectionMask>,
    pub keep_weights: bool,
}

impl Default for RenderRequest<'_> {
    fn default() -> Self {
        RenderRequest {
            color: true,
            features: true,
            selection: None,
            keep_weights: false,
        }
    }
}

impl RenderRequest<'_> {
    fn dims(&self, params: &FieldParams) -> usize {
        if !self.features {
            0
        } else {
            self.selection.map_or(params.feature_dim(), |s| s.selected_count())
        }
    }
}

/// Renders one ray from its samples.
pub fn render_ray(
    params: &FieldParams,
    ray: &Ray,
    samples: RaySamples<'_>,
    selection: Option<&SelectionMask>,
) -> Result<RayRender> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let req = RenderRequest {
        selection,
        keep_weights: true,
        ..RenderRequest::default()
    };
    let mut out = render_samples(params, &[*ray], &[samples], &req)?;
    Ok(out.pop().unwrap())
}

fn render_samples(
    params: &FieldParams,
    rays: &[Ray],
    samples: &[RaySamples<'_>],
    req: &RenderRequest<'_>,
) -> Result<Vec<RayRender>> {
    let mut positions = Vec::new();
    let mut dirs = Vec::new();
    for (ray, s) in rays.iter().zip(samples) {
        positions.extend_from_slice(s.positions);
        if req.color {
            dirs.extend(std::iter::repeat_n(ray.direction, s.len()));
        }
    }
    let idx;
    let dims = match (req.features, req.selection) {
        (false, _) => FeatureDims::None,
        (true, None) => FeatureDims::All,
        (true, Some(mask)) => {
            if mask.dim() != params.feature_dim() {
                return Err(Error::DimensionMismatch {
                    expected: params.feature_dim(),
                    got: mask.dim(),
                });
            }
            idx = mask.indices();
            FeatureDims::Subset(&idx)
        }
    };
    let eval = params.eval_batch(&positions, &dirs, req.color, dims)?;
    let dim = req.dims(params);
    let mut out = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for s in samples {
        let n = s.len();
        let sigma = eval.sigma.slice(ndarray::s![offset..offset + n]);
        let comp = composite(sigma.as_slice().unwrap(), s.t_start, s.t_end);
        let mut r = RayRender::vacuum(dim);
        r.acc = comp.acc();
        for (k, &w) in comp.weights.iter().enumerate() {
            let row = offset + k;
            r.depth += w * s.distance(k);
            if let Some(c) = &eval.color {
                for ch in 0..3 {
                    r.color[ch] += w * c[(row, ch)];
                }
            }
            if let Some(f) = &eval.features {
                for (acc, v) in r.feature.iter_mut().zip(f.row(row)) {
                    *acc += w * v;
                }
            }
        }
        if req.keep_weights {
            r.weights = comp.weights;
        }
        out.push(r);
        offset += n;
    }
    Ok(out)
}

/// Sampling settings for deterministic rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub near: f64,
    /// Rays evaluated per batched forward pass.
    pub chunk: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples_per_ray: 48,
            near: 0.05,
            chunk: 256,
        }
    }
}

/// Renders a set of rays (each `None` ray renders as vacuum). Chunks run in
/// parallel; output order follows input order.
pub fn render_rays(
    params: &FieldParams,
    rays: &[Option<Ray>],
    settings: &RenderSettings,
    req: &RenderRequest<'_>,
) -> Result<Vec<RayRender>> {
    let dim = req.dims(params);
    let chunks: Vec<Result<Vec<RayRender>>> = rays
        .par_chunks(settings.chunk.max(1))
        .map(|chunk| {
            let live: Vec<Ray> = chunk.iter().flatten().copied().collect();
            let batch = uniform_samples(&live, settings.samples_per_ray)?;
            let views: Vec<RaySamples<'_>> = (0..live.len()).map(|r| batch.ray(r)).collect();
            let mut rendered = render_samples(params, &live, &views, req)?.into_iter();
            Ok(chunk
                .iter()
                .map(|r| match r {
                    Some(_) => rendered.next().unwrap(),
                    None => RayRender::vacuum(dim),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Camera rays for the given pixels, clipped to the field's scene bounds.
pub fn camera_rays(params: &FieldParams, pose: &Pose, intrinsics: &Intrinsics, pixels: &[Pixel], near: f64) -> Vec<Option<Ray>> {
    pixels
        .iter()
        .map(|px| {
            let (u, v) = px.center();
            let dir = pose.rotation() * intrinsics.bearing(u, v);
            params.bounds.clip_ray(pose.center(), dir, near)
        })
        .collect()
}

/// Per-pixel renders of one view on a strided grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMap {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Pixel>,
    pub renders: Vec<RayRender>,
    /// Indices into the full feature vector carried by `RayRender::feature`.
    pub feature_dims: Vec<usize>,
}

impl RenderedMap {
    pub fn feature_dim(&self) -> usize {
        self.feature_dims.len()
    }

    /// Ray through a pixel of this map.
    pub fn ray_direction(&self, px: &Pixel) -> Vec3 {
        let (u, v) = px.center();
        self.pose.rotation() * self.intrinsics.bearing(u, v)
    }

    pub fn to_export(&self) -> MapExport {
        MapExport {
            width: self.intrinsics.width as u32,
            height: self.intrinsics.height as u32,
            dim: self.feature_dim() as u32,
            stride: self.stride as u32,
            records: self
                .renders
                .iter()
                .map(|r| MapRecord {
                    rgb: r.color.map(|c| c as f32),
                    depth: r.depth as f32,
                    acc: r.acc as f32,
                    feature: r.feature.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }
}

pub fn render_map(
    params: &FieldParams,
    pose: &Pose,
    intrinsics: &Intrinsics,
    stride: usize,
    selection: Option<&SelectionMask>,
) -> Result<RenderedMap> {
    let req = RenderRequest {
        selection,
        ..RenderRequest::default()
    };
    render_map_with(params, pose, intrinsics, stride, &RenderSettings::default(), &req)
}

pub fn render_map_with(
    params: &FieldParams,
    pose: &Pose,
    intrinsics: &Intrinsics,
    stride: usize,
    settings: &RenderSettings,
    req: &RenderRequest<'_>,
) -> Result<RenderedMap> {
    intrinsics.validate()?;
    let stride = stride.max(1);
    let pixels = all_pixels(intrinsics, stride);
    let (rows, cols) = stride_grid(intrinsics, stride);
    let rays = camera_rays(params, pose, intrinsics, &pixels, settings.near);
    let renders = render_rays(params, &rays, settings, req)?;
    let feature_dims = match (req.features, req.selection) {
        (false, _) => Vec::new(),
        (true, None) => (0..params.feature_dim()).collect(),
        (true, Some(m)) => m.indices(),
    };
    Ok(RenderedMap {
        pose: *pose,
        intrinsics: *intrinsics,
        stride,
        rows,
        cols,
        pixels,
        renders,
        feature_dims,
    })
}

/// Default opacity a pixel needs before its depth is trusted for lifting.
pub const LIFT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoint {
    pub pixel: Pixel,
    pub point: Vec3,
    pub feature: Vec<f64>,
}

/// Places every sufficiently opaque pixel's feature at `o + U(r)·d`.
pub fn lift_to_3d(map: &RenderedMap, threshold: f64) -> Vec<LiftedPoint> {
    map.pixels
        .iter()
        .zip(&map.renders)
        .filter(|(_, r)| r.acc > threshold)
        .map(|(px, r)| LiftedPoint {
            pixel: *px,
            point: map.pose.center() + map.ray_direction(px) * r.depth,
            feature: r.feature.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapRecord {
    pub rgb: [f32; 3],
    pub depth: f32,
    pub acc: f32,
    pub feature: Vec<f32>,
}

/// Flat binary export of a [`RenderedMap`]: little-endian `u32` header
/// `(width, height, D, stride)` followed by one record per grid pixel
/// (`rgb f32×3, depth f32, acc f32, feature f32×D`).
#[derive(Debug, Clone, PartialEq)]
pub struct MapExport {
    pub width: u32,
    pub height: u32,
    pub dim: u32,
    pub stride: u32,
    pub records: Vec<MapRecord>,
}

impl MapExport {
    fn grid_len(width: u32, height: u32, stride: u32) -> usize {
        let s = stride.max(1);
        (width.div_ceil(s) * height.div_ceil(s)) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let rec = 4 * (5 + self.dim as usize);
        let mut out = Vec::with_capacity(16 + rec * self.records.len());
        for v in [self.width, self.height, self.dim, self.stride] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            for v in r.rgb.iter().chain([&r.depth, &r.acc]).chain(&r.feature) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("rendered map", "truncated header"));
        }
        let h: Vec<u32> = bytes[..16]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (width, height, dim, stride) = (h[0], h[1], h[2], h[3]);
        if stride == 0 {
            return Err(Error::format("rendered map", "zero stride"));
        }
        let count = Self::grid_len(width, height, stride);
        let per = 5 + dim as usize;
        let body = &bytes[16..];
        if body.len() != count * per * 4 {
            return Err(Error::format(
                "rendered map",
                format!("expected {} body bytes, found {}", count * per * 4, body.len()),
            ));
        }
        let vals: Vec<f32> = body
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let records = vals
            .chunks(per)
            .map(|r| MapRecord {
                rgb: [r[0], r[1], r[2]],
                depth: r[3],
                acc: r[4],
                feature: r[5..].to_vec(),
            })
            .collect();
        Ok(MapExport {
            width,
            height,
            dim,
            stride,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        MapExport::from_bytes(&std::fs::read(path)?)
    }
}
