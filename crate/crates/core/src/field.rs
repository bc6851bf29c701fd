//! The trainable radiance field.
//!
//! Architecture (defaults in brackets):
//!
//! ```text
//! x ─ normalize ─ PE(L_pos)[6] ─ keep lowest pos_dims[32] ═ f_pos
//!       f_pos ─ ReLU trunk [4 × 64] ─┬─ density head ─ softplus ─ σ
//!                                    └─ bottleneck [15] ═ f_mlp
//!       [f_mlp, PE(dir, L_dir)[2]] ─ ReLU [32] ─ sigmoid ─ rgb
//! ```
//!
//! The intermediate feature of a point is `[f_pos, f_mlp]` (47 dims by
//! default). Density reads the trunk directly, so rendering a subset of
//! `f_mlp` only pays for the selected bottleneck rows.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{stratified_samples, Aabb, Pixel, Vec3};
use crate::nn::{self, relu_backward, relu_inplace, sigmoid, softplus, Adam, Dense};
use crate::renderer;
use crate::synthscene::PosedImage;

/// Normalized coordinates beyond this magnitude are treated as out of scene.
pub const COORD_LIMIT: f64 = 1.5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLNF";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub l_pos: usize,
    /// Leading (lowest-frequency) positional-encoding outputs kept as the
    /// trunk input / `f_pos`.
    pub pos_dims: usize,
    pub l_dir: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    /// Width of the `f_mlp` bottleneck.
    pub feature_width: usize,
    pub color_hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            l_pos: 6,
            pos_dims: 32,
            l_dir: 2,
            trunk_width: 64,
            trunk_depth: 4,
            feature_width: 15,
            color_hidden: 32,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_pos == 0 || self.pos_dims == 0 || self.pos_dims > 6 * self.l_pos {
            return Err(Error::Config(format!(
                "pos_dims {} must be in 1..={}",
                self.pos_dims,
                6 * self.l_pos
            )));
        }
        if self.trunk_width == 0 || self.trunk_depth == 0 || self.feature_width == 0 || self.color_hidden == 0 {
            return Err(Error::Config("field layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Total intermediate feature dimension `D`.
    pub fn feature_dim(&self) -> usize {
        self.pos_dims + self.feature_width
    }

    fn dir_dims(&self) -> usize {
        6 * self.l_dir
    }
}

/// Frequency encoding of a normalized point, octave-major:
/// `[sin(2⁰πx), cos(2⁰πx), sin(2⁰πy), cos(2⁰πy), sin(2⁰πz), cos(2⁰πz), sin(2¹πx), …]`,
/// `6L` values. Truncating a prefix drops the highest octaves first, evenly
/// across axes.
pub fn positional_encode(x: &Vec3, octaves: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; 6 * octaves];
    encode_into(x, octaves, &mut out)?;
    Ok(out)
}

fn encode_into(x: &Vec3, octaves: usize, out: &mut [f64]) -> Result<()> {
    for axis in 0..3 {
        let v = x[axis];
        if !(v.abs() <= COORD_LIMIT) {
            return Err(Error::OutOfSceneBounds { axis, value: v });
        }
    }
    let full = 6 * octaves;
    for (i, slot) in out.iter_mut().enumerate().take(full) {
        let octave = i / 6;
        let axis = (i % 6) / 2;
        let arg = (1u64 << octave) as f64 * PI * x[axis];
        *slot = if i % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    Ok(())
}

/// Single-point evaluation with all taps.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval {
    pub sigma: f64,
    pub color: [f64; 3],
    pub f_pos: Vec<f64>,
    pub f_mlp: Vec<f64>,
}

impl PointEval {
    pub fn feature(&self) -> Vec<f64> {
        self.f_pos.iter().chain(&self.f_mlp).copied().collect()
    }
}

/// Which intermediate feature dimensions a batched evaluation should return.
#[derive(Debug, Clone, Copy)]
pub enum FeatureDims<'a> {
    None,
    All,
    /// Indices into the `D`-dimensional feature, in output order.
    Subset(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct BatchEval {
    pub sigma: Array1<f64>,
    pub color: Option<Array2<f64>>,
    /// `n × k` for the requested feature dims.
    pub features: Option<Array2<f64>>,
}

/// Activations kept by [`FieldParams::forward_train`] for the backward pass.
#[derive(Debug)]
pub struct Tape {
    trunk_inputs: Vec<Array2<f64>>,
    trunk_pre: Vec<Array2<f64>>,
    trunk_out: Array2<f64>,
    density_pre: Array1<f64>,
    color_in: Array2<f64>,
    color_hidden_pre: Array2<f64>,
    color_hidden: Array2<f64>,
    color: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub bounds: Aabb,
    /// Trunk layers, then density head, bottleneck, color hidden, color output.
    pub layers: Vec<Dense>,
}

impl FieldParams {
    pub fn init(config: FieldConfig, bounds: Aabb, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.trunk_depth + 4);
        let mut input = config.pos_dims;
        for _ in 0..config.trunk_depth {
            layers.push(Dense::he(input, config.trunk_width, 1.0, &mut rng));
            input = config.trunk_width;
        }
        layers.push(Dense::he(config.trunk_width, 1, 0.1, &mut rng));
        layers.push(Dense::he(config.trunk_width, config.feature_width, 0.5, &mut rng));
        layers.push(Dense::he(
            config.feature_width + config.dir_dims(),
            config.color_hidden,
            1.0,
            &mut rng,
        ));
        layers.push(Dense::he(config.color_hidden, 3, 0.5, &mut rng));
        Ok(FieldParams { config, bounds, layers })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn density_idx(&self) -> usize {
        self.config.trunk_depth
    }

    pub fn density_head(&self) -> &Dense {
        &self.layers[self.density_idx()]
    }

    pub fn density_head_mut(&mut self) -> &mut Dense {
        let i = self.density_idx();
        &mut self.layers[i]
    }

    fn bottleneck(&self) -> &Dense {
        &self.layers[self.density_idx() + 1]
    }

    fn color_hidden(&self) -> &Dense {
        &self.layers[self.density_idx() + 2]
    }

    fn color_out(&self) -> &Dense {
        &self.layers[self.density_idx() + 3]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Flat parameter vector in checkpoint declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.iter().all(Dense::is_finite) {
            Ok(())
        } else {
            Err(Error::CorruptCheckpoint("non-finite parameter".into()))
        }
    }

    /// Normalized, truncated positional encodings for a batch of world points.
    pub fn encode_positions(&self, positions: &[Vec3]) -> Result<Array2<f64>> {
        let c = &self.config;
        let mut out = Array2::zeros((positions.len(), c.pos_dims));
        let mut buf = vec![0.0; 6 * c.l_pos];
        for (i, p) in positions.iter().enumerate() {
            encode_into(&self.bounds.normalize(p), c.l_pos, &mut buf)?;
            out.row_mut(i)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&buf[..c.pos_dims]);
        }
        Ok(out)
    }

    fn encode_dirs(&self, dirs: &[Vec3]) -> Result<Array2<f64>> {
        let l = self.config.l_dir;
        let mut out = Array2::zeros((dirs.len(), 6 * l));
        for (i, d) in dirs.iter().enumerate() {
            encode_into(d, l, out.row_mut(i).as_slice_mut().unwrap())?;
        }
        Ok(out)
    }

    fn trunk(&self, f_pos: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(f_pos);
        relu_inplace(&mut h);
        for layer in &self.layers[1..self.config.trunk_depth] {
            h = layer.forward(h.view());
            relu_inplace(&mut h);
        }
        h
    }

    fn density(&self, trunk: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
        let pre = self.density_head().forward(trunk).column(0).to_owned();
        let sigma = pre.mapv(softplus);
        (sigma, pre)
    }

    fn color_from(&self, f_mlp: ArrayView2<f64>, dirs: &[Vec3]) -> Result<Array2<f64>> {
        let dir_pe = self.encode_dirs(dirs)?;
        let input = concatenate(Axis(1), &[f_mlp, dir_pe.view()]).expect("shapes agree");
        let mut hidden = self.color_hidden().forward(input.view());
        relu_inplace(&mut hidden);
        Ok(self.color_out().forward(hidden.view()).mapv(sigmoid))
    }

    /// Batched evaluation. `dirs` holds one unit view direction per point and
    /// may be empty when color is not requested.
    pub fn eval_batch(
        &self,
        positions: &[Vec3],
        dirs: &[Vec3],
        want_color: bool,
        dims: FeatureDims<'_>,
    ) -> Result<BatchEval> {
        let d_total = self.feature_dim();
        let pos_dims = self.config.pos_dims;
        let f_pos = self.encode_positions(positions)?;
        let trunk = self.trunk(f_pos.view());
        let (sigma, _) = self.density(trunk.view());

        let mlp_rows: Vec<usize> = match dims {
            FeatureDims::None => Vec::new(),
            FeatureDims::All => (0..self.config.feature_width).collect(),
            FeatureDims::Subset(idx) => {
                if let Some(&bad) = idx.iter().find(|&&d| d >= d_total) {
                    return Err(Error::DimensionMismatch {
                        expected: d_total,
                        got: bad + 1,
                    });
                }
                idx.iter().filter(|&&d| d >= pos_dims).map(|&d| d - pos_dims).collect()
            }
        };

        let color;
        let f_mlp_sel;
        if want_color {
            if dirs.len() != positions.len() {
                return Err(Error::DimensionMismatch {
                    expected: positions.len(),
                    got: dirs.len(),
                });
            }
            let f_mlp = self.bottleneck().forward(trunk.view());
            color = Some(self.color_from(f_mlp.view(), dirs)?);
            f_mlp_sel = f_mlp.select(Axis(1), &mlp_rows);
        } else {
            color = None;
            f_mlp_sel = if mlp_rows.is_empty() {
                Array2::zeros((positions.len(), 0))
            } else {
                self.bottleneck().forward_rows(trunk.view(), &mlp_rows)
            };
        }

        let features = match dims {
            FeatureDims::None => None,
            FeatureDims::All => Some(concatenate(Axis(1), &[f_pos.view(), f_mlp_sel.view()]).unwrap()),
            FeatureDims::Subset(idx) => {
                let mut out = Array2::zeros((positions.len(), idx.len()));
                let mut mlp_col = 0;
                for (j, &d) in idx.iter().enumerate() {
                    if d < pos_dims {
                        out.column_mut(j).assign(&f_pos.column(d));
                    } else {
                        out.column_mut(j).assign(&f_mlp_sel.column(mlp_col));
                        mlp_col += 1;
                    }
                }
                Some(out)
            }
        };
        Ok(BatchEval {
            sigma,
            color,
            features,
        })
    }

    /// Full evaluation of one point, validating parameters first.
    pub fn eval_point(&self, x: &Vec3, view_dir: &Vec3) -> Result<PointEval> {
        self.validate()?;
        let out = self.eval_batch(&[*x], &[*view_dir], true, FeatureDims::All)?;
        let color = out.color.unwrap();
        let feat = out.features.unwrap();
        let pd = self.config.pos_dims;
        Ok(PointEval {
            sigma: out.sigma[0],
            color: [color[(0, 0)], color[(0, 1)], color[(0, 2)]],
            f_pos: feat.slice(s![0, ..pd]).to_vec(),
            f_mlp: feat.slice(s![0, pd..]).to_vec(),
        })
    }

    /// Density and color for training, keeping activations for [`Self::backward`].
    pub fn forward_train(&self, positions: &[Vec3], dirs: &[Vec3]) -> Result<(Array1<f64>, Array2<f64>, Tape)> {
        let f_pos = self.encode_positions(positions)?;
        let mut trunk_inputs = Vec::with_capacity(self.config.trunk_depth);
        let mut trunk_pre = Vec::with_capacity(self.config.trunk_depth);
        let mut h = f_pos;
        for layer in &self.layers[..self.config.trunk_depth] {
            let pre = layer.forward(h.view());
            let mut next = pre.clone();
            relu_inplace(&mut next);
            trunk_inputs.push(h);
            trunk_pre.push(pre);
            h = next;
        }
        let (sigma, density_pre) = self.density(h.view());
        let f_mlp = self.bottleneck().forward(h.view());
        let dir_pe = self.encode_dirs(dirs)?;
        let color_in = concatenate(Axis(1), &[f_mlp.view(), dir_pe.view()]).unwrap();
        let color_hidden_pre = self.color_hidden().forward(color_in.view());
        let mut color_hidden = color_hidden_pre.clone();
        relu_inplace(&mut color_hidden);
        let color = self.color_out().forward(color_hidden.view()).mapv(sigmoid);
        let tape = Tape {
            trunk_inputs,
            trunk_pre,
            trunk_out: h,
            density_pre,
            color_in,
            color_hidden_pre,
            color_hidden,
            color: color.clone(),
        };
        Ok((sigma, color, tape))
    }

    /// Parameter gradients from `dL/dσ` (n) and `dL/dc` (n × 3).
    pub fn backward(&self, tape: &Tape, d_sigma: &Array1<f64>, d_color: &Array2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
            .collect();
        let di = self.density_idx();

        let d_out = d_color * &tape.color.mapv(|c| c * (1.0 - c));
        let mut d_hidden = self.color_out().backward(tape.color_hidden.view(), d_out.view(), &mut grads[di + 3]);
        relu_backward(&tape.color_hidden_pre, &mut d_hidden);
        let d_color_in = self.color_hidden().backward(tape.color_in.view(), d_hidden.view(), &mut grads[di + 2]);
        let fw = self.config.feature_width;
        let d_f_mlp = d_color_in.slice(s![.., ..fw]);
        let mut d_trunk = self.bottleneck().backward(tape.trunk_out.view(), d_f_mlp, &mut grads[di + 1]);

        let d_pre = (d_sigma * &tape.density_pre.mapv(sigmoid)).insert_axis(Axis(1));
        d_trunk += &self.density_head().backward(tape.trunk_out.view(), d_pre.view(), &mut grads[di]);

        for l in (0..self.config.trunk_depth).rev() {
            relu_backward(&tape.trunk_pre[l], &mut d_trunk);
            d_trunk = self.layers[l].backward(tape.trunk_inputs[l].view(), d_trunk.view(), &mut grads[l]);
        }
        grads
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.l_pos,
            c.pos_dims,
            c.l_dir,
            c.trunk_width,
            c.trunk_depth,
            c.feature_width,
            c.color_hidden,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| -> Result<usize> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| corrupt("truncated header"))
        };
        let version = u32_at(4)? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let config = FieldConfig {
            l_pos: u32_at(8)?,
            pos_dims: u32_at(12)?,
            l_dir: u32_at(16)?,
            trunk_width: u32_at(20)?,
            trunk_depth: u32_at(24)?,
            feature_width: u32_at(28)?,
            color_hidden: u32_at(32)?,
        };
        config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let f64s: Vec<f64> = bytes[36..]
            .chunks(8)
            .map(|c| {
                c.try_into()
                    .map(f64::from_le_bytes)
                    .map_err(|_| corrupt("trailing bytes"))
            })
            .collect::<Result<_>>()?;
        if f64s.len() < 6 {
            return Err(corrupt("missing bounds"));
        }
        let bounds = Aabb::new(
            [f64s[0], f64s[1], f64s[2]],
            [f64s[3], f64s[4], f64s[5]],
        )
        .map_err(|e| corrupt(&e.to_string()))?;
        let mut params = FieldParams::init(config, bounds, 0)?;
        params
            .set_flat(&f64s[6..])
            .map_err(|e| corrupt(&e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FieldParams::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Rays start at least this far from the camera.
    pub near: f64,
    /// Weight of the squared relative depth error against the images'
    /// analytic depth; 0 trains on color alone.
    pub depth_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            rays_per_batch: 256,
            samples_per_ray: 48,
            lr_start: 1e-2,
            lr_end: 1e-4,
            near: 0.05,
            depth_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Total batch loss per step.
    pub losses: Vec<f64>,
}

/// What a training ray should render to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTarget {
    pub color: [f64; 3],
    /// Ray distance to the first surface, `None` when the ray escapes.
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct TrainRay {
    ray: crate::geometry::Ray,
    target: RayTarget,
}

fn collect_rays(bounds: &Aabb, images: &[PosedImage], near: f64) -> Vec<TrainRay> {
    let mut out = Vec::new();
    for img in images {
        let k = &img.intrinsics;
        for row in 0..k.height {
            for col in 0..k.width {
                let (u, v) = Pixel::new(row, col).center();
                let dir = img.pose.rotation() * k.bearing(u, v);
                if let Some(ray) = bounds.clip_ray(img.pose.center(), dir, near) {
                    out.push(TrainRay {
                        ray,
                        target: RayTarget {
                            color: img.rgb[row * k.width + col],
                            depth: Some(img.depth[row * k.width + col]).filter(|d| d.is_finite()),
                        },
                    });
                }
            }
        }
    }
    out
}

/// Loss and parameter gradients for one batch of rays: mean squared color
/// error over rays and channels, plus `depth_weight` times the mean squared
/// relative error of the rendered depth on rays with a known surface.
pub fn batch_loss_and_grad(
    params: &FieldParams,
    rays: &[crate::geometry::Ray],
    targets: &[RayTarget],
    samples_per_ray: usize,
    depth_weight: f64,
    seed: u64,
) -> Result<(f64, Vec<Dense>)> {
    let batch = stratified_samples(rays, samples_per_ray, seed)?;
    let dirs: Vec<Vec3> = batch.ray_index.iter().map(|&r| rays[r].direction).collect();
    let (sigma, color, tape) = params.forward_train(&batch.positions, &dirs)?;
    let n = samples_per_ray;
    let mut d_sigma = Array1::zeros(sigma.len());
    let mut d_color = Array2::zeros(color.raw_dim());
    let scale = 1.0 / (3.0 * rays.len() as f64);
    let mut loss = 0.0;
    for (r, target) in targets.iter().enumerate() {
        let range = r * n..(r + 1) * n;
        let samples = batch.ray(r);
        let sig = sigma.slice(s![range.clone()]);
        let col = color.slice(s![range.clone(), ..]);
        let comp = renderer::composite(sig.as_slice().unwrap(), samples.t_start, samples.t_end);
        let mut rendered = [0.0; 3];
        for (k, w) in comp.weights.iter().enumerate() {
            for ch in 0..3 {
                rendered[ch] += w * col[(k, ch)];
            }
        }
        let mut d_rendered = [0.0; 3];
        for ch in 0..3 {
            let e = rendered[ch] - target.color[ch];
            loss += e * e * scale;
            d_rendered[ch] = 2.0 * e * scale;
        }
        let (mut ds, dc) =
            renderer::composite_backward(&comp, sig.as_slice().unwrap(), samples.t_start, samples.t_end, col, &d_rendered);
        if let Some(depth) = target.depth.filter(|_| depth_weight > 0.0) {
            let mids: Vec<f64> = (0..n).map(|k| samples.distance(k)).collect();
            let rendered_depth: f64 = comp.weights.iter().zip(&mids).map(|(w, t)| w * t).sum();
            let e = (rendered_depth - depth) / depth;
            let dscale = depth_weight / rays.len() as f64;
            loss += dscale * e * e;
            let dd = renderer::composite_backward_scalar(&comp, samples.t_start, samples.t_end, &mids, 2.0 * dscale * e / depth);
            ds += &dd;
        }
        d_sigma.slice_mut(s![range.clone()]).assign(&ds);
        d_color.slice_mut(s![range, ..]).assign(&dc);
    }
    let grads = params.backward(&tape, &d_sigma, &d_color);
    Ok((loss, grads))
}

/// Minibatch Adam on squared color error, learning rate decaying
/// exponentially from `lr_start` to `lr_end`.
pub fn train(params: &FieldParams, images: &[PosedImage], schedule: &TrainConfig) -> Result<(FieldParams, TrainLog)> {
    if images.is_empty() {
        return Err(Error::EmptyInput("training images"));
    }
    let mut params = params.clone();
    let pool = collect_rays(&params.bounds, images, schedule.near);
    if pool.is_empty() {
        return Err(Error::EmptyInput("training rays inside scene bounds"));
    }
    let sizes: Vec<usize> = params
        .layers
        .iter()
        .flat_map(|l| [l.w.len(), l.b.len()])
        .collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = TrainLog::default();
    let mut rays = Vec::with_capacity(schedule.rays_per_batch);
    let mut targets = Vec::with_capacity(schedule.rays_per_batch);
    for step in 0..schedule.steps {
        rays.clear();
        targets.clear();
        for _ in 0..schedule.rays_per_batch {
            let tr = pool[rng.random_range(0..pool.len())];
            rays.push(tr.ray);
            targets.push(tr.target);
        }
        let sample_seed = rng.random::<u64>();
        let (loss, grads) = batch_loss_and_grad(
            &params,
            &rays,
            &targets,
            schedule.samples_per_ray,
            schedule.depth_weight,
            sample_seed,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.losses.push(loss);
        let lr = nn::exp_decay(schedule.lr_start, schedule.lr_end, step, schedule.steps);
        let mut p: Vec<&mut [f64]> = params
            .layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect();
        let g: Vec<&[f64]> = grads
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect();
        adam.step(lr, &mut p, &g);
        if step % 200 == 0 {
            log::debug!("field step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    params.validate().map_err(|_| Error::Diverged {
        step: schedule.steps,
        loss: f64::NAN,
    })?;
    Ok((params, log))
}
