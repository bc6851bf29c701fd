//! Small batched building blocks shared by the field, the query projector and
//! the place classifier: dense and 3×3 conv layers with hand-written
//! backward passes, activations, and an Adam optimizer.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn he(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain * (2.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Dense {
            w: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `x · Wᵀ + b` for a batch of rows.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Forward restricted to a subset of output units.
    pub fn forward_rows(&self, x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
        let w = self.w.select(Axis(0), rows);
        let b = self.b.select(Axis(0), rows);
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &dy.t().dot(&x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the pre-activation was not positive.
pub fn relu_backward(pre: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy).and(pre).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 3×3 convolution, zero padding 1, configurable stride, over `C × H × W` maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    /// `out × (in · 9)`, patch layout channel-major then ky, kx.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn he(input: usize, output: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let dense = Dense::he(input * 9, output, 1.0, rng);
        Conv3x3 {
            w: dense.w,
            b: dense.b,
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv3x3 {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Patch matrix `(Ho·Wo) × (C·9)`.
    pub fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let mut cols = Array2::zeros((ho * wo, c * 9));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut(oy * wo + ox);
                let (cy, cx) = ((oy * self.stride) as isize, (ox * self.stride) as isize);
                for ch in 0..c {
                    for ky in 0..3isize {
                        let iy = cy + ky - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3isize {
                            let ix = cx + kx - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[ch * 9 + (ky * 3 + kx) as usize] = x[(ch, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = shape;
        let (ho, wo) = self.output_size(h, w);
        let mut x = Array3::zeros(shape);
        for oy in 0..ho {
            for ox in 0..wo {
                let row = cols.row(oy * wo + ox);
                let (cy, cx) = ((oy * self.stride) as isize, (ox * self.stride) as isize);
                for ch in 0..c {
                    for ky in 0..3isize {
                        let iy = cy + ky - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3isize {
                            let ix = cx + kx - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[(ch, iy as usize, ix as usize)] += row[ch * 9 + (ky * 3 + kx) as usize];
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the `(Ho·Wo) × out` pre-activation and the patch matrix for backward.
    pub fn forward(&self, x: &Array3<f64>) -> (Array2<f64>, Array2<f64>) {
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.w.t());
        y += &self.b;
        (y, cols)
    }

    pub fn forward_rows(&self, x: &Array3<f64>, rows: &[usize]) -> Array2<f64> {
        let cols = self.im2col(x);
        let w = self.w.select(Axis(0), rows);
        let mut y = cols.dot(&w.t());
        y += &self.b.select(Axis(0), rows);
        y
    }

    /// `dy` is `(Ho·Wo) × out`; returns `dL/dx` shaped like the input.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        dy: &Array2<f64>,
        input_shape: (usize, usize, usize),
        grad: &mut Conv3x3,
    ) -> Array3<f64> {
        grad.w += &dy.t().dot(cols);
        grad.b += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.w);
        self.col2im(&dcols, input_shape)
    }
}

/// `(H·W) × C` activation rows back to a `C × H × W` map.
pub fn rows_to_map(rows: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = rows.ncols();
    let mut out = Array3::zeros((c, h, w));
    for (i, row) in rows.outer_iter().enumerate() {
        let (y, x) = (i / w, i % w);
        for ch in 0..c {
            out[(ch, y, x)] = row[ch];
        }
    }
    out
}

pub fn map_to_rows(map: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let mut out = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x, ch)] = map[(ch, y, x)];
            }
        }
    }
    out
}

/// Bilinear resampling of a `C × H × W` map to `C × Ho × Wo` with
/// align-corners-false sampling. Returns the sampling stencil so the
/// operation can be back-propagated.
pub fn bilinear_resize(map: &Array3<f64>, ho: usize, wo: usize) -> (Array3<f64>, Vec<[(usize, f64); 4]>) {
    let (c, h, w) = map.dim();
    let mut stencil = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        let fy = ((oy as f64 + 0.5) * h as f64 / ho as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f64;
        for ox in 0..wo {
            let fx = ((ox as f64 + 0.5) * w as f64 / wo as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f64;
            stencil.push([
                (y0 * w + x0, (1.0 - ay) * (1.0 - ax)),
                (y0 * w + x1, (1.0 - ay) * ax),
                (y1 * w + x0, ay * (1.0 - ax)),
                (y1 * w + x1, ay * ax),
            ]);
        }
    }
    let mut out = Array3::zeros((c, ho, wo));
    for ch in 0..c {
        let plane = map.slice(s![ch, .., ..]);
        let flat: Vec<f64> = plane.iter().copied().collect();
        for (i, st) in stencil.iter().enumerate() {
            out[(ch, i / wo, i % wo)] = st.iter().map(|&(j, a)| a * flat[j]).sum();
        }
    }
    (out, stencil)
}

pub fn bilinear_backward(dout: &Array3<f64>, stencil: &[[(usize, f64); 4]], h: usize, w: usize) -> Array3<f64> {
    let (c, _, wo) = dout.dim();
    let mut din = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (i, st) in stencil.iter().enumerate() {
            let g = dout[(ch, i / wo, i % wo)];
            for &(j, a) in st {
                din[(ch, j / w, j % w)] += a * g;
            }
        }
    }
    din
}

/// Adam over a flat list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; `params[i]` and `grads[i]` must match the sizes given at
    /// construction.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Exponential decay from `start` at step 0 to `end` at the final step.
pub fn exp_decay(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 || start == end {
        return start;
    }
    let frac = step as f64 / (total - 1) as f64;
    if start <= 0.0 || end <= 0.0 {
        return start + (end - start) * frac;
    }
    start * (end / start).powf(frac)
}
