//! Query-image features in the field's feature domain and dense 2D–3D
//! matching by mutual nearest neighbors.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geometry::{all_pixels, stride_grid, Pixel, Vec3};
use crate::nn::{bilinear_backward, bilinear_resize, exp_decay, map_to_rows, relu_backward, rows_to_map, Adam, Conv3x3};
use crate::renderer::{render_map_with, LiftedPoint, RenderRequest, RenderSettings, RenderedMap};
use crate::selection::SelectionMask;
use crate::synthscene::PosedImage;

/// Rows of `a` processed together when matching.
const MATCH_BLOCK: usize = 64;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mutual nearest neighbors under Euclidean distance. Returns `(i, j, score)`
/// sorted by `i`, where the score is the negative distance. Ties go to the
/// lowest index on both sides.
///
/// Distances are streamed block by block; the full `|a| × |b|` matrix is
/// never stored.
pub fn mutual_nearest(a: &[&[f64]], b: &[&[f64]]) -> Result<Vec<(usize, usize, f64)>> {
    if a.is_empty() {
        return Err(Error::EmptyInput("2D features"));
    }
    if b.is_empty() {
        return Err(Error::EmptyInput("3D features"));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let blocks: Vec<(Vec<(usize, f64)>, Vec<(usize, f64)>)> = a
        .par_chunks(MATCH_BLOCK)
        .enumerate()
        .map(|(blk, rows)| {
            let base = blk * MATCH_BLOCK;
            let mut row_best = vec![(0usize, f64::INFINITY); rows.len()];
            let mut col_best = vec![(usize::MAX, f64::INFINITY); b.len()];
            for (r, fa) in rows.iter().enumerate() {
                for (j, fb) in b.iter().enumerate() {
                    let d = sq_dist(fa, fb);
                    if d < row_best[r].1 {
                        row_best[r] = (j, d);
                    }
                    if d < col_best[j].1 {
                        col_best[j] = (base + r, d);
                    }
                }
            }
            (row_best, col_best)
        })
        .collect();
    let mut col_best = vec![(usize::MAX, f64::INFINITY); b.len()];
    let mut row_best = Vec::with_capacity(a.len());
    for (rows, cols) in blocks {
        row_best.extend(rows);
        // Blocks arrive in row order, so a strict comparison keeps the lowest index.
        for (acc, c) in col_best.iter_mut().zip(cols) {
            if c.1 < acc.1 {
                *acc = c;
            }
        }
    }
    Ok(row_best
        .iter()
        .enumerate()
        .filter(|(i, (j, d))| d.is_finite() && col_best[*j].0 == *i)
        .map(|(i, &(j, d))| (i, j, -d.sqrt()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatureMap {
    pub pixels: Vec<Pixel>,
    pub features: Vec<Vec<f64>>,
    pub rows: usize,
    pub cols: usize,
    /// Feature dimensions carried, as indices into the full feature vector.
    pub dims: Vec<usize>,
}

impl QueryFeatureMap {
    pub fn from_rendered(map: &RenderedMap) -> Self {
        QueryFeatureMap {
            pixels: map.pixels.clone(),
            features: map.renders.iter().map(|r| r.feature.clone()).collect(),
            rows: map.rows,
            cols: map.cols,
            dims: map.feature_dims.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }
}

/// Where query features come from.
#[derive(Debug, Clone, Copy)]
pub enum QuerySource<'a> {
    /// The trained convolutional projector applied to the image.
    Projector(&'a Projector),
    /// Rendered from the field at the image's ground-truth pose.
    Oracle {
        field: &'a FieldParams,
        settings: RenderSettings,
    },
}

pub fn extract_query_features(
    image: &PosedImage,
    source: QuerySource<'_>,
    selection: Option<&SelectionMask>,
    stride: usize,
) -> Result<QueryFeatureMap> {
    match source {
        QuerySource::Oracle { field, settings } => {
            if let Some(m) = selection {
                if m.dim() != field.feature_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: field.feature_dim(),
                        got: m.dim(),
                    });
                }
            }
            let req = RenderRequest {
                color: false,
                features: true,
                selection,
                keep_weights: false,
            };
            let map = render_map_with(field, &image.pose, &image.intrinsics, stride, &settings, &req)?;
            Ok(QueryFeatureMap::from_rendered(&map))
        }
        QuerySource::Projector(p) => p.extract(image, selection, stride),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Pixel,
    pub point: Vec3,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondences {
    pub items: Vec<Correspondence>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,x,y,z,score\n");
        for c in &self.items {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.pixel.row, c.pixel.col, c.point.x, c.point.y, c.point.z, c.score
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("correspondences csv", r);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("row,col,x,y,z,score") {
            return Err(bad("missing header".into()));
        }
        let items = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(format!("expected 6 fields in `{l}`")));
                }
                let u = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
                let x = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
                Ok(Correspondence {
                    pixel: Pixel::new(u(f[0])?, u(f[1])?),
                    point: Vec3::new(x(f[2])?, x(f[3])?, x(f[4])?),
                    score: x(f[5])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Correspondences { items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Correspondences::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Dense 2D–3D correspondences between query features and lifted scene
/// features, sorted by query index.
pub fn match_features(query: &QueryFeatureMap, scene: &[LiftedPoint]) -> Result<Correspondences> {
    let a: Vec<&[f64]> = query.features.iter().map(Vec::as_slice).collect();
    let b: Vec<&[f64]> = scene.iter().map(|l| l.feature.as_slice()).collect();
    let items = mutual_nearest(&a, &b)?
        .into_iter()
        .map(|(i, j, score)| Correspondence {
            pixel: query.pixels[i],
            point: scene[j].point,
            score,
        })
        .collect();
    Ok(Correspondences { items })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub channels: [usize; 2],
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Fraction of the supplied views held out for the validation loss.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            channels: [32, 64],
            epochs: 80,
            batch: 4,
            lr_start: 3e-3,
            lr_end: 3e-4,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// One training view: an image and the feature map rendered at its pose
/// (`D × rows × cols`).
#[derive(Debug, Clone)]
pub struct ProjectorSample {
    pub image: PosedImage,
    pub target: Array3<f64>,
}

impl ProjectorSample {
    pub fn from_render(image: PosedImage, map: &RenderedMap) -> Self {
        let rows = Array2::from_shape_fn((map.renders.len(), map.feature_dim()), |(i, d)| map.renders[i].feature[d]);
        ProjectorSample {
            image,
            target: rows_to_map(&rows, map.rows, map.cols),
        }
    }
}

struct Cache {
    x0: (usize, usize, usize),
    pre1: Array2<f64>,
    cols1: Array2<f64>,
    a1: (usize, usize, usize),
    pre2: Array2<f64>,
    cols2: Array2<f64>,
    a2: (usize, usize, usize),
    cols3: Array2<f64>,
    y3: (usize, usize, usize),
    stencil: Vec<[(usize, f64); 4]>,
}

/// Three 3×3 convolutions (the first with stride 2) followed by bilinear
/// upsampling to the render grid. Predicts standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub convs: [Conv3x3; 3],
    pub input_size: (usize, usize),
    pub stride: usize,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// Mean squared per-dimension error on held-out views (training views
    /// when none are held out); `None` before training.
    pub validation_loss: Option<f64>,
}

fn image_tensor(img: &PosedImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| 2.0 * img.rgb[y * w + x][c] - 1.0)
}

impl Projector {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn new(dim: usize, input_size: (usize, usize), stride: usize, channels: [usize; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projector {
            convs: [
                Conv3x3::he(3, channels[0], 2, &mut rng),
                Conv3x3::he(channels[0], channels[1], 1, &mut rng),
                Conv3x3::he(channels[1], dim, 1, &mut rng),
            ],
            input_size,
            stride,
            mean: Array1::zeros(dim),
            scale: Array1::ones(dim),
            validation_loss: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.convs[2].out_channels()
    }

    fn grid(&self) -> (usize, usize) {
        let (h, w) = self.input_size;
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn check_image(&self, img: &PosedImage) -> Result<()> {
        if (img.height(), img.width()) != self.input_size {
            return Err(Error::DimensionMismatch {
                expected: self.input_size.0 * self.input_size.1,
                got: img.height() * img.width(),
            });
        }
        Ok(())
    }

    /// Standardized prediction `D × rows × cols` plus the backward cache.
    fn forward(&self, img: &PosedImage) -> (Array3<f64>, Cache) {
        let x0 = image_tensor(img);
        let (h, w) = self.input_size;
        let (h2, w2) = self.convs[0].output_size(h, w);
        let (pre1, cols1) = self.convs[0].forward(&x0);
        let a1 = rows_to_map(&pre1.mapv(|v| v.max(0.0)), h2, w2);
        let (pre2, cols2) = self.convs[1].forward(&a1);
        let a2 = rows_to_map(&pre2.mapv(|v| v.max(0.0)), h2, w2);
        let (y3, cols3) = self.convs[2].forward(&a2);
        let y3 = rows_to_map(&y3, h2, w2);
        let (rows, cols) = self.grid();
        let (out, stencil) = bilinear_resize(&y3, rows, cols);
        let cache = Cache {
            x0: x0.dim(),
            pre1,
            cols1,
            a1: a1.dim(),
            pre2,
            cols2,
            a2: a2.dim(),
            cols3,
            y3: y3.dim(),
            stencil,
        };
        (out, cache)
    }

    fn backward(&self, cache: &Cache, dout: &Array3<f64>, grads: &mut [Conv3x3; 3]) {
        let (_, h2, w2) = cache.y3;
        let dy3 = map_to_rows(&bilinear_backward(dout, &cache.stencil, h2, w2));
        let [g1, g2, g3] = grads;
        let mut da2 = map_to_rows(&self.convs[2].backward(&cache.cols3, &dy3, cache.a2, g3));
        relu_backward(&cache.pre2, &mut da2);
        let mut da1 = map_to_rows(&self.convs[1].backward(&cache.cols2, &da2, cache.a1, g2));
        relu_backward(&cache.pre1, &mut da1);
        self.convs[0].backward(&cache.cols1, &da1, cache.x0, g1);
    }

    /// Features in the field's units, `D × rows × cols`.
    pub fn predict(&self, img: &PosedImage) -> Result<Array3<f64>> {
        self.check_image(img)?;
        let (mut out, _) = self.forward(img);
        for (d, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v * self.scale[d] + self.mean[d]);
        }
        Ok(out)
    }

    pub fn extract(&self, img: &PosedImage, selection: Option<&SelectionMask>, stride: usize) -> Result<QueryFeatureMap> {
        if stride != self.stride {
            return Err(Error::InvalidArgument(format!(
                "projector was trained for stride {}, asked for {stride}",
                self.stride
            )));
        }
        let dims: Vec<usize> = match selection {
            Some(m) if m.dim() != self.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: m.dim(),
                })
            }
            Some(m) => m.indices(),
            None => (0..self.dim()).collect(),
        };
        let out = self.predict(img)?;
        let pixels = all_pixels(&img.intrinsics, stride);
        let (rows, cols) = stride_grid(&img.intrinsics, stride);
        let features = (0..rows * cols)
            .map(|i| dims.iter().map(|&d| out[(d, i / cols, i % cols)]).collect())
            .collect();
        Ok(QueryFeatureMap {
            pixels,
            features,
            rows,
            cols,
            dims,
        })
    }

    /// Mean squared per-dimension error (field units) over the given views.
    pub fn evaluate(&self, samples: &[ProjectorSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("projector samples"));
        }
        let mut total = 0.0;
        for s in samples {
            let pred = self.predict(&s.image)?;
            total += (&pred - &s.target).mapv(|v| v * v).mean().unwrap_or(0.0);
        }
        Ok(total / samples.len() as f64)
    }

    /// Fits the projector to regress rendered features under L2. The last
    /// `validation_fraction` of a seeded shuffle is held out and its loss
    /// recorded in `validation_loss`.
    pub fn train(samples: &[ProjectorSample], stride: usize, config: &ProjectorConfig) -> Result<Projector> {
        let first = samples.first().ok_or(Error::EmptyInput("projector samples"))?;
        let dim = first.target.dim().0;
        let input = (first.image.height(), first.image.width());
        let mut p = Projector::new(dim, input, stride, config.channels, config.seed);
        let (rows, cols) = p.grid();
        for s in samples {
            p.check_image(&s.image)?;
            if s.target.dim() != (dim, rows, cols) {
                return Err(Error::DimensionMismatch {
                    expected: dim * rows * cols,
                    got: s.target.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).min(samples.len() - 1);
        let (train_idx, val_idx) = order.split_at(samples.len() - n_val);

        // Per-dimension standardization from the training targets.
        let n = (train_idx.len() * rows * cols) as f64;
        let mut mean = Array1::<f64>::zeros(dim);
        let mut sq = Array1::<f64>::zeros(dim);
        for &i in train_idx {
            for (d, plane) in samples[i].target.outer_iter().enumerate() {
                mean[d] += plane.sum() / n;
                sq[d] += plane.mapv(|v| v * v).sum() / n;
            }
        }
        p.scale = (&sq - &mean.mapv(|m| m * m)).mapv(|v| v.max(0.0).sqrt().max(1e-6));
        p.mean = mean;

        let sizes: Vec<usize> = p.convs.iter().flat_map(|c| [c.w.len(), c.b.len()]).collect();
        let mut adam = Adam::new(&sizes);
        let batch = config.batch.max(1);
        let steps_per_epoch = train_idx.len().div_ceil(batch);
        let total = config.epochs * steps_per_epoch;
        let mut train_order = train_idx.to_vec();
        let mut step = 0;
        for _ in 0..config.epochs {
            train_order.shuffle(&mut rng);
            for chunk in train_order.chunks(batch) {
                let grads: Vec<[Conv3x3; 3]> = chunk
                    .par_iter()
                    .map(|&i| {
                        let s = &samples[i];
                        let (out, cache) = p.forward(&s.image);
                        let mut target = s.target.clone();
                        for (d, mut plane) in target.outer_iter_mut().enumerate() {
                            plane.mapv_inplace(|v| (v - p.mean[d]) / p.scale[d]);
                        }
                        let norm = 2.0 / (out.len() * chunk.len()) as f64;
                        let dout = (&out - &target).mapv(|v| v * norm);
                        let mut g = p.convs.clone().map(|c| c.zeros_like());
                        p.backward(&cache, &dout, &mut g);
                        g
                    })
                    .collect();
                let mut sum = p.convs.clone().map(|c| c.zeros_like());
                for g in &grads {
                    for (acc, gi) in sum.iter_mut().zip(g) {
                        acc.w += &gi.w;
                        acc.b += &gi.b;
                    }
                }
                let lr = exp_decay(config.lr_start, config.lr_end, step, total);
                let grad_slices: Vec<&[f64]> = sum
                    .iter()
                    .flat_map(|c| [c.w.as_slice().unwrap(), c.b.as_slice().unwrap()])
                    .collect();
                let mut params: Vec<&mut [f64]> = p
                    .convs
                    .iter_mut()
                    .flat_map(|c| [c.w.as_slice_mut().unwrap(), c.b.as_slice_mut().unwrap()])
                    .collect();
                adam.step(lr, &mut params, &grad_slices);
                step += 1;
            }
        }
        let held: Vec<ProjectorSample> = if val_idx.is_empty() {
            train_idx.iter().map(|&i| samples[i].clone()).collect()
        } else {
            val_idx.iter().map(|&i| samples[i].clone()).collect()
        };
        p.validation_loss = Some(p.evaluate(&held)?);
        Ok(p)
    }
}
