//! Coarse localization as place recognition: training poses are grouped by
//! position and then viewing direction, and a small classifier trained with
//! an additive angular margin maps a query image to a group whose
//! representative pose seeds fine matching.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::nn::{exp_decay, map_to_rows, relu_backward, rows_to_map, Adam, Conv3x3, Dense};
use crate::synthscene::PosedImage;

const LLOYD_ROUNDS: usize = 100;
/// Scene units per radian when comparing a member to its group centroid.
pub const ANGLE_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseGroup {
    pub id: usize,
    pub members: Vec<usize>,
    pub centroid: [f64; 3],
    pub mean_direction: [f64; 3],
    pub representative_id: usize,
    pub representative: Pose,
}

impl PoseGroup {
    /// Distance of a pose to the group centroid: translation offset plus
    /// weighted viewing-direction angle.
    pub fn combined_distance(&self, pose: &Pose) -> f64 {
        let dt = (pose.center() - Vec3::from(self.centroid)).norm();
        dt + ANGLE_WEIGHT * angle(&pose.viewing_direction(), &Vec3::from(self.mean_direction))
    }
}

/// The representative pose used to initialize matching.
pub fn initial_pose(group: &PoseGroup) -> Pose {
    group.representative
}

pub fn angle(a: &Vec3, b: &Vec3) -> f64 {
    // atan2 keeps precision near 0 and π.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Farthest-point seeding then Lloyd rounds. `dist` is the point-to-center
/// distance and `update` builds a center from member points.
fn lloyd<T: Clone>(
    points: &[T],
    k: usize,
    rng: &mut ChaCha8Rng,
    dist: impl Fn(&T, &T) -> f64,
    update: impl Fn(&[&T]) -> T,
) -> Vec<usize> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist(p, &centers[0])).collect();
    while centers.len() < k {
        let far = (0..n).fold(0, |b, i| if min_d[i] > min_d[b] { i } else { b });
        centers.push(points[far].clone());
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(dist(p, centers.last().unwrap()));
        }
    }
    let assign = |centers: &[T]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (c, ctr) in centers.iter().enumerate() {
                    let d = dist(p, ctr);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..LLOYD_ROUNDS {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&T> = (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
            if !members.is_empty() {
                *center = update(&members);
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn mean_direction(dirs: &[&Vec3]) -> Vec3 {
    let s: Vec3 = dirs.iter().copied().sum();
    let norm = s.norm();
    if norm < 1e-12 {
        *dirs[0]
    } else {
        s / norm
    }
}

/// Euclidean K-means on camera centers, then within each spatial cluster
/// K-means on viewing directions under angular distance. Empty clusters are
/// dropped; group ids follow (spatial, orientation) order.
pub fn two_stage_cluster(poses: &[Pose], k_spatial: usize, k_orient: usize, rng_seed: u64) -> Result<Vec<PoseGroup>> {
    if poses.is_empty() {
        return Err(Error::EmptyInput("poses"));
    }
    if k_spatial == 0 || k_spatial > poses.len() || k_orient == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ K_spatial ≤ {} and K_orient ≥ 1, got {k_spatial}, {k_orient}",
            poses.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let centers: Vec<Vec3> = poses.iter().map(Pose::center).collect();
    let spatial = lloyd(
        &centers,
        k_spatial,
        &mut rng,
        |a, b| (a - b).norm(),
        |m| m.iter().copied().sum::<Vec3>() / m.len() as f64,
    );
    let mut groups = Vec::new();
    for s in 0..k_spatial {
        let ids: Vec<usize> = (0..poses.len()).filter(|&i| spatial[i] == s).collect();
        if ids.is_empty() {
            continue;
        }
        let dirs: Vec<Vec3> = ids.iter().map(|&i| poses[i].viewing_direction()).collect();
        let orient = lloyd(&dirs, k_orient.min(ids.len()), &mut rng, angle, mean_direction);
        for o in 0..k_orient.min(ids.len()) {
            let members: Vec<usize> = (0..ids.len()).filter(|&j| orient[j] == o).map(|j| ids[j]).collect();
            if members.is_empty() {
                continue;
            }
            let centroid = members.iter().map(|&i| centers[i]).sum::<Vec3>() / members.len() as f64;
            let mdirs: Vec<Vec3> = members.iter().map(|&i| poses[i].viewing_direction()).collect();
            let mean_dir = mean_direction(&mdirs.iter().collect::<Vec<_>>());
            let mut group = PoseGroup {
                id: groups.len(),
                members,
                centroid: centroid.into(),
                mean_direction: mean_dir.into(),
                representative_id: 0,
                representative: Pose::identity(),
            };
            let rep = group
                .members
                .iter()
                .copied()
                .fold(None::<(usize, f64)>, |best, i| {
                    let d = group.combined_distance(&poses[i]);
                    match best {
                        Some((_, bd)) if bd <= d => best,
                        _ => Some((i, d)),
                    }
                })
                .unwrap()
                .0;
            group.representative_id = rep;
            group.representative = poses[rep];
            groups.push(group);
        }
    }
    Ok(groups)
}

/// Group of each pose id, or `None` for ids no group lists.
pub fn group_labels(groups: &[PoseGroup], pose_count: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; pose_count];
    for g in groups {
        for &m in &g.members {
            out[m] = Some(g.id);
        }
    }
    out
}

pub fn save_groups(path: &Path, groups: &[PoseGroup]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(groups)?)?;
    Ok(())
}

pub fn load_groups(path: &Path) -> Result<Vec<PoseGroup>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceOutput {
    pub loss: f64,
    pub d_feature: Array1<f64>,
    pub d_embeddings: Array2<f64>,
    pub probabilities: Array1<f64>,
}

const UNIT_TOL: f64 = 1e-6;

/// Additive angular margin loss for one example:
/// `−log softmax_y(s·cos(θ_y + m), s·cos θ_j)` with `cos θ_j = ⟨f, e_j⟩`.
/// Gradients are with respect to `f` and the rows `e_j` as free vectors.
pub fn arcface_loss(embeddings: &Array2<f64>, feature: &Array1<f64>, label: usize, margin: f64, scale: f64) -> Result<ArcFaceOutput> {
    let norm = feature.dot(feature).sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnit(norm));
    }
    for row in embeddings.outer_iter() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnit(n));
        }
    }
    let classes = embeddings.nrows();
    if label >= classes {
        return Err(Error::InvalidArgument(format!("label {label} outside {classes} classes")));
    }
    let cos = embeddings.dot(feature);
    let cy = cos[label].clamp(-1.0, 1.0);
    let sin_y = (1.0 - cy * cy).max(0.0).sqrt();
    // cos(θ + m) expanded so that m = 0 gives cos θ exactly.
    let target = cy * margin.cos() - sin_y * margin.sin();
    let mut logits = cos.mapv(|c| scale * c);
    logits[label] = scale * target;
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let z = exp.sum();
    let probs = exp / z;
    // ln(1 + Σ_{j≠y} e^{l_j − l_y}) keeps tiny losses from rounding to zero.
    let rest: f64 = (0..classes).filter(|&j| j != label).map(|j| (logits[j] - logits[label]).exp()).sum();
    let loss = if rest.is_finite() { rest.ln_1p() } else { max + z.ln() - logits[label] };

    let mut d_cos = probs.mapv(|p| scale * p);
    // d cos(θ+m) / d cos θ = cos m + sin m · cos θ / sin θ.
    let chain = margin.cos() + if margin != 0.0 { margin.sin() * cy / sin_y.max(1e-12) } else { 0.0 };
    d_cos[label] = (probs[label] - 1.0) * scale * chain;
    let d_feature = embeddings.t().dot(&d_cos);
    let d_embeddings = d_cos
        .view()
        .insert_axis(Axis(1))
        .dot(&feature.view().insert_axis(Axis(0)));
    Ok(ArcFaceOutput {
        loss,
        d_feature,
        d_embeddings,
        probabilities: probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseConfig {
    pub k_spatial: usize,
    pub k_orient: usize,
    pub embedding_dim: usize,
    pub margin: f64,
    pub scale: f64,
    pub channels: [usize; 4],
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            k_spatial: 8,
            k_orient: 2,
            embedding_dim: 64,
            margin: 0.2,
            scale: 16.0,
            channels: [8, 16, 32, 32],
            epochs: 60,
            batch: 8,
            lr_start: 3e-3,
            lr_end: 1e-4,
            seed: 0,
        }
    }
}

struct Cache {
    shapes: Vec<(usize, usize, usize)>,
    pres: Vec<Array2<f64>>,
    cols: Vec<Array2<f64>>,
    flat: Array1<f64>,
    z: Array1<f64>,
}

/// Four stride-2 3×3 convolutions, a dense layer to the embedding, and
/// unit-norm class embeddings compared by cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacePredictor {
    pub convs: Vec<Conv3x3>,
    pub dense: Dense,
    /// `classes × d`, unit rows.
    pub embeddings: Array2<f64>,
    pub margin: f64,
    pub scale: f64,
    pub input_size: (usize, usize),
    pub trained: bool,
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
}

fn image_tensor(img: &PosedImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| 2.0 * img.rgb[y * w + x][c] - 1.0)
}

impl PlacePredictor {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn new(classes: usize, input_size: (usize, usize), config: &CoarseConfig) -> Result<Self> {
        if classes == 0 {
            return Err(Error::EmptyInput("pose groups"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut convs = Vec::new();
        let mut c_in = 3;
        let (mut h, mut w) = input_size;
        for &c in &config.channels {
            convs.push(Conv3x3::he(c_in, c, 2, &mut rng));
            c_in = c;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let dense = Dense::he(c_in * h * w, config.embedding_dim, 1.0, &mut rng);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut embeddings = Array2::from_shape_fn((classes, config.embedding_dim), |_| rng.sample(normal));
        normalize_rows(&mut embeddings);
        Ok(PlacePredictor {
            convs,
            dense,
            embeddings,
            margin: config.margin,
            scale: config.scale,
            input_size,
            trained: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.embeddings.nrows()
    }

    fn check(&self, img: &PosedImage) -> Result<()> {
        if (img.height(), img.width()) != self.input_size {
            return Err(Error::DimensionMismatch {
                expected: self.input_size.0 * self.input_size.1,
                got: img.height() * img.width(),
            });
        }
        Ok(())
    }

    fn forward(&self, img: &PosedImage) -> (Array1<f64>, Cache) {
        let mut x = image_tensor(img);
        let mut cache = Cache {
            shapes: Vec::new(),
            pres: Vec::new(),
            cols: Vec::new(),
            flat: Array1::zeros(0),
            z: Array1::zeros(0),
        };
        for conv in &self.convs {
            let (_, h, w) = x.dim();
            let (ho, wo) = conv.output_size(h, w);
            cache.shapes.push(x.dim());
            let (pre, cols) = conv.forward(&x);
            x = rows_to_map(&pre.mapv(|v| v.max(0.0)), ho, wo);
            cache.pres.push(pre);
            cache.cols.push(cols);
        }
        let flat = Array1::from_iter(x.iter().copied());
        let z = self.dense.forward(flat.view().insert_axis(Axis(0))).row(0).to_owned();
        let n = z.dot(&z).sqrt().max(1e-12);
        let f = &z / n;
        cache.flat = flat;
        cache.z = z;
        (f, cache)
    }

    fn backward(&self, cache: &Cache, d_f: &Array1<f64>, g_convs: &mut [Conv3x3], g_dense: &mut Dense) {
        let z = &cache.z;
        let n = z.dot(z).sqrt().max(1e-12);
        let f = z / n;
        let d_z = (d_f - &(&f * f.dot(d_f))) / n;
        let d_flat = self.dense.backward(
            cache.flat.view().insert_axis(Axis(0)),
            d_z.view().insert_axis(Axis(0)),
            g_dense,
        );
        let last = self.convs.len() - 1;
        let (c, h, w) = {
            let (_, hi, wi) = cache.shapes[last];
            let (ho, wo) = self.convs[last].output_size(hi, wi);
            (self.convs[last].out_channels(), ho, wo)
        };
        let mut d_map = Array3::from_shape_vec((c, h, w), d_flat.row(0).to_vec()).expect("flattened map");
        for l in (0..self.convs.len()).rev() {
            let mut d_rows = map_to_rows(&d_map);
            relu_backward(&cache.pres[l], &mut d_rows);
            d_map = self.convs[l].backward(&cache.cols[l], &d_rows, cache.shapes[l], &mut g_convs[l]);
        }
    }

    /// Unit embedding of an image.
    pub fn embed(&self, img: &PosedImage) -> Result<Array1<f64>> {
        self.check(img)?;
        Ok(self.forward(img).0)
    }

    /// Class probabilities from the cosine logits without margin.
    pub fn probabilities(&self, img: &PosedImage) -> Result<Array1<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let f = self.embed(img)?;
        let logits = self.embeddings.dot(&f) * self.scale;
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let e = logits.mapv(|v| (v - max).exp());
        let z = e.sum();
        Ok(e / z)
    }

    /// `(group id, softmax confidence)` of the best class.
    pub fn predict_place(&self, img: &PosedImage) -> Result<(usize, f64)> {
        let p = self.probabilities(img)?;
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        Ok((best, p[best]))
    }

    pub fn train(images: &[PosedImage], labels: &[usize], classes: usize, config: &CoarseConfig) -> Result<(PlacePredictor, Vec<f64>)> {
        let first = images.first().ok_or(Error::EmptyInput("training images"))?;
        if labels.len() != images.len() {
            return Err(Error::DimensionMismatch {
                expected: images.len(),
                got: labels.len(),
            });
        }
        let mut p = PlacePredictor::new(classes, (first.height(), first.width()), config)?;
        for img in images {
            p.check(img)?;
        }
        let mut sizes: Vec<usize> = p.convs.iter().flat_map(|c| [c.w.len(), c.b.len()]).collect();
        sizes.extend([p.dense.w.len(), p.dense.b.len(), p.embeddings.len()]);
        let mut adam = Adam::new(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let batch = config.batch.max(1);
        let total = config.epochs * images.len().div_ceil(batch);
        let mut step = 0;
        let mut losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut g_convs: Vec<Conv3x3> = p.convs.iter().map(Conv3x3::zeros_like).collect();
                let mut g_dense = Dense::zeros(p.dense.input_dim(), p.dense.output_dim());
                let mut g_emb = Array2::zeros(p.embeddings.raw_dim());
                for &i in chunk {
                    let (f, cache) = p.forward(&images[i]);
                    let out = arcface_loss(&p.embeddings, &f, labels[i], p.margin, p.scale)?;
                    epoch_loss += out.loss / images.len() as f64;
                    let inv = 1.0 / chunk.len() as f64;
                    g_emb.scaled_add(inv, &out.d_embeddings);
                    p.backward(&cache, &(out.d_feature * inv), &mut g_convs, &mut g_dense);
                }
                let lr = exp_decay(config.lr_start, config.lr_end, step, total);
                let mut grads: Vec<&[f64]> = g_convs
                    .iter()
                    .flat_map(|c| [c.w.as_slice().unwrap(), c.b.as_slice().unwrap()])
                    .collect();
                grads.extend([g_dense.w.as_slice().unwrap(), g_dense.b.as_slice().unwrap(), g_emb.as_slice().unwrap()]);
                let PlacePredictor {
                    convs, dense, embeddings, ..
                } = &mut p;
                let mut params: Vec<&mut [f64]> = convs
                    .iter_mut()
                    .flat_map(|c| [c.w.as_slice_mut().unwrap(), c.b.as_slice_mut().unwrap()])
                    .collect();
                params.push(dense.w.as_slice_mut().unwrap());
                params.push(dense.b.as_slice_mut().unwrap());
                params.push(embeddings.as_slice_mut().unwrap());
                adam.step(lr, &mut params, &grads);
                normalize_rows(&mut p.embeddings);
                step += 1;
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: epoch_loss,
                });
            }
            losses.push(epoch_loss);
        }
        p.trained = true;
        Ok((p, losses))
    }
}
