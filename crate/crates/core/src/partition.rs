//! Splitting a scene among several fields by clustering training poses on
//! the voxels their rays sample, so each pose is served by one field.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{all_pixels, uniform_samples, Aabb, Intrinsics, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Every `pixel_stride`-th pixel in each direction casts a ray.
    pub pixel_stride: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    /// Voxels per side of the occupancy grid.
    pub resolution: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            pixel_stride: 8,
            samples_per_ray: 32,
            near: 0.05,
            resolution: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosePointCloud {
    pub pose_id: usize,
    pub points: Vec<Vec3>,
}

/// Sample positions along a subsampled grid of the pose's rays, restricted
/// to the scene bounds.
pub fn pose_point_cloud(pose_id: usize, pose: &Pose, intrinsics: &Intrinsics, bounds: &Aabb, config: &SamplerConfig) -> Result<PosePointCloud> {
    let rays: Vec<_> = all_pixels(intrinsics, config.pixel_stride.max(1))
        .iter()
        .filter_map(|px| {
            let (u, v) = px.center();
            bounds.clip_ray(pose.center(), pose.rotation() * intrinsics.bearing(u, v), config.near)
        })
        .collect();
    if rays.is_empty() {
        return Err(Error::FrustumMissesScene);
    }
    let batch = uniform_samples(&rays, config.samples_per_ray)?;
    Ok(PosePointCloud {
        pose_id,
        points: batch.positions,
    })
}

/// `G³` bit grid over the scene bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub pose_id: usize,
    pub resolution: usize,
    words: Vec<u64>,
}

impl OccupancyGrid {
    fn empty(pose_id: usize, resolution: usize) -> Self {
        OccupancyGrid {
            pose_id,
            resolution,
            words: vec![0; (resolution.pow(3)).div_ceil(64)],
        }
    }

    pub fn voxel_index(bounds: &Aabb, resolution: usize, p: &Vec3) -> Option<usize> {
        if !bounds.contains(p) {
            return None;
        }
        let mut idx = 0;
        for axis in 0..3 {
            let f = (p[axis] - bounds.min[axis]) / (bounds.max[axis] - bounds.min[axis]);
            let i = ((f * resolution as f64) as usize).min(resolution - 1);
            idx = idx * resolution + i;
        }
        Some(idx)
    }

    pub fn from_points(pose_id: usize, points: &[Vec3], bounds: &Aabb, resolution: usize) -> Self {
        let mut g = OccupancyGrid::empty(pose_id, resolution);
        for p in points {
            if let Some(i) = OccupancyGrid::voxel_index(bounds, resolution, p) {
                g.set(i);
            }
        }
        g
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection(&self, other: &OccupancyGrid) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn union(&self, other: &OccupancyGrid) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    /// `1 − |A ∩ B| / |A ∪ B|`; zero for two empty grids.
    pub fn jaccard_distance(&self, other: &OccupancyGrid) -> f64 {
        let u = self.union(other);
        if u == 0 {
            0.0
        } else {
            1.0 - self.intersection(other) as f64 / u as f64
        }
    }
}

pub fn pose_occupancy(pose_id: usize, pose: &Pose, intrinsics: &Intrinsics, bounds: &Aabb, config: &SamplerConfig) -> Result<OccupancyGrid> {
    let cloud = pose_point_cloud(pose_id, pose, intrinsics, bounds, config)?;
    Ok(OccupancyGrid::from_points(pose_id, &cloud.points, bounds, config.resolution))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    PoseAware,
    /// Axis-aligned cells, `cells[axis]` per axis, without overlap.
    Grid { cells: [usize; 3] },
}

/// A cluster prototype: per-voxel occupancy frequency over members, and its
/// binarization at 0.5 used for distances.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenter {
    pub frequency: Vec<f32>,
    pub binary: OccupancyGrid,
}

impl ClusterCenter {
    fn from_members(members: &[&OccupancyGrid], resolution: usize) -> Self {
        let n = resolution.pow(3);
        let mut freq = vec![0f32; n];
        for g in members {
            for (i, f) in freq.iter_mut().enumerate() {
                if g.get(i) {
                    *f += 1.0;
                }
            }
        }
        let mut binary = OccupancyGrid::empty(usize::MAX, resolution);
        for (i, f) in freq.iter_mut().enumerate() {
            *f /= members.len() as f32;
            if *f >= 0.5 {
                binary.set(i);
            }
        }
        ClusterCenter { frequency: freq, binary }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePartition {
    pub k: usize,
    pub strategy: Strategy,
    /// `nerf_ids[pose_id]`.
    pub nerf_ids: Vec<usize>,
    pub centers: Vec<ClusterCenter>,
    pub resolution: usize,
    pub bounds: Aabb,
    /// Total distance of poses to their assigned centers after each round.
    pub objective_history: Vec<f64>,
}

/// Persisted form of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub k: usize,
    pub strategy: Strategy,
    pub nerf_ids: Vec<usize>,
    pub resolution: usize,
    pub bounds: Aabb,
}

impl PartitionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PartitionFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(bad) = file.nerf_ids.iter().find(|&&id| id >= file.k) {
            return Err(Error::format("partition", format!("NeRF id {bad} outside [0, {})", file.k)));
        }
        Ok(file)
    }
}

impl ScenePartition {
    pub fn to_file(&self) -> PartitionFile {
        PartitionFile {
            k: self.k,
            strategy: self.strategy,
            nerf_ids: self.nerf_ids.clone(),
            resolution: self.resolution,
            bounds: self.bounds,
        }
    }

    /// A partition with a given assignment and no prototypes.
    pub fn from_assignment(k: usize, nerf_ids: Vec<usize>, strategy: Strategy, resolution: usize, bounds: Aabb) -> Result<Self> {
        if let Some(bad) = nerf_ids.iter().find(|&&id| id >= k) {
            return Err(Error::InvalidArgument(format!("NeRF id {bad} outside [0, {k})")));
        }
        Ok(ScenePartition {
            k,
            strategy,
            nerf_ids,
            centers: Vec::new(),
            resolution,
            bounds,
            objective_history: Vec::new(),
        })
    }

    pub fn members(&self, nerf_id: usize) -> Vec<usize> {
        (0..self.nerf_ids.len()).filter(|&p| self.nerf_ids[p] == nerf_id).collect()
    }
}

/// `K = ceil(n / poses_per_field)`.
pub fn cluster_count(pose_count: usize, poses_per_field: usize) -> usize {
    pose_count.div_ceil(poses_per_field.max(1)).max(1)
}

fn nearest(grid: &OccupancyGrid, centers: &[ClusterCenter]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = grid.jaccard_distance(&center.binary);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

const MAX_ROUNDS: usize = 100;

/// Lloyd iteration under Jaccard distance with farthest-point seeding.
///
/// A recomputed center is kept only if it does not raise its cluster's total
/// distance; majority voting minimizes Hamming rather than Jaccard distance,
/// and this guard keeps the objective non-increasing.
pub fn cluster_poses(grids: &[OccupancyGrid], k: usize, bounds: &Aabb, rng_seed: u64) -> Result<ScenePartition> {
    let n = grids.len();
    if n == 0 {
        return Err(Error::EmptyInput("occupancy grids"));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cluster count {k} must be in [1, {n}]")));
    }
    let resolution = grids[0].resolution;
    if grids.iter().any(|g| g.resolution != resolution) {
        return Err(Error::InvalidArgument("occupancy grids differ in resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let single = |g: &OccupancyGrid| ClusterCenter::from_members(&[g], resolution);

    // Farthest-point seeding.
    let mut centers = vec![single(&grids[rng.random_range(0..n)])];
    let mut min_dist: Vec<f64> = grids.iter().map(|g| g.jaccard_distance(&centers[0].binary)).collect();
    while centers.len() < k {
        let far = (0..n).fold(0, |b, i| if min_dist[i] > min_dist[b] { i } else { b });
        centers.push(single(&grids[far]));
        let c = centers.last().unwrap();
        for (i, g) in grids.iter().enumerate() {
            min_dist[i] = min_dist[i].min(g.jaccard_distance(&c.binary));
        }
    }

    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_ROUNDS {
        let nearest_all: Vec<(usize, f64)> = grids.par_iter().map(|g| nearest(g, &centers)).collect();
        let next: Vec<usize> = nearest_all.iter().map(|a| a.0).collect();
        history.push(nearest_all.iter().map(|a| a.1).sum());
        if next == assignment {
            break;
        }
        assignment = next;
        for c in 0..k {
            let members: Vec<&OccupancyGrid> = (0..n).filter(|&i| assignment[i] == c).map(|i| &grids[i]).collect();
            if members.is_empty() {
                // Re-seed from the pose farthest from its own center.
                let far = (0..n).fold(0, |b, i| if nearest_all[i].1 > nearest_all[b].1 { i } else { b });
                centers[c] = single(&grids[far]);
                assignment[far] = c;
                continue;
            }
            let candidate = ClusterCenter::from_members(&members, resolution);
            let cost = |center: &ClusterCenter| members.iter().map(|g| g.jaccard_distance(&center.binary)).sum::<f64>();
            if cost(&candidate) <= cost(&centers[c]) {
                centers[c] = candidate;
            }
        }
    }
    // Report prototypes as the frequency over final members.
    for (c, center) in centers.iter_mut().enumerate() {
        let members: Vec<&OccupancyGrid> = (0..n).filter(|&i| assignment[i] == c).map(|i| &grids[i]).collect();
        if !members.is_empty() {
            center.frequency = ClusterCenter::from_members(&members, resolution).frequency;
        }
    }
    Ok(ScenePartition {
        k,
        strategy: Strategy::PoseAware,
        nerf_ids: assignment,
        centers,
        resolution,
        bounds: *bounds,
        objective_history: history,
    })
}

/// Cell counts per axis for `k` grid cells: a near-square split of x and y.
pub fn grid_cells(k: usize) -> [usize; 3] {
    let k = k.max(1);
    let mut nx = (k as f64).sqrt().floor() as usize;
    while !k.is_multiple_of(nx) {
        nx -= 1;
    }
    [k / nx, nx, 1]
}

fn cell_of(bounds: &Aabb, cells: [usize; 3], p: &Vec3) -> usize {
    let mut idx = 0;
    for axis in 0..3 {
        let f = (p[axis] - bounds.min[axis]) / (bounds.max[axis] - bounds.min[axis]);
        let i = ((f * cells[axis] as f64).max(0.0) as usize).min(cells[axis] - 1);
        idx = idx * cells[axis] + i;
    }
    idx
}

/// Grid baseline: each pose goes to the cell holding most of its samples.
pub fn grid_partition(clouds: &[PosePointCloud], k: usize, bounds: &Aabb, resolution: usize) -> Result<ScenePartition> {
    let cells = grid_cells(k);
    let nerf_ids = clouds
        .iter()
        .map(|c| {
            let mut counts = vec![0usize; k];
            for p in &c.points {
                counts[cell_of(bounds, cells, p)] += 1;
            }
            (0..k).fold(0, |b, i| if counts[i] > counts[b] { i } else { b })
        })
        .collect();
    ScenePartition::from_assignment(k, nerf_ids, Strategy::Grid { cells }, resolution, *bounds)
}

/// Number of distinct fields a pose's samples are routed to.
pub fn num_nerf(cloud: &PosePointCloud, partition: &ScenePartition) -> usize {
    match partition.strategy {
        // Every sample of a pose inherits the pose's single id.
        Strategy::PoseAware => 1,
        Strategy::Grid { cells } => cloud
            .points
            .iter()
            .map(|p| cell_of(&partition.bounds, cells, p))
            .collect::<HashSet<_>>()
            .len(),
    }
}

/// Trace of the covariance of a point set.
pub fn spatial_variance(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n
}

/// Per-cluster trace of covariance of all member sample points.
pub fn compactness(partition: &ScenePartition, clouds: &[PosePointCloud]) -> Vec<f64> {
    (0..partition.k)
        .map(|c| {
            let pts: Vec<Vec3> = clouds
                .iter()
                .filter(|cl| partition.nerf_ids.get(cl.pose_id) == Some(&c))
                .flat_map(|cl| cl.points.iter().copied())
                .collect();
            spatial_variance(&pts)
        })
        .collect()
}
