//! End-to-end pipeline over a synthetic scene: configuration, the staged run
//! (partition → train → select → coarse → localize → evaluate) with every
//! artifact persisted under one output directory, and the evaluation report.
//!
//! Each stage reads what earlier stages wrote, so stages can be run one at a
//! time from the command line or all at once with [`Pipeline::run_all`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{group_labels, load_groups, save_groups, two_stage_cluster, CoarseConfig, PlacePredictor, PoseGroup};
use crate::error::{Error, Result};
use crate::field::{train, FieldConfig, FieldParams, TrainConfig, TrainLog};
use crate::geometry::{pose_error, Intrinsics, Pose};
use crate::matcher::{extract_query_features, match_features, Correspondences, Projector, ProjectorConfig, ProjectorSample, QuerySource};
use crate::partition::{
    cluster_count, cluster_poses, compactness, grid_partition, num_nerf, pose_point_cloud, OccupancyGrid, PartitionFile,
    PosePointCloud, SamplerConfig, ScenePartition, Strategy,
};
use crate::pnp::{localize_relative, RansacConfig};
use crate::renderer::{lift_to_3d, render_map_with, RenderRequest, RenderSettings, LIFT_THRESHOLD};
use crate::selection::{
    accumulate_costs, generate_gt_pairs, normalize_by_spread, solve_selection, with_query_features, CostKind, MatchPairSet,
    PairConfig, PerDimCost, Perturbation, SelectionMask, SelectionMode,
};
use crate::synthscene::{save_trajectory, Dataset, PosedImage, SyntheticScene};

/// Version of the JSON report layout.
pub const REPORT_VERSION: u32 = 1;

/// PSNR written to reports for pixel-identical renders.
pub const PSNR_IDENTICAL_SENTINEL: f64 = 100.0;

pub const CONFIG_FILE: &str = "config.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const GROUPS_FILE: &str = "groups.json";
pub const PREDICTOR_FILE: &str = "place_predictor.json";
pub const LOCALIZATION_FILE: &str = "localization.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.csv";

pub fn field_file(id: usize) -> String {
    format!("field_{id}.mlnf")
}

pub fn mask_file(id: usize) -> String {
    format!("mask_{id}.txt")
}

pub fn projector_file(id: usize) -> String {
    format!("projector_{id}.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub train_views: usize,
    pub query_views: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub fov_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            train_views: 100,
            query_views: 10,
            image_size: 64,
            fov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    #[default]
    PoseAware,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub strategy: PartitionStrategy,
    /// Training poses per sub-field; the field count is `ceil(n / this)`.
    pub poses_per_field: usize,
    pub sampler: SamplerConfig,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            strategy: PartitionStrategy::PoseAware,
            poses_per_field: 100,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Where query-side features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryFeatures {
    /// The trained image-to-feature projector.
    #[default]
    Projector,
    /// Features rendered by the field at the true query pose.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Selected dimension budget `N_s`; `None` matches on all dimensions.
    pub budget: Option<usize>,
    pub mode: SelectionMode,
    pub cost: CostKind,
    /// Divide each dimension's cost by its spread over the pair set.
    pub normalize: bool,
    /// Database views per sub-field used to generate pairs.
    pub views: usize,
    /// Perturbation radius as a fraction of the scene extent.
    pub translation_fraction: f64,
    pub max_rotation_deg: f64,
    pub pairs: PairConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: Some(10),
            mode: SelectionMode::ExactBudget,
            cost: CostKind::Absolute,
            normalize: true,
            views: 10,
            translation_fraction: 0.02,
            max_rotation_deg: 5.0,
            pairs: PairConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    pub query_features: QueryFeatures,
    /// Query feature grid stride; the projector is trained at this stride.
    pub query_stride: usize,
    /// Pixel stride of the feature render at the initial pose.
    pub render_stride: usize,
    /// Minimum opacity for a rendered pixel to be lifted to 3D.
    pub lift_threshold: f64,
    pub ransac: RansacConfig,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            query_features: QueryFeatures::Projector,
            query_stride: 2,
            render_stride: 1,
            lift_threshold: LIFT_THRESHOLD,
            ransac: RansacConfig::default(),
        }
    }
}

/// Everything a pipeline run depends on. Unknown keys are rejected when
/// parsing; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds the dataset, field initialization and clustering.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub render: RenderSettings,
    pub partition: PartitionConfig,
    pub selection: SelectionConfig,
    pub projector: ProjectorConfig,
    pub coarse: CoarseConfig,
    pub localize: LocalizeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("nerfloc-out"),
            scene: SceneConfig::default(),
            field: FieldConfig::default(),
            train: TrainConfig::default(),
            render: RenderSettings::default(),
            partition: PartitionConfig::default(),
            selection: SelectionConfig::default(),
            projector: ProjectorConfig::default(),
            coarse: CoarseConfig {
                k_spatial: 6,
                k_orient: 4,
                ..CoarseConfig::default()
            },
            localize: LocalizeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        PipelineConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Sets the master seed and every stage seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.projector.seed = seed;
        self.coarse.seed = seed;
        self.localize.ransac.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.scene;
        if s.train_views == 0 || s.query_views == 0 || s.image_size < 8 {
            return bad("scene needs train and query views and images of at least 8 pixels".into());
        }
        if !(s.fov_deg > 0.0 && s.fov_deg < 180.0) {
            return bad(format!("field of view {} must be in (0, 180)", s.fov_deg));
        }
        self.field.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.rays_per_batch == 0 || t.samples_per_ray < 2 || !(t.depth_weight >= 0.0) {
            return bad("training needs steps, rays, ≥ 2 samples per ray and a non-negative depth weight".into());
        }
        if self.render.samples_per_ray < 2 || self.render.chunk == 0 {
            return bad("rendering needs ≥ 2 samples per ray and a positive chunk".into());
        }
        if self.partition.poses_per_field == 0 || self.partition.sampler.resolution == 0 {
            return bad("partition needs poses per field and a grid resolution".into());
        }
        let sel = &self.selection;
        let dims = self.field.feature_dim();
        if let Some(b) = sel.budget {
            if b == 0 || b > dims {
                return Err(Error::InvalidBudget { budget: b, dims });
            }
        }
        if sel.views == 0 || sel.pairs.stride == 0 {
            return bad("selection needs views and a pair stride".into());
        }
        let loc = &self.localize;
        if loc.query_stride == 0 || loc.render_stride == 0 {
            return bad("strides must be positive".into());
        }
        if !(loc.lift_threshold > 0.0 && loc.lift_threshold <= 1.0) {
            return bad(format!("lift threshold {} must be in (0, 1]", loc.lift_threshold));
        }
        if loc.query_features == QueryFeatures::Projector && sel.pairs.stride != loc.query_stride {
            return bad(format!(
                "pair stride {} must equal the query stride {} when costs use projector features",
                sel.pairs.stride, loc.query_stride
            ));
        }
        loc.ransac.validate()?;
        let c = &self.coarse;
        if c.k_spatial == 0 || c.k_spatial > s.train_views || c.k_orient == 0 {
            return bad(format!(
                "coarse clustering needs 1 ≤ K_spatial ≤ {} and K_orient ≥ 1",
                s.train_views
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return bad("output directory must not be empty".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.scene.image_size, self.scene.image_size, self.scene.fov_deg)
    }

    /// The reference scene rendered along the configured trajectories.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::generate(
            SyntheticScene::reference(),
            &self.intrinsics()?,
            self.scene.train_views,
            self.scene.query_views,
            self.seed,
        )
    }
}

/// Wall-clock seconds of one query's localization steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub coarse: f64,
    pub feature_render: f64,
    pub query_features: f64,
    pub matching: f64,
    pub pnp: f64,
    pub total: f64,
}

/// One query's localization attempt after the coarse step.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub correspondences: Correspondences,
    /// Relative estimate and world pose, or why none was found.
    pub result: std::result::Result<(crate::pnp::PoseEstimate, Pose), String>,
    pub timing: QueryTiming,
}

/// Renders selected features at `initial`, matches them against the query
/// image's features and solves for the pose. Stage errors other than a
/// failed pose solve are returned as errors.
pub fn localize_query(
    image: &PosedImage,
    initial: &Pose,
    field: &FieldParams,
    mask: Option<&SelectionMask>,
    source: QuerySource<'_>,
    config: &LocalizeConfig,
    settings: &RenderSettings,
) -> Result<Attempt> {
    let mut timing = QueryTiming::default();
    let start = Instant::now();
    let req = RenderRequest {
        color: false,
        features: true,
        selection: mask,
        keep_weights: false,
    };
    let map = render_map_with(field, initial, &image.intrinsics, config.render_stride, settings, &req)?;
    let lifted = lift_to_3d(&map, config.lift_threshold);
    timing.feature_render = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let query = extract_query_features(image, source, mask, config.query_stride)?;
    timing.query_features = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let correspondences = if lifted.is_empty() {
        Correspondences::default()
    } else {
        match_features(&query, &lifted)?
    };
    timing.matching = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let result = localize_relative(&correspondences, initial, &image.intrinsics, &config.ransac).map_err(|e| e.to_string());
    timing.pnp = t.elapsed().as_secs_f64();
    timing.total = start.elapsed().as_secs_f64();
    Ok(Attempt {
        correspondences,
        result,
        timing,
    })
}

/// Persisted outcome of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub place: usize,
    pub place_confidence: f64,
    pub nerf_id: usize,
    pub initial_pose: Pose,
    /// Final pose: the PnP estimate, or the initial pose on fallback.
    pub pose: Pose,
    /// The pose solve failed and `pose` is the coarse representative.
    pub fallback: bool,
    pub failure: Option<String>,
    pub num_matches: usize,
    pub inliers: usize,
    pub mean_reprojection_error: Option<f64>,
    pub translation_error: f64,
    pub rotation_error_deg: f64,
    pub timing: QueryTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub strategy: PartitionStrategy,
    pub k: usize,
    /// Mean number of sub-fields a training pose's samples touch.
    pub mean_num_nerf: f64,
    /// Per-cluster trace of covariance of member sample points.
    pub compactness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub query_features: QueryFeatures,
    /// Dimensions used for matching (mean over sub-fields).
    pub feature_dims: f64,
    pub scene_extent: f64,
    pub queries: Vec<QueryRecord>,
    pub successes: usize,
    pub failures: usize,
    /// Medians over successful localizations only.
    pub median_translation_error: Option<f64>,
    pub median_rotation_error_deg: Option<f64>,
    pub median_localization_time: Option<f64>,
    /// PSNR of each held-out query view rendered at its true pose, capped at
    /// [`PSNR_IDENTICAL_SENTINEL`].
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub partition: PartitionStats,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if report.version != REPORT_VERSION {
            return Err(Error::format("report", format!("unsupported version {}", report.version)));
        }
        Ok(report)
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "query  place  matches  inliers  trans_err  rot_err_deg  time_s  status");
        for q in &self.queries {
            let status = if q.fallback { "fallback" } else { "ok" };
            let _ = writeln!(
                out,
                "{:>5}  {:>5}  {:>7}  {:>7}  {:>9.4}  {:>11.3}  {:>6.3}  {}",
                q.query, q.place, q.num_matches, q.inliers, q.translation_error, q.rotation_error_deg, q.timing.total, status
            );
        }
        let fmt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
        let _ = writeln!(out);
        let _ = writeln!(out, "query features        {:?}", self.query_features);
        let _ = writeln!(out, "feature dims          {:.1}", self.feature_dims);
        let _ = writeln!(out, "successes / failures  {} / {}", self.successes, self.failures);
        let _ = writeln!(
            out,
            "median translation    {} ({} of extent {:.2})",
            fmt(self.median_translation_error, 4),
            fmt(self.median_translation_error.map(|t| 100.0 * t / self.scene_extent), 2) + "%",
            self.scene_extent
        );
        let _ = writeln!(out, "median rotation (deg)  {}", fmt(self.median_rotation_error_deg, 3));
        let _ = writeln!(out, "median time (s)       {}", fmt(self.median_localization_time, 3));
        let _ = writeln!(out, "mean PSNR (dB)        {:.2}", self.mean_psnr);
        let _ = writeln!(
            out,
            "partition             {:?}, K = {}, mean num_nerf {:.2}",
            self.partition.strategy, self.partition.k, self.partition.mean_num_nerf
        );
        out
    }
}

/// One row of the timing table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub query: usize,
    pub timing: QueryTiming,
}

/// Per-query wall-clock of coarse prediction, feature rendering, query
/// feature extraction, matching and RANSAC-PnP.
pub fn timing_breakdown(report: &EvalReport) -> Vec<TimingRow> {
    report
        .queries
        .iter()
        .map(|q| TimingRow {
            query: q.query,
            timing: q.timing,
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("query,coarse,feature_render,query_features,matching,pnp,total\n");
    for r in rows {
        let t = &r.timing;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.query, t.coarse, t.feature_render, t.query_features, t.matching, t.pnp, t.total
        );
    }
    out
}

/// `10·log10(1 / MSE)` over all channels, `+∞` for identical images.
pub fn psnr(rendered: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: rendered.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("images"));
    }
    let mut se = 0.0;
    for (a, b) in rendered.iter().zip(truth) {
        for c in 0..3 {
            se += (a[c] - b[c]).powi(2);
        }
    }
    let mse = se / (3 * truth.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Median of the values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

trait StageContext<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: name,
                source: Box::new(other),
            },
        })
    }
}

/// Output of the selection stage for one sub-field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSelection {
    pub nerf_id: usize,
    pub cost: PerDimCost,
    pub mask: SelectionMask,
    pub pair_count: usize,
}

/// A configured run bound to its output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    dataset: Dataset,
}

impl Pipeline {
    /// Validates the config, renders the dataset and writes the config and
    /// trajectories to the output directory.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset()?;
        std::fs::create_dir_all(&config.out_dir)?;
        config.save(&config.out_dir.join(CONFIG_FILE))?;
        let poses = |imgs: &[PosedImage]| imgs.iter().map(|i| i.pose).collect::<Vec<_>>();
        save_trajectory(&config.out_dir.join("train_poses.txt"), &poses(&dataset.train))?;
        save_trajectory(&config.out_dir.join("query_poses.txt"), &poses(&dataset.query))?;
        Ok(Pipeline { config, dataset })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn bounds(&self) -> crate::geometry::Aabb {
        self.dataset.scene.bounds
    }

    fn train_clouds(&self) -> Result<Vec<PosePointCloud>> {
        let sampler = &self.config.partition.sampler;
        self.dataset
            .train
            .par_iter()
            .enumerate()
            .map(|(i, img)| pose_point_cloud(i, &img.pose, &img.intrinsics, &self.dataset.scene.bounds, sampler))
            .collect()
    }

    /// Splits the training poses among sub-fields and writes the partition file.
    pub fn run_partition(&self) -> Result<ScenePartition> {
        self.partition_inner().stage("partition")
    }

    fn partition_inner(&self) -> Result<ScenePartition> {
        let cfg = &self.config.partition;
        let clouds = self.train_clouds()?;
        let k = cluster_count(clouds.len(), cfg.poses_per_field).min(clouds.len());
        let res = cfg.sampler.resolution;
        let partition = match cfg.strategy {
            PartitionStrategy::PoseAware => {
                let grids: Vec<OccupancyGrid> = clouds
                    .iter()
                    .map(|c| OccupancyGrid::from_points(c.pose_id, &c.points, &self.bounds(), res))
                    .collect();
                cluster_poses(&grids, k, &self.bounds(), self.config.seed)?
            }
            PartitionStrategy::Grid => grid_partition(&clouds, k, &self.bounds(), res)?,
        };
        partition.to_file().save(&self.artifact(PARTITION_FILE))?;
        Ok(partition)
    }

    pub fn load_partition(&self) -> Result<ScenePartition> {
        let file = PartitionFile::load(&self.artifact(PARTITION_FILE))?;
        if file.nerf_ids.len() != self.dataset.train.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dataset.train.len(),
                got: file.nerf_ids.len(),
            });
        }
        ScenePartition::from_assignment(file.k, file.nerf_ids, file.strategy, file.resolution, file.bounds)
    }

    /// Trains one field per non-empty partition cluster on its members' views.
    pub fn run_train(&self) -> Result<Vec<Option<FieldParams>>> {
        self.train_inner().stage("train")
    }

    fn train_inner(&self) -> Result<Vec<Option<FieldParams>>> {
        let partition = self.load_partition()?;
        let mut fields = Vec::with_capacity(partition.k);
        for id in 0..partition.k {
            let members = partition.members(id);
            if members.is_empty() {
                fields.push(None);
                continue;
            }
            let images: Vec<PosedImage> = members.iter().map(|&m| self.dataset.train[m].clone()).collect();
            let seed = self.config.seed.wrapping_add(id as u64);
            let init = FieldParams::init(self.config.field, self.bounds(), seed)?;
            let schedule = TrainConfig {
                seed: self.config.train.seed.wrapping_add(id as u64),
                ..self.config.train
            };
            let (field, log): (FieldParams, TrainLog) = train(&init, &images, &schedule)?;
            field.save(&self.artifact(&field_file(id)))?;
            std::fs::write(self.artifact(&format!("train_log_{id}.json")), serde_json::to_string(&log)?)?;
            fields.push(Some(field));
        }
        Ok(fields)
    }

    pub fn load_fields(&self, k: usize) -> Result<Vec<Option<FieldParams>>> {
        (0..k)
            .map(|id| {
                let path = self.artifact(&field_file(id));
                if path.exists() {
                    FieldParams::load(&path).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    fn query_source<'a>(&self, field: &'a FieldParams, projector: Option<&'a Projector>) -> Result<QuerySource<'a>> {
        match self.config.localize.query_features {
            QueryFeatures::Oracle => Ok(QuerySource::Oracle {
                field,
                settings: self.config.render,
            }),
            QueryFeatures::Projector => projector
                .map(QuerySource::Projector)
                .ok_or(Error::InvalidArgument("projector features requested but no projector trained".into())),
        }
    }

    /// Fits the image-to-feature projector of one field on its members'
    /// views.
    pub fn train_projector(&self, field: &FieldParams, members: &[usize], seed: u64) -> Result<Projector> {
        let stride = self.config.localize.query_stride;
        let req = RenderRequest {
            color: false,
            ..RenderRequest::default()
        };
        let samples = members
            .par_iter()
            .map(|&m| {
                let img = &self.dataset.train[m];
                let map = render_map_with(field, &img.pose, &img.intrinsics, stride, &self.config.render, &req)?;
                Ok(ProjectorSample::from_render(img.clone(), &map))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = ProjectorConfig {
            seed,
            ..self.config.projector
        };
        Projector::train(&samples, stride, &config)
    }

    /// Per-dimension costs from ground-truth pairs around evenly spaced
    /// member views of one field. With projector query features the 2D side
    /// of each pair comes from the projector.
    pub fn selection_costs(&self, nerf_id: usize, field: &FieldParams, members: &[usize], projector: Option<&Projector>) -> Result<(PerDimCost, usize)> {
        let sel = &self.config.selection;
        let perturbation = Perturbation {
            translation: sel.translation_fraction * self.dataset.scene.extent(),
            max_rotation_deg: sel.max_rotation_deg,
        };
        let step = members.len().div_ceil(sel.views).max(1);
        let mut sets: Vec<MatchPairSet> = Vec::new();
        for (v, &m) in members.iter().step_by(step).enumerate() {
            let img = &self.dataset.train[m];
            let seed = self.config.seed ^ ((nerf_id as u64) << 32) ^ v as u64;
            let set = match generate_gt_pairs(field, &img.pose, &img.intrinsics, &perturbation, &sel.pairs, &self.config.render, seed) {
                Ok(set) => set,
                Err(Error::InsufficientOverlap { .. }) => continue,
                Err(e) => return Err(e),
            };
            let set = match (self.config.localize.query_features, projector) {
                (QueryFeatures::Projector, Some(p)) => with_query_features(set, &p.extract(img, None, sel.pairs.stride)?)?,
                _ => set,
            };
            sets.push(set);
        }
        let pairs = MatchPairSet::merge(sets);
        if pairs.is_empty() {
            return Err(Error::EmptyInput("ground-truth pairs"));
        }
        let raw = accumulate_costs(&pairs, sel.cost)?;
        let cost = if sel.normalize {
            normalize_by_spread(&raw, &pairs)?
        } else {
            raw
        };
        Ok((cost, pairs.len()))
    }

    /// Trains projectors (when the query side needs them) and solves the
    /// feature selection of every field, writing projectors and masks.
    pub fn run_select(&self) -> Result<Vec<FieldSelection>> {
        self.select_inner().stage("select")
    }

    fn select_inner(&self) -> Result<Vec<FieldSelection>> {
        let partition = self.load_partition()?;
        let fields = self.load_fields(partition.k)?;
        let mut out = Vec::new();
        for (id, field) in fields.iter().enumerate() {
            let Some(field) = field else { continue };
            let members = partition.members(id);
            let projector = match self.config.localize.query_features {
                QueryFeatures::Projector => {
                    let p = self.train_projector(field, &members, self.config.projector.seed.wrapping_add(id as u64))?;
                    p.save(&self.artifact(&projector_file(id)))?;
                    Some(p)
                }
                QueryFeatures::Oracle => None,
            };
            let (cost, pair_count) = self.selection_costs(id, field, &members, projector.as_ref())?;
            let mask = match self.config.selection.budget {
                Some(b) => solve_selection(&cost, b, self.config.selection.mode)?,
                None => SelectionMask::full(field.feature_dim()),
            };
            mask.save(&self.artifact(&mask_file(id)))?;
            out.push(FieldSelection {
                nerf_id: id,
                cost,
                mask,
                pair_count,
            });
        }
        Ok(out)
    }

    /// Groups the training poses into places and trains the place predictor.
    pub fn run_coarse(&self) -> Result<(Vec<PoseGroup>, PlacePredictor)> {
        self.coarse_inner().stage("coarse")
    }

    fn coarse_inner(&self) -> Result<(Vec<PoseGroup>, PlacePredictor)> {
        let cfg = &self.config.coarse;
        let poses: Vec<Pose> = self.dataset.train.iter().map(|i| i.pose).collect();
        let groups = two_stage_cluster(&poses, cfg.k_spatial, cfg.k_orient, self.config.seed)?;
        save_groups(&self.artifact(GROUPS_FILE), &groups)?;
        let labels: Vec<usize> = group_labels(&groups, poses.len())
            .into_iter()
            .map(|l| l.ok_or(Error::Degenerate("pose left out of every group")))
            .collect::<Result<_>>()?;
        let (predictor, losses) = PlacePredictor::train(&self.dataset.train, &labels, groups.len(), cfg)?;
        predictor.save(&self.artifact(PREDICTOR_FILE))?;
        std::fs::write(self.artifact("coarse_log.json"), serde_json::to_string(&losses)?)?;
        Ok((groups, predictor))
    }

    /// Localizes every query: place prediction, feature render at the place's
    /// representative pose, matching and PnP. Failed solves fall back to the
    /// representative pose and are flagged.
    pub fn run_localize(&self) -> Result<Vec<QueryRecord>> {
        self.localize_inner().stage("localize")
    }

    fn localize_inner(&self) -> Result<Vec<QueryRecord>> {
        let partition = self.load_partition()?;
        let fields = self.load_fields(partition.k)?;
        let groups = load_groups(&self.artifact(GROUPS_FILE))?;
        let predictor = PlacePredictor::load(&self.artifact(PREDICTOR_FILE))?;
        let mut masks = Vec::with_capacity(partition.k);
        let mut projectors = Vec::with_capacity(partition.k);
        for (id, field) in fields.iter().enumerate() {
            if field.is_none() {
                masks.push(None);
                projectors.push(None);
                continue;
            }
            masks.push(Some(SelectionMask::load(&self.artifact(&mask_file(id)))?));
            projectors.push(match self.config.localize.query_features {
                QueryFeatures::Projector => Some(Projector::load(&self.artifact(&projector_file(id)))?),
                QueryFeatures::Oracle => None,
            });
        }
        let corr_dir = self.artifact("correspondences");
        std::fs::create_dir_all(&corr_dir)?;
        let mut records = Vec::with_capacity(self.dataset.query.len());
        for (qi, image) in self.dataset.query.iter().enumerate() {
            let t = Instant::now();
            let (place, confidence) = predictor.predict_place(image)?;
            let group = groups
                .iter()
                .find(|g| g.id == place)
                .ok_or_else(|| Error::format("pose groups", format!("no group with id {place}")))?;
            let initial = group.representative;
            let nerf_id = partition.nerf_ids[group.representative_id];
            let coarse_time = t.elapsed().as_secs_f64();
            let field = fields[nerf_id]
                .as_ref()
                .ok_or_else(|| Error::format("partition", format!("representative routed to empty field {nerf_id}")))?;
            let source = self.query_source(field, projectors[nerf_id].as_ref())?;
            let mut attempt = localize_query(
                image,
                &initial,
                field,
                masks[nerf_id].as_ref(),
                source,
                &self.config.localize,
                &self.config.render,
            )?;
            attempt.timing.coarse = coarse_time;
            attempt.timing.total += coarse_time;
            attempt.correspondences.save(&corr_dir.join(format!("query_{qi}.csv")))?;
            let (pose, fallback, failure, inliers, mre) = match &attempt.result {
                Ok((est, world)) => (*world, false, None, est.inliers.len(), Some(est.mean_error)),
                Err(reason) => (initial, true, Some(reason.clone()), 0, None),
            };
            let (te, re) = pose_error(&pose, &image.pose);
            records.push(QueryRecord {
                query: qi,
                place,
                place_confidence: confidence,
                nerf_id,
                initial_pose: initial,
                pose,
                fallback,
                failure,
                num_matches: attempt.correspondences.len(),
                inliers,
                mean_reprojection_error: mre,
                translation_error: te,
                rotation_error_deg: re,
                timing: attempt.timing,
            });
        }
        std::fs::write(self.artifact(LOCALIZATION_FILE), serde_json::to_string_pretty(&records)?)?;
        Ok(records)
    }

    /// Partition statistics over the training poses.
    pub fn partition_stats(&self, partition: &ScenePartition) -> Result<PartitionStats> {
        let clouds = self.train_clouds()?;
        let mean = clouds.iter().map(|c| num_nerf(c, partition) as f64).sum::<f64>() / clouds.len() as f64;
        Ok(PartitionStats {
            strategy: match partition.strategy {
                Strategy::PoseAware => PartitionStrategy::PoseAware,
                Strategy::Grid { .. } => PartitionStrategy::Grid,
            },
            k: partition.k,
            mean_num_nerf: mean,
            compactness: compactness(partition, &clouds),
        })
    }

    /// PSNR of every query view rendered at its true pose by the field of the
    /// nearest training camera.
    pub fn held_out_psnr(&self, partition: &ScenePartition, fields: &[Option<FieldParams>]) -> Result<Vec<f64>> {
        self.dataset
            .query
            .iter()
            .map(|q| {
                let nearest = self
                    .dataset
                    .train
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| fields[partition.nerf_ids[*i]].is_some())
                    .min_by(|a, b| {
                        let d = |img: &PosedImage| (img.pose.center() - q.pose.center()).norm();
                        d(a.1).total_cmp(&d(b.1))
                    })
                    .map(|(i, _)| partition.nerf_ids[i])
                    .ok_or(Error::EmptyInput("trained fields"))?;
                let field = fields[nearest].as_ref().expect("filtered to trained fields");
                let req = RenderRequest {
                    features: false,
                    ..RenderRequest::default()
                };
                let map = render_map_with(field, &q.pose, &q.intrinsics, 1, &self.config.render, &req)?;
                let rgb: Vec<[f64; 3]> = map.renders.iter().map(|r| r.color).collect();
                psnr(&rgb, &q.rgb)
            })
            .collect()
    }

    /// Builds the report from the persisted localization records and writes
    /// it as JSON, a text table and a timing CSV.
    pub fn run_evaluate(&self) -> Result<EvalReport> {
        self.evaluate_inner().stage("evaluate")
    }

    fn evaluate_inner(&self) -> Result<EvalReport> {
        let partition = self.load_partition()?;
        let fields = self.load_fields(partition.k)?;
        let text = std::fs::read_to_string(self.artifact(LOCALIZATION_FILE))?;
        let queries: Vec<QueryRecord> = serde_json::from_str(&text)?;
        let ok: Vec<&QueryRecord> = queries.iter().filter(|q| !q.fallback).collect();
        let psnr: Vec<f64> = self
            .held_out_psnr(&partition, &fields)?
            .into_iter()
            .map(|p| p.min(PSNR_IDENTICAL_SENTINEL))
            .collect();
        let mut dims = Vec::new();
        for id in 0..partition.k {
            let path = self.artifact(&mask_file(id));
            if path.exists() {
                dims.push(SelectionMask::load(&path)?.selected_count() as f64);
            }
        }
        let report = EvalReport {
            version: REPORT_VERSION,
            query_features: self.config.localize.query_features,
            feature_dims: dims.iter().sum::<f64>() / dims.len().max(1) as f64,
            scene_extent: self.dataset.scene.extent(),
            successes: ok.len(),
            failures: queries.len() - ok.len(),
            median_translation_error: median(&ok.iter().map(|q| q.translation_error).collect::<Vec<_>>()),
            median_rotation_error_deg: median(&ok.iter().map(|q| q.rotation_error_deg).collect::<Vec<_>>()),
            median_localization_time: median(&ok.iter().map(|q| q.timing.total).collect::<Vec<_>>()),
            mean_psnr: psnr.iter().sum::<f64>() / psnr.len().max(1) as f64,
            psnr,
            partition: self.partition_stats(&partition)?,
            queries,
        };
        report.save(&self.artifact(REPORT_FILE))?;
        std::fs::write(self.artifact(REPORT_TABLE_FILE), report.to_table())?;
        std::fs::write(self.artifact(TIMING_FILE), timing_csv(&timing_breakdown(&report)))?;
        Ok(report)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.run_partition()?;
        let t = Instant::now();
        self.run_train()?;
        log::info!("fields trained in {:.1}s", t.elapsed().as_secs_f64());
        self.run_select()?;
        self.run_coarse()?;
        self.run_localize()?;
        self.run_evaluate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_values() {
        let zero = vec![[0.0; 3]; 16];
        let half = vec![[0.5; 3]; 16];
        let one = vec![[1.0; 3]; 16];
        assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
        assert!((psnr(&zero, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert!(psnr(&zero, &one[..3]).is_err());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn config_rejects_unknown_keys_and_fills_defaults() {
        let c = PipelineConfig::from_json(r#"{"seed": 4, "train": {"steps": 7}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.rays_per_batch, TrainConfig::default().rays_per_batch);
        assert!(PipelineConfig::from_json(r#"{"sed": 4}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"train": {"step": 4}}"#).is_err());
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut c = PipelineConfig::default();
        c.selection.budget = Some(48);
        assert!(matches!(c.validate(), Err(Error::InvalidBudget { .. })));
        let mut c = PipelineConfig::default();
        c.selection.pairs.stride = 4;
        assert!(c.validate().is_err());
        c.localize.query_features = QueryFeatures::Oracle;
        assert!(c.validate().is_ok());
        let mut c = PipelineConfig::default();
        c.coarse.k_spatial = 101;
        assert!(c.validate().is_err());
    }

    #[test]
    fn with_seed_reaches_every_stage() {
        let c = PipelineConfig::default().with_seed(9);
        assert_eq!(
            (c.seed, c.train.seed, c.projector.seed, c.coarse.seed, c.localize.ransac.seed),
            (9, 9, 9, 9, 9)
        );
    }

    #[test]
    fn timing_csv_has_a_row_per_query() {
        let rows = vec![
            TimingRow {
                query: 0,
                timing: QueryTiming {
                    total: 1.0,
                    ..QueryTiming::default()
                },
            },
            TimingRow {
                query: 1,
                timing: QueryTiming::default(),
            },
        ];
        let csv = timing_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("query,coarse,"));
    }
}
