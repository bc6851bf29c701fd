use std::path::Path;

use nerfloc::harness::{
    field_file, mask_file, EvalReport, Pipeline, PipelineConfig, PartitionStrategy, QueryFeatures, REPORT_FILE,
};
use nerfloc::Error;

fn tiny(out: &Path, features: QueryFeatures) -> PipelineConfig {
    let mut c = PipelineConfig::default().with_seed(11);
    c.out_dir = out.to_path_buf();
    c.scene.train_views = 16;
    c.scene.query_views = 2;
    c.scene.image_size = 24;
    c.train.steps = 30;
    c.train.rays_per_batch = 64;
    c.train.samples_per_ray = 16;
    c.render.samples_per_ray = 16;
    c.partition.poses_per_field = 8;
    c.selection.budget = Some(6);
    c.selection.views = 2;
    c.projector.channels = [4, 8];
    c.projector.epochs = 1;
    c.coarse.k_spatial = 2;
    c.coarse.k_orient = 1;
    c.coarse.epochs = 1;
    c.localize.query_features = features;
    c
}

/// Report fields that do not depend on wall-clock time.
fn timeless(r: &EvalReport) -> String {
    let mut r = r.clone();
    r.median_localization_time = None;
    for q in &mut r.queries {
        q.timing = Default::default();
    }
    serde_json::to_string(&r).unwrap()
}

#[test]
fn tiny_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = Pipeline::new(tiny(&dir.path().join("a"), QueryFeatures::Projector)).unwrap();
    let b = Pipeline::new(tiny(&dir.path().join("b"), QueryFeatures::Projector)).unwrap();
    let ra = a.run_all().unwrap();
    let rb = b.run_all().unwrap();
    assert_eq!(ra.queries.len(), 2);
    assert_eq!(timeless(&ra), timeless(&rb));
    let k = a.load_partition().unwrap().k;
    assert_eq!(k, 2);
    for id in 0..k {
        let fa = std::fs::read(a.artifact(&field_file(id))).unwrap();
        let fb = std::fs::read(b.artifact(&field_file(id))).unwrap();
        assert_eq!(fa, fb, "field {id} differs between identical runs");
        assert!(a.artifact(&mask_file(id)).exists());
    }
    let reloaded = EvalReport::load(&a.artifact(REPORT_FILE)).unwrap();
    assert_eq!(reloaded, ra);
}

#[test]
fn grid_strategy_runs_with_oracle_features() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path(), QueryFeatures::Oracle);
    config.partition.strategy = PartitionStrategy::Grid;
    let run = Pipeline::new(config).unwrap();
    let report = run.run_all().unwrap();
    assert_eq!(report.queries.len(), 2);
    assert!(report.partition.mean_num_nerf >= 1.0);
    for q in &report.queries {
        assert!(q.translation_error.is_finite());
    }
}

#[test]
fn stages_report_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = Pipeline::new(tiny(dir.path(), QueryFeatures::Oracle)).unwrap();
    match run.run_localize() {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "localize"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}
