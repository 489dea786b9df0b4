//! End-to-end pipeline checks on a deliberately tiny configuration:
//! staging, idempotence, staleness detection, and full-run determinism.

use motion_align::config::RunConfig;
use motion_align::diffusion::SpaceKind;
use motion_align::error::Error;
use motion_align::pipeline::{AblationGrid, EvalTarget, Pipeline};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk_default();
    cfg.seed = 11;
    cfg.domain.n_prompts = 40;
    cfg.domain.frames = 16;
    cfg.domain.f_min = 8;
    cfg.domain.f_max = 32;

    cfg.vae.latent_dim = 6;
    cfg.vae.hidden = 24;
    cfg.vae.steps = 40;
    cfg.vae.batch = 8;

    cfg.diffusion_raw.t = 8;
    cfg.diffusion_raw.hidden = vec![24];
    cfg.diffusion_raw.cond_dim = 8;
    cfg.diffusion_raw.time_dim = 4;
    cfg.diffusion_raw.steps = 40;
    cfg.diffusion_raw.batch = 8;

    cfg.diffusion_latent.t = 8;
    cfg.diffusion_latent.hidden = vec![16];
    cfg.diffusion_latent.cond_dim = 8;
    cfg.diffusion_latent.time_dim = 4;
    cfg.diffusion_latent.steps = 40;
    cfg.diffusion_latent.batch = 8;

    cfg.ranker.embed_dim = 8;
    cfg.ranker.token_dim = 8;
    cfg.ranker.text_hidden = 16;
    cfg.ranker.motion_hidden = 24;
    cfg.ranker.steps = 40;
    cfg.ranker.batch = 8;

    cfg.pam.k = 2;
    cfg.pam.n_prompts = 8;

    cfg.align.steps = 20;
    cfg.align.batch = 8;

    cfg.eval.n_prompts = 32;
    cfg.eval.n_gen = 2;
    cfg.eval.pool_size = 16;
    cfg.eval.diversity_pairs = 40;
    cfg.eval.bootstrap = 3;
    cfg.eval.gt_ref_per_prompt = 2;
    cfg
}

#[test]
fn full_pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(), dir.path()).unwrap();

    let summaries = pipeline.run_all().unwrap();
    assert!(summaries.iter().any(|s| s.stage == "report"));

    // Re-running a completed stage is a no-op: identical summary, and the
    // artifact files keep their content hashes.
    let again = pipeline.gen_data().unwrap();
    assert_eq!(again.key, pipeline.gen_data_key());
    pipeline.store.verify_outputs(&again).unwrap();

    let align_again = pipeline.align().unwrap();
    pipeline.store.verify_outputs(&align_again).unwrap();

    // The report carries provenance hashes.
    let report = pipeline.report().unwrap();
    let report_path = pipeline.store.output_path(&report, "report.csv").unwrap();
    let csv = std::fs::read_to_string(report_path).unwrap();
    assert!(csv.contains("base_checkpoint"));
    assert!(csv.lines().count() >= 7); // header + 6 rows
}

#[test]
fn missing_upstream_is_named_and_stale_config_detected() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(), dir.path()).unwrap();

    // Nothing has run: train-vae must name gen-data as missing.
    let err = pipeline.train_vae().unwrap_err();
    match err {
        Error::MissingStage(stage) => assert_eq!(stage, "gen-data"),
        other => panic!("expected MissingStage, got {other:?}"),
    }

    pipeline.gen_data().unwrap();
    pipeline.train_vae().unwrap();

    // A changed domain config invalidates gen-data for downstream stages.
    let mut changed = tiny_config();
    changed.domain.noise_scale = 0.05;
    let stale_pipeline = Pipeline::new(changed, dir.path()).unwrap();
    let err = stale_pipeline.train_vae().unwrap_err();
    assert!(matches!(err, Error::Stale(_)), "got {err:?}");
}

#[test]
fn identical_seeds_reproduce_identical_artifacts() {
    let cfg = tiny_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = Pipeline::new(cfg.clone(), dir_a.path()).unwrap();
    let b = Pipeline::new(cfg, dir_b.path()).unwrap();
    let sa = a.run_all().unwrap();
    let sb = b.run_all().unwrap();

    assert_eq!(sa.len(), sb.len());
    for (x, y) in sa.iter().zip(sb.iter()) {
        assert_eq!(x.stage, y.stage);
        assert_eq!(x.key, y.key);
        assert_eq!(x.outputs, y.outputs, "stage {} differs", x.stage);
    }

    // A different seed diverges.
    let dir_c = tempfile::tempdir().unwrap();
    let mut cfg_c = tiny_config();
    cfg_c.seed = 12;
    let c = Pipeline::new(cfg_c, dir_c.path()).unwrap();
    let sc = c.run_all().unwrap();
    let aligned_a = sa.iter().find(|s| s.stage == "align").unwrap();
    let aligned_c = sc.iter().find(|s| s.stage == "align").unwrap();
    assert_ne!(
        aligned_a.outputs.get("aligned.ckpt.json"),
        aligned_c.outputs.get("aligned.ckpt.json")
    );
}

#[test]
fn ablation_grid_produces_rows_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    // Shrink further: the grid runs align+eval per variant.
    cfg.align.steps = 6;
    cfg.eval.bootstrap = 2;
    let pipeline = Pipeline::new(cfg, dir.path()).unwrap();
    pipeline.gen_data().unwrap();
    pipeline.train_vae().unwrap();
    pipeline.train_diffusion(SpaceKind::Raw).unwrap();
    pipeline.train_diffusion(SpaceKind::Latent).unwrap();
    pipeline.train_ranker().unwrap();
    pipeline.build_pam().unwrap();

    let grid = AblationGrid::default_grid();
    assert_eq!(grid.variants.len(), 4); // 2 scorers x stochastic on/off
    let summary = pipeline.ablate(&grid).unwrap();
    let csv_path = pipeline.store.output_path(&summary, "ablation.csv").unwrap();
    let csv = std::fs::read_to_string(csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 1 + 4); // header + baseline + 4 rows
    assert!(lines[1].starts_with("without-alignment"));
}

#[test]
fn online_alignment_stage_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.align.online = true;
    cfg.align.online_k = 2;
    cfg.align.steps = 5;
    cfg.align.batch = 2;
    let pipeline = Pipeline::new(cfg, dir.path()).unwrap();
    pipeline.gen_data().unwrap();
    pipeline.train_vae().unwrap();
    pipeline.train_diffusion(SpaceKind::Latent).unwrap();
    pipeline.train_ranker().unwrap();
    let summary = pipeline.align().unwrap();
    let log_path = pipeline.store.output_path(&summary, "align_log.jsonl").unwrap();
    let log = std::fs::read_to_string(log_path).unwrap();
    assert_eq!(log.lines().count(), 5);
    // Provenance marks the run as online (no preference-dataset hash).
    let ckpt_path = pipeline
        .store
        .output_path(&summary, "aligned.ckpt.json")
        .unwrap();
    let ckpt = motion_align::checkpoint::Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.meta.get("pam_hash").map(String::as_str), Some("online"));
}

#[test]
fn eval_before_align_reports_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(), dir.path()).unwrap();
    pipeline.gen_data().unwrap();
    let err = pipeline.eval(EvalTarget::Aligned).unwrap_err();
    assert!(matches!(err, Error::MissingStage(_)));
}
