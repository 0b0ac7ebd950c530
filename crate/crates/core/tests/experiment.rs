use std::fs;
use std::path::Path;

use snapnav::ensemble::evaluation_budget;
use snapnav::experiment::{cmd_ablate, cmd_pipeline, ExperimentConfig, Manifest, StageStatus};
use snapnav::navsim::GeneratorConfig;
use snapnav::policy::Variant;
use snapnav::training::{ModelSize, TrainingConfig};
use snapnav::Error;

fn tiny_training(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        variant,
        total_iterations: 24,
        periods: 4,
        batch_size: 2,
        validation_cadence: 2,
        model: ModelSize {
            d_emb: 8,
            d_model: 8,
            d_ff: 8,
            self_layers: 1,
            cross_layers: 1,
        },
        ..TrainingConfig::default()
    }
}

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 11,
        generator: GeneratorConfig::small(),
        ..ExperimentConfig::default()
    };
    cfg.paths.out_dir = out.to_path_buf();
    cfg.training.original = tiny_training(Variant::Original);
    cfg.training.past_action_aware = tiny_training(Variant::PastActionAware);
    cfg.search.max_size = 3;
    cfg.ablation.periods = vec![3, 4];
    cfg.ablation.sizes = vec![2, 3];
    cfg
}

#[test]
fn pipeline_is_deterministic_and_reports_every_row() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_pipeline(&tiny(a.path())).unwrap();
    let rb = cmd_pipeline(&tiny(b.path())).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.path().join("report.json")).unwrap(),
        fs::read(b.path().join("report.json")).unwrap()
    );
    for name in [
        "best_single",
        "best_single_original",
        "best_single_past_action_aware",
        "original_ensemble",
        "past_action_aware_ensemble",
        "mixed_ensemble",
    ] {
        let row = ra.row(name).unwrap_or_else(|| panic!("missing row {name}"));
        assert_eq!(row.test.episodes, ra.dataset.test);
        assert!(row.test.spl <= row.test.sr);
    }
    let mixed = ra.selection("mixed_ensemble").unwrap();
    assert_eq!(mixed.pool_size, 8);
    assert!(mixed.evaluation_count <= evaluation_budget(8, 3, 3));
    assert!(ra.expectations.mixed_pool_is_2m);
    assert!(ra.expectations.ensembles_reach_best_single_val);
    assert!(ra.expectations.searches_within_budget);
    for f in [
        "report.txt",
        "analysis/attention.csv",
        "analysis/scores.csv",
        "analysis/per_scene.csv",
    ] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn rerun_skips_finished_stages_and_stale_inputs_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = cmd_pipeline(&cfg).unwrap();
    let snap = dir.path().join("train/original/m04");
    let stamp = |p: &Path| {
        fs::metadata(p.join("original_m04_p00.snap"))
            .unwrap()
            .modified()
            .unwrap()
    };
    let before = stamp(&snap);
    assert_eq!(cmd_pipeline(&cfg).unwrap(), first);
    assert_eq!(
        stamp(&snap),
        before,
        "training reran although nothing changed"
    );

    let mut changed = cfg.clone();
    changed.search.beam_width = 2;
    let second = cmd_pipeline(&changed).unwrap();
    assert_eq!(stamp(&snap), before, "a search change must not retrain");
    assert_eq!(second.snapshots, first.snapshots);
    let manifest = Manifest::load(dir.path()).unwrap();
    assert!(manifest
        .stages
        .values()
        .all(|s| s.status == StageStatus::Done));
}

#[test]
fn a_failing_stage_is_named_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    // a file where the snapshot directory should go makes the training stage fail
    fs::create_dir_all(dir.path().join("train")).unwrap();
    fs::write(dir.path().join("train/original"), b"in the way").unwrap();
    let err = cmd_pipeline(&cfg).unwrap_err();
    assert!(
        matches!(err, Error::Stage { ref stage, .. } if stage == "train/original"),
        "{err}"
    );
    let manifest = Manifest::load(dir.path()).unwrap();
    assert_eq!(manifest.stages["gen-data"].status, StageStatus::Done);
    assert_eq!(
        manifest.stages["train/original"].status,
        StageStatus::Failed
    );
}

#[test]
fn ablation_fills_the_grid_with_reference_rows_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = cmd_ablate(&cfg).unwrap();
    assert_eq!(report.cells.len(), 2 * 3);
    assert!(report.all_within_budget());
    for &m in &[3, 4] {
        let reference = report.cell(m, 1).unwrap();
        assert_eq!(reference.members.len(), 1);
        assert_eq!(reference.evaluation_count, m);
        for &k in &[2, 3] {
            let c = report.cell(m, k).unwrap();
            assert!(c.members.len() <= k);
            assert!(c.val_sr >= reference.val_sr);
            assert!(c.evaluation_count <= evaluation_budget(m, 3, k));
        }
    }
    let text = fs::read_to_string(dir.path().join("ablation/ablation.txt")).unwrap();
    assert!(text.contains("Test metrics by k at M=3") && text.contains("Test metrics by M at k=2"));
    // the sweep reused the training it needed and runs no further evaluations when repeated
    assert_eq!(cmd_ablate(&cfg).unwrap(), report);
}

#[test]
fn shipped_config_parses_and_matches_the_desk_settings() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.search.max_size, 3);
    assert_eq!(cfg.search.beam_width, 3);
    for v in Variant::ALL {
        let t = cfg.training_for(v);
        assert_eq!(
            (t.total_iterations, t.periods, t.lambda, t.alpha),
            (30_000, 10, 0.5, 0.5)
        );
    }
    assert_eq!(cfg.env.action_limit, 15);
    assert_eq!(cfg.env.success_radius, 3.0);
}
