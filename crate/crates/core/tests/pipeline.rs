use std::fs;
use std::path::Path;

use graphite_core::datacli::{
    import_saliency, load_dataset, run_pipeline, synth_generate, DataError, FeatureDataset, LevelScore, RunConfig,
    RunLayout, SynthConfig,
};

fn dataset() -> FeatureDataset {
    synth_generate(&SynthConfig {
        n_train: 16,
        n_test: 8,
        feature_dim: 8,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: Some(out.to_path_buf()),
        seed: 4,
        ..RunConfig::default()
    };
    cfg.stage1.max_epochs = 20;
    cfg.stage2.train.max_epochs = 5;
    cfg
}

fn manifest_artifacts(root: &Path) -> serde_json::Value {
    let text = fs::read_to_string(root.join("run_manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["artifacts"].clone()
}

#[test]
fn synthetic_run_beats_controls_and_repeats() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = run_pipeline(&ds, &config(&a)).unwrap();
    let sb = run_pipeline(&ds, &config(&b)).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(manifest_artifacts(&a), manifest_artifacts(&b));

    let uniform = sa.report("uniform").unwrap();
    let random = sa.report("random").unwrap();
    let v2 = sa.report("GRAPHITE-V2").unwrap();
    assert!((uniform.auroc - 0.5).abs() <= 0.02, "uniform {}", uniform.auroc);
    assert!((random.auroc - 0.5).abs() <= 0.05, "random {}", random.auroc);
    assert!(v2.cxps >= uniform.cxps + 0.15, "v2 {} uniform {}", v2.cxps, uniform.cxps);
    assert_eq!(sa.reports.len(), 7);
    assert!(sa.reports.windows(2).all(|w| w[0].cxps >= w[1].cxps));
    // Only tumour cores of the test split are scored.
    for id in &sa.scored_cores {
        let core = ds.core(id).unwrap();
        assert_eq!(core.label, 1);
        assert_eq!(core.split, graphite_core::datacli::Split::Test);
    }
}

#[test]
fn skip_train_reuses_checkpoints() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let first = run_pipeline(&ds, &config(&out)).unwrap();
    let report = fs::read(out.join("report.csv")).unwrap();
    let again = run_pipeline(
        &ds,
        &RunConfig {
            skip_train: true,
            ..config(&out)
        },
    )
    .unwrap();
    assert!(again.stage1_history.is_none());
    assert_eq!(first.reports, again.reports);
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), report);
}

#[test]
fn skip_train_without_checkpoint_names_it() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        skip_train: true,
        ..config(tmp.path())
    };
    let err = run_pipeline(&ds, &cfg).unwrap_err();
    assert!(matches!(err, DataError::MissingCheckpoint(_)));
    assert!(err.to_string().contains("stage1.ckpt"), "{err}");
}

#[test]
fn mismatched_raster_grid_is_rejected() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.fusion.raster_downsample = 8;
    let err = run_pipeline(&ds, &cfg).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("raster_downsample"), "{err}");
}

#[test]
fn exported_maps_reload_and_dataset_round_trips() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ds.save(&data).unwrap();
    let loaded = load_dataset(&data).unwrap();
    assert_eq!(loaded, ds);

    let out = tmp.path().join("run");
    let cfg = RunConfig {
        level_scores: LevelScore::San,
        ..config(&out)
    };
    let summary = run_pipeline(&loaded, &cfg).unwrap();
    let maps = import_saliency(&RunLayout::new(&out)).unwrap();
    assert_eq!(maps.len(), 8);
    for cs in &maps {
        assert_eq!(cs.maps.len(), 7);
        for (_, m) in &cs.maps {
            assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert!(summary.report("GRAPHITE-Base").is_some());
}
