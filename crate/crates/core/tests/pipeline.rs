//! Cross-module pipeline checks on a small cohort: the multi-class task,
//! run-directory artifacts, and exclusion handling.

use std::path::Path;

use mvsnet::dataset::load_manifest;
use mvsnet::evaluation::{read_metrics_json, read_predictions_csv};
use mvsnet::model::{BackboneSpec, CheckpointMeta, MvsModel};
use mvsnet::synthetic::{generate_cohort, SynthSpec};
use mvsnet::training::{
    cross_validate, write_run_dir, AugmentationPolicy, RunConfig, Task, TrainConfig, Variant,
};

fn small_run_config(task: Task, variant: Variant, dataset: &Path, out: &Path) -> RunConfig {
    RunConfig {
        task,
        variant,
        backbone: BackboneSpec::tinyconv(12),
        dropout_rate: 0.4,
        train: TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            max_epochs: 2,
            early_stop_patience: 2,
            augment_target_per_class: 7,
            cutoff: 0.5,
        },
        augment: AugmentationPolicy {
            shift_frac: 0.03,
            shear_deg: 2.0,
            rotation_deg_range: [0.0, 5.0],
            zoom_frac: 0.03,
            allow_flip: false,
            per_view_independent: true,
        },
        dataset: dataset.to_path_buf(),
        out_dir: out.to_path_buf(),
        folds: 3,
        seed: 99,
    }
}

#[test]
fn multiclass_run_produces_full_artifact_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let mut spec = SynthSpec::new(6, 6, 6, 5);
    spec.image_side = 64; // standardization upsamples to the network input
    spec.noise_sigma = 0.05;
    let manifest = generate_cohort(&spec, &cohort).unwrap();

    let out = dir.path().join("run");
    let cfg = small_run_config(
        Task::Multiclass,
        Variant::MultiView,
        &cohort.join("manifest.json"),
        &out,
    );
    let outcome = cross_validate(&manifest, &cohort, &cfg, 1).unwrap();
    write_run_dir(&cfg, &outcome, &out).unwrap();

    // Every subject is predicted exactly once across test folds.
    let pooled = outcome.pooled_predictions();
    assert_eq!(pooled.len(), 18);
    assert!(pooled.iter().all(|p| p.scores.len() == 3));
    for p in &pooled {
        let sum: f64 = p.scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    // Multi-class report: one scope per class, shared overall accuracy.
    assert_eq!(
        outcome.scopes.keys().cloned().collect::<Vec<_>>(),
        ["control", "stroke", "tia"]
    );
    let accs: Vec<f64> = outcome.scopes.values().map(|r| r.accuracy).collect();
    assert!(accs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    assert_eq!(outcome.pooled_confusion.k(), 3);
    assert_eq!(outcome.pooled_confusion.total(), 18);

    // Run-directory layout.
    assert!(out.join("run.json").exists());
    for fold in 0..3 {
        let fold_dir = out.join("folds").join(fold.to_string());
        assert!(fold_dir.join("curve.csv").exists());
        assert!(fold_dir.join("predictions.csv").exists());
        assert!(fold_dir.join("checkpoint.json").exists());
        let meta: CheckpointMeta = serde_json::from_str(
            &std::fs::read_to_string(fold_dir.join("checkpoint.meta.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(meta.num_classes, 3);
        assert_eq!(meta.num_views, 4);
        // The checkpoint reloads into a working model.
        let model = MvsModel::<f32>::load_checkpoint(&fold_dir).unwrap();
        assert_eq!(model.num_classes(), 3);
    }
    let scopes = read_metrics_json(&out.join("metrics.json")).unwrap();
    assert_eq!(scopes.len(), 3);
    let preds = read_predictions_csv(&out.join("folds").join("0").join("predictions.csv")).unwrap();
    assert!(!preds.is_empty());
}

#[test]
fn excluded_subjects_are_recorded_not_trained() {
    // Remove both v2 images of one subject: it must be excluded from folds
    // and predictions but still appear in the exclusion record.
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let mut spec = SynthSpec::new(6, 6, 6, 8);
    spec.image_side = 64;
    let manifest = generate_cohort(&spec, &cohort).unwrap();
    let victim = manifest.subjects()[0].id.clone();
    for view in ["R_v2", "L_v2"] {
        std::fs::remove_file(cohort.join("images").join(format!("{victim}_{view}.png"))).unwrap();
    }
    // Rewrite the manifest without the removed bindings.
    let mut text = std::fs::read_to_string(cohort.join("manifest.json")).unwrap();
    for view in ["R_v2", "L_v2"] {
        text = text.replace(&format!("\"{view}\": \"images/{victim}_{view}.png\","), "");
        text = text.replace(&format!(",\n        \"{view}\": \"images/{victim}_{view}.png\""), "");
    }
    std::fs::write(cohort.join("manifest.json"), text).unwrap();
    let manifest = load_manifest(&cohort.join("manifest.json")).unwrap();

    let out = dir.path().join("run");
    let cfg = small_run_config(
        Task::Binary,
        Variant::SingleView,
        &cohort.join("manifest.json"),
        &out,
    );
    let outcome = cross_validate(&manifest, &cohort, &cfg, 1).unwrap();

    assert_eq!(outcome.excluded.len(), 1);
    assert_eq!(outcome.excluded[0].subject_id, victim);
    assert!(outcome.excluded[0].reason.contains("v2"));
    assert!(outcome.plan.fold_of(&victim).is_none());
    let pooled = outcome.pooled_predictions();
    assert!(pooled.iter().all(|p| !p.unit_id.starts_with(&victim)));
    // 17 remaining subjects x 4 original images each.
    assert_eq!(pooled.len(), 17 * 4);

    // The exclusion survives into run.json.
    write_run_dir(&cfg, &outcome, &out).unwrap();
    let run_text = std::fs::read_to_string(out.join("run.json")).unwrap();
    assert!(run_text.contains(&victim));
}

#[test]
fn fold_parallelism_matches_serial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let mut spec = SynthSpec::new(4, 4, 4, 21);
    spec.image_side = 64;
    let manifest = generate_cohort(&spec, &cohort).unwrap();
    let cfg = small_run_config(
        Task::Binary,
        Variant::MultiView,
        &cohort.join("manifest.json"),
        &dir.path().join("run"),
    );
    let mut cfg = cfg;
    cfg.folds = 2;
    let serial = cross_validate(&manifest, &cohort, &cfg, 1).unwrap();
    let parallel = cross_validate(&manifest, &cohort, &cfg, 2).unwrap();
    assert_eq!(serial.scopes, parallel.scopes);
    let (a, b) = (serial.pooled_predictions(), parallel.pooled_predictions());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.unit_id, y.unit_id);
        assert_eq!(x.scores, y.scores);
    }
}
