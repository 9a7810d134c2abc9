//! Subcommand implementations.

use std::path::{Path, PathBuf};

use mvsnet::dataset::{self, ClassLabel, Completion, DatasetSummary, Provenance, ViewKey};
use mvsnet::error::{Error, Result};
use mvsnet::evaluation::{
    confusion_binary, confusion_multiclass, one_vs_rest_predictions, read_metrics_json,
    read_predictions_csv, roc_auc, PredictionRecord,
};
use mvsnet::folds::make_folds;
use mvsnet::model::{
    head_parameter_count, hidden_width, lookup_backbone, model_parameter_count, BackboneSpec,
    REGISTRY,
};
use mvsnet::synthetic::{generate_cohort, SynthSpec};
use mvsnet::training::{
    cross_validate, metrics_table, radar_rows, write_radar_csv, write_run_dir, RunConfig, RunJson,
    Task, Variant,
};

fn print_summary(summary: &DatasetSummary) {
    println!(
        "{:<10}{:>10}{:>8}{:>8}{:>8}{:>8}",
        "Class", "Subjects", "R_v1", "R_v2", "L_v1", "L_v2"
    );
    for class in ClassLabel::ALL {
        let c = class.index();
        let row = summary.images[c];
        println!(
            "{:<10}{:>10}{:>8}{:>8}{:>8}{:>8}",
            class.name(),
            summary.subjects[c],
            row[0],
            row[1],
            row[2],
            row[3]
        );
    }
    let totals = summary.view_totals();
    println!(
        "{:<10}{:>10}{:>8}{:>8}{:>8}{:>8}",
        "total",
        summary.total_subjects(),
        totals[0],
        totals[1],
        totals[2],
        totals[3]
    );
    println!("images total: {}", summary.total_images());
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let mut spec = SynthSpec::load(spec_path)?;
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    let manifest = generate_cohort(&spec, out)?;
    println!(
        "wrote {} subjects under {}",
        manifest.len(),
        out.display()
    );
    print_summary(manifest.summary());
    Ok(())
}

pub fn validate(manifest_path: &Path) -> Result<()> {
    let manifest = dataset::load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut completed = 0usize;
    let mut filled = 0usize;
    let mut excluded = 0usize;
    let mut unreadable: Option<Error> = None;
    for record in manifest.subjects() {
        match dataset::complete_or_exclude(record, base) {
            Ok(Completion::Set(set)) => {
                let fills: Vec<&str> = ViewKey::ALL
                    .into_iter()
                    .filter(|k| set.provenance[k.index()] == Provenance::MirroredFromContralateral)
                    .map(|k| k.key_str())
                    .collect();
                if fills.is_empty() {
                    completed += 1;
                    println!("{}: complete", record.id);
                } else {
                    filled += 1;
                    println!(
                        "{}: filled {} by mirroring the other eye",
                        record.id,
                        fills.join(", ")
                    );
                }
            }
            Ok(Completion::Excluded(e)) => {
                excluded += 1;
                println!("{}: EXCLUDED ({})", e.subject_id, e.reason);
            }
            Err(err) => {
                println!("{}: ERROR {err}", record.id);
                if unreadable.is_none() {
                    unreadable = Some(err);
                }
            }
        }
    }
    println!(
        "\n{} complete, {} with mirrored fills, {} excluded",
        completed, filled, excluded
    );
    print_summary(manifest.summary());
    match unreadable {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

pub fn folds(manifest_path: &Path, k: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let manifest = dataset::load_manifest(manifest_path)?;
    let seed = env_seed()?.unwrap_or(seed);
    let plan = make_folds(&manifest, k, seed)?;
    println!("k = {}, seed = {}", plan.k, plan.seed);
    let mut per_class = vec![[0usize; 3]; k];
    for s in manifest.subjects() {
        per_class[plan.fold_of(&s.id).unwrap()][s.label.index()] += 1;
    }
    println!(
        "{:<6}{:>9}{:>9}{:>9}{:>9}",
        "Fold", "control", "stroke", "tia", "total"
    );
    for (fold, counts) in per_class.iter().enumerate() {
        println!(
            "{:<6}{:>9}{:>9}{:>9}{:>9}",
            fold,
            counts[0],
            counts[1],
            counts[2],
            counts.iter().sum::<usize>()
        );
    }
    if let Some(path) = out {
        plan.save(path)?;
        println!("fold plan written to {}", path.display());
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub jobs: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub task: Option<String>,
    pub variant: Option<String>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MVS_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("MVS_SEED must be an integer: {e}"))),
        Err(_) => Ok(None),
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    // Flags override file values; MVS_SEED overrides the master seed last.
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(epochs) = args.max_epochs {
        cfg.train.max_epochs = epochs;
    }
    if let Some(task) = args.task {
        cfg.task = match task.as_str() {
            "binary" => Task::Binary,
            _ => Task::Multiclass,
        };
    }
    if let Some(variant) = args.variant {
        cfg.variant = match variant.as_str() {
            "multi-view" => Variant::MultiView,
            _ => Variant::SingleView,
        };
    }
    cfg.validate()?;

    // Paths resolve relative to the config file's directory.
    let config_dir = args
        .config
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let manifest_path = config_dir.join(&cfg.dataset);
    let out_dir = config_dir.join(&cfg.out_dir);

    let manifest = dataset::load_manifest(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    println!(
        "training {} {} on {} subjects ({} folds, seed {})",
        cfg.variant.name(),
        match cfg.task {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        },
        manifest.len(),
        cfg.folds,
        cfg.seed
    );
    let outcome = cross_validate(&manifest, base, &cfg, args.jobs)?;
    write_run_dir(&cfg, &outcome, &out_dir)?;
    for fold in &outcome.folds {
        println!(
            "fold {}: {} epochs, best epoch {}, {} test predictions",
            fold.fold,
            fold.curve.epochs.len(),
            fold.best_epoch,
            fold.predictions.len()
        );
    }
    if !outcome.excluded.is_empty() {
        println!("excluded subjects: {}", outcome.excluded.len());
    }
    print!("{}", metrics_table(&outcome.scopes));
    println!("run artifacts in {}", out_dir.display());
    Ok(())
}

/// Missing run artifacts are a usage problem (exit 2), not an I/O failure.
fn artifact<T>(result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::MissingFile(path) => Error::Config(format!(
            "run artifact missing: {} (is this a finished run directory?)",
            path.display()
        )),
        other => other,
    })
}

pub fn report(run: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let run_json = load_run_json(run)?;
    let scopes = artifact(read_metrics_json(&run.join("metrics.json")))?;
    let preds = load_all_predictions(run, run_json.fold_plan.k)?;

    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("report"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let table = metrics_table(&scopes);
    print!("{table}");
    std::fs::write(out_dir.join("metrics.txt"), &table)
        .map_err(|e| Error::io(out_dir.join("metrics.txt"), e))?;

    let cutoff = run_json.config.train.cutoff;
    match run_json.config.task {
        Task::Binary => {
            let cm = confusion_binary(&preds, cutoff)?;
            cm.write_csv(&out_dir.join("confusion.csv"))?;
            let curve = roc_auc(&preds, 1)?;
            curve.write_csv(&out_dir.join("roc_binary.csv"))?;
        }
        Task::Multiclass => {
            let cm = confusion_multiclass(&preds, 3)?;
            cm.write_csv(&out_dir.join("confusion.csv"))?;
            for (c, name) in Task::Multiclass.class_names().iter().enumerate() {
                if let Ok(curve) = roc_auc(&one_vs_rest_predictions(&preds, c), 1) {
                    curve.write_csv(&out_dir.join(format!("roc_{name}.csv")))?;
                }
            }
        }
    }

    write_combined_curves(run, run_json.fold_plan.k, &out_dir.join("curves.csv"))?;

    if let Some(other) = compare {
        let other_json = load_run_json(other)?;
        let other_scopes = artifact(read_metrics_json(&other.join("metrics.json")))?;
        let mut rows = radar_rows(&scopes, run_json.config.variant.name());
        rows.extend(radar_rows(&other_scopes, other_json.config.variant.name()));
        write_radar_csv(&rows, &out_dir.join("radar.csv"))?;
        println!("radar data written for {} vs {}", run_json.config.variant.name(), other_json.config.variant.name());
    }
    println!("report in {}", out_dir.display());
    Ok(())
}

fn load_run_json(run: &Path) -> Result<RunJson> {
    let path = run.join("run.json");
    if !path.exists() {
        return Err(Error::Config(format!(
            "run artifact missing: {} (is this a finished run directory?)",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn load_all_predictions(run: &Path, k: usize) -> Result<Vec<PredictionRecord>> {
    let mut all = Vec::new();
    for fold in 0..k {
        let path = run.join("folds").join(fold.to_string()).join("predictions.csv");
        all.extend(artifact(read_predictions_csv(&path))?);
    }
    Ok(all)
}

fn write_combined_curves(run: &Path, k: usize, out: &Path) -> Result<()> {
    let mut text = String::from("fold,epoch,loss,accuracy,seconds\n");
    for fold in 0..k {
        let path = run.join("folds").join(fold.to_string()).join("curve.csv");
        if !path.exists() {
            return Err(Error::Config(format!(
                "run artifact missing: {}",
                path.display()
            )));
        }
        let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in content.lines().skip(1) {
            text.push_str(&format!("{fold},{line}\n"));
        }
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}

pub fn params(
    backbone: Option<&str>,
    d_view: Option<usize>,
    views: usize,
    classes: usize,
    all: bool,
) -> Result<()> {
    println!(
        "{:<14}{:>8}{:>8}{:>14}{:>14}{:>14}{:>14}",
        "Backbone", "d_view", "hidden", "head", "trainable", "non-train", "total"
    );
    let row = |name: &str, d_override: Option<usize>| -> Result<()> {
        let mut spec = BackboneSpec::named(name);
        spec.d_view = d_override;
        let resolved = spec.resolve()?;
        let count = model_parameter_count(&spec, views, classes, true)?;
        println!(
            "{:<14}{:>8}{:>8}{:>14}{:>14}{:>14}{:>14}",
            resolved.info.name,
            resolved.d_view,
            hidden_width(views, resolved.d_view),
            head_parameter_count(resolved.d_view, views, classes),
            count.trainable,
            count.non_trainable,
            count.total()
        );
        Ok(())
    };
    if all || backbone.is_none() {
        for info in REGISTRY {
            row(info.name, None)?;
        }
        return Ok(());
    }
    let name = backbone.expect("checked above");
    if lookup_backbone(name).is_none() {
        return Err(Error::UnknownBackbone(name.to_string()));
    }
    row(name, d_view)
}
