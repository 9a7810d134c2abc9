//! Fold training with early stopping and best-accuracy checkpointing, plus
//! the cross-validation driver for the multi-view and single-view variants.
//!
//! Early stopping monitors the training loss (the protocol describes no
//! validation split); the checkpoint is the epoch with the highest training
//! categorical accuracy. Augmentation touches the training portion only and
//! is grouped by the three-way class label for both tasks.

mod artifacts;
mod augment;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::NdFloat;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use artifacts::{metrics_table, radar_rows, write_radar_csv, write_run_dir, RadarRow, RunJson};
pub use augment::{
    apply_transform, augment_images_to_target, augment_set, augment_sets_to_target,
    sample_transform, AffineParams, AugmentationPolicy,
};

use crate::dataset::{
    complete_or_exclude, ClassLabel, Completion, DatasetManifest, ExcludedSubject, ImageSet,
    Provenance, SubjectRecord, ViewKey,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    accumulate, binary_report, confusion_binary, confusion_multiclass, multiclass_report,
    ConfusionMatrix, PredictionRecord, ScopedReports,
};
use crate::folds::{make_folds, FoldPlan};
use crate::image::ImageTensor;
use crate::model::{BackboneSpec, ForwardMode, HeadConfig, MvsModel};
use crate::rng::{derive_rng, derive_seed, purpose};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => 3,
        }
    }

    pub fn class_index(self, label: ClassLabel) -> usize {
        match self {
            Task::Binary => label.binary().index(),
            Task::Multiclass => label.index(),
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Binary => &["negative", "positive"],
            Task::Multiclass => &["control", "stroke", "tia"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "multi-view")]
    MultiView,
    #[serde(rename = "single-view")]
    SingleView,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MultiView => "multi-view",
            Variant::SingleView => "single-view",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub augment_target_per_class: usize,
    pub cutoff: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            max_epochs: 300,
            early_stop_patience: 5,
            augment_target_per_class: 1000,
            cutoff: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience must be in [1, max_epochs], got {}",
                self.early_stop_patience
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::Config(format!(
                "cutoff must be in [0, 1], got {}",
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// The full declarative run configuration; mirrors the config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    pub backbone: BackboneSpec,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentationPolicy,
    /// Manifest path, relative to the config file's directory.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
}

fn default_dropout() -> f64 {
    crate::model::DEFAULT_DROPOUT
}

fn default_folds() -> usize {
    5
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        self.backbone.resolve()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::schema("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Training units and curves
// ---------------------------------------------------------------------------

/// One training sample: the images of a multi-view set, or a single image.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub images: Vec<Arc<ImageTensor>>,
    pub class: usize,
}

#[derive(Debug, Clone)]
struct EvalUnit {
    unit_id: String,
    images: Vec<Arc<ImageTensor>>,
    class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,loss,accuracy,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.loss, e.accuracy, e.seconds
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub struct FoldOutcome {
    pub fold: usize,
    pub curve: TrainingCurve,
    pub best_epoch: usize,
    pub predictions: Vec<PredictionRecord>,
    pub confusion: ConfusionMatrix,
    pub model: MvsModel<f32>,
}

pub struct CvOutcome {
    pub plan: FoldPlan,
    pub excluded: Vec<ExcludedSubject>,
    pub folds: Vec<FoldOutcome>,
    pub pooled_confusion: ConfusionMatrix,
    pub scopes: ScopedReports,
}

impl CvOutcome {
    pub fn pooled_predictions(&self) -> Vec<PredictionRecord> {
        self.folds
            .iter()
            .flat_map(|f| f.predictions.iter().cloned())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction; moment state is kept in f64 regardless of the
/// model precision.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step<F: NdFloat>(
        &mut self,
        params: &mut [F],
        grads: &[F],
        range: std::ops::Range<usize>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in range {
            let g = grads[i].to_f64().unwrap();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            params[i] = params[i] - F::from(delta).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// Single-fold training
// ---------------------------------------------------------------------------

/// Train on the given samples. Stops early when the training loss fails to
/// improve for `early_stop_patience` consecutive epochs, and restores the
/// weights of the epoch whose training categorical accuracy was highest.
pub fn train_fold(
    model: &mut MvsModel<f32>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainingCurve, usize)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(cfg.learning_rate, model.params().len());
    let mut grads: Vec<f32> = Vec::new();
    let mut curve = TrainingCurve::default();

    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<f32> = model.params().to_vec();
    let mut best_loss = f64::INFINITY;
    let mut stall = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images: Vec<&ImageTensor> =
                Vec::with_capacity(chunk.len() * model.num_views());
            let mut labels: Vec<usize> = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &samples[idx];
                images.extend(sample.images.iter().map(|a| a.as_ref()));
                labels.push(sample.class);
            }
            let stats = model.train_batch_grads(&images, &labels, rng, &mut grads)?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    details: format!("batch of {} produced loss {}", chunk.len(), stats.loss),
                });
            }
            let range = model.trainable_range();
            adam.step(model.params_mut(), &grads, range);
            loss_sum += stats.loss * chunk.len() as f64;
            correct += stats.correct;
        }
        let loss = loss_sum / n as f64;
        let accuracy = correct as f64 / n as f64;
        curve.epochs.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            seconds: start.elapsed().as_secs_f64(),
        });

        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params());
        }
        if loss < best_loss {
            best_loss = loss;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.early_stop_patience {
                break;
            }
        }
    }

    model.set_params(best_params)?;
    Ok((curve, best_epoch))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct LoadedSubject {
    id: String,
    record: SubjectRecord,
    set: ImageSet,
}

fn load_subjects(
    manifest: &DatasetManifest,
    base_dir: &Path,
) -> Result<(Vec<LoadedSubject>, Vec<ExcludedSubject>)> {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for record in manifest.subjects() {
        match complete_or_exclude(record, base_dir)? {
            Completion::Set(set) => included.push(LoadedSubject {
                id: record.id.clone(),
                record: record.clone(),
                set: set.standardized(),
            }),
            Completion::Excluded(e) => excluded.push(e),
        }
    }
    Ok((included, excluded))
}

/// The images a single-view run sees for one subject: only the views that
/// were actually captured, never mirrored fills.
fn original_view_images(subject: &LoadedSubject) -> Vec<(ViewKey, Arc<ImageTensor>)> {
    ViewKey::ALL
        .into_iter()
        .filter(|k| subject.set.provenance[k.index()] == Provenance::Original)
        .map(|k| (k, Arc::clone(&subject.set.images[k.index()])))
        .collect()
}

fn present_classes(subjects: &[LoadedSubject]) -> Vec<ClassLabel> {
    ClassLabel::ALL
        .into_iter()
        .filter(|c| subjects.iter().any(|s| s.record.label == *c))
        .collect()
}

fn run_fold(
    cfg: &RunConfig,
    fold: usize,
    plan: &FoldPlan,
    subjects: &[LoadedSubject],
    required: &[ClassLabel],
) -> Result<FoldOutcome> {
    let task = cfg.task;
    let (test_subjects, train_subjects): (Vec<_>, Vec<_>) = subjects
        .iter()
        .partition(|s| plan.fold_of(&s.id) == Some(fold));

    // Augment the training portion only, grouped by the three-way label.
    let mut augment_rng = derive_rng(cfg.seed, purpose::AUGMENT, fold as u64);
    let samples: Vec<TrainSample> = match cfg.variant {
        Variant::MultiView => {
            let train_sets: Vec<ImageSet> =
                train_subjects.iter().map(|s| s.set.clone()).collect();
            augment_sets_to_target(
                &train_sets,
                &cfg.augment,
                cfg.train.augment_target_per_class,
                required,
                &mut augment_rng,
            )?
            .into_iter()
            .map(|set| TrainSample {
                class: task.class_index(set.label),
                images: set.images.to_vec(),
            })
            .collect()
        }
        Variant::SingleView => {
            let train_images: Vec<(Arc<ImageTensor>, ClassLabel)> = train_subjects
                .iter()
                .flat_map(|s| {
                    original_view_images(s)
                        .into_iter()
                        .map(|(_, img)| (img, s.record.label))
                })
                .collect();
            augment_images_to_target(
                &train_images,
                &cfg.augment,
                cfg.train.augment_target_per_class,
                required,
                &mut augment_rng,
            )?
            .into_iter()
            .map(|(img, label)| TrainSample {
                class: task.class_index(label),
                images: vec![img],
            })
            .collect()
        }
    };

    let num_views = match cfg.variant {
        Variant::MultiView => 4,
        Variant::SingleView => 1,
    };
    let d_view = cfg.backbone.resolve()?.d_view;
    let head = HeadConfig::new(num_views, d_view, task.num_classes())?
        .with_dropout(cfg.dropout_rate)?;
    let init_seed = derive_seed(cfg.seed, purpose::MODEL_INIT, fold as u64);
    let mut model = MvsModel::<f32>::build_configured(&cfg.backbone, &head, init_seed)?;

    let mut train_rng = derive_rng(cfg.seed, purpose::TRAIN_LOOP, fold as u64);
    let (curve, best_epoch) = train_fold(&mut model, &samples, &cfg.train, &mut train_rng)?;

    // Predict the untouched test portion with the restored best weights.
    let test_units: Vec<EvalUnit> = match cfg.variant {
        Variant::MultiView => test_subjects
            .iter()
            .map(|s| EvalUnit {
                unit_id: s.id.clone(),
                images: s.set.images.to_vec(),
                class: task.class_index(s.record.label),
            })
            .collect(),
        Variant::SingleView => test_subjects
            .iter()
            .flat_map(|s| {
                original_view_images(s).into_iter().map(|(key, img)| EvalUnit {
                    unit_id: format!("{}/{}", s.id, key.key_str()),
                    images: vec![img],
                    class: task.class_index(s.record.label),
                })
            })
            .collect(),
    };

    let mut predictions = Vec::with_capacity(test_units.len());
    for chunk in test_units.chunks(cfg.train.batch_size.max(1)) {
        let images: Vec<&ImageTensor> = chunk
            .iter()
            .flat_map(|u| u.images.iter().map(|a| a.as_ref()))
            .collect();
        let probs = model.forward_images(&images, chunk.len(), ForwardMode::Eval)?;
        for (i, unit) in chunk.iter().enumerate() {
            predictions.push(PredictionRecord {
                unit_id: unit.unit_id.clone(),
                fold,
                true_label: unit.class,
                scores: probs.row(i).iter().map(|v| *v as f64).collect(),
            });
        }
    }

    let confusion = match task {
        Task::Binary => confusion_binary(&predictions, cfg.train.cutoff)?,
        Task::Multiclass => confusion_multiclass(&predictions, 3)?,
    };

    Ok(FoldOutcome {
        fold,
        curve,
        best_epoch,
        predictions,
        confusion,
        model,
    })
}

/// Run the full stratified cross-validation: load and complete every
/// subject, plan folds patient-wise, train each fold on its augmented
/// training portion, and evaluate on the untouched test portion.
///
/// `jobs > 1` trains folds in parallel; per-fold derived streams make the
/// results identical to a serial run.
pub fn cross_validate(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<CvOutcome> {
    cfg.validate()?;
    let (subjects, excluded) = load_subjects(manifest, base_dir)?;
    if subjects.is_empty() {
        return Err(Error::Config("no subjects survived completion".into()));
    }
    let included_manifest =
        DatasetManifest::new(subjects.iter().map(|s| s.record.clone()).collect())?;
    let plan = make_folds(&included_manifest, cfg.folds, cfg.seed)?;
    let required = present_classes(&subjects);

    let fold_indices: Vec<usize> = (0..cfg.folds).collect();
    let outcomes: Vec<Result<FoldOutcome>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            fold_indices
                .par_iter()
                .map(|&fold| run_fold(cfg, fold, &plan, &subjects, &required))
                .collect()
        })
    } else {
        fold_indices
            .iter()
            .map(|&fold| run_fold(cfg, fold, &plan, &subjects, &required))
            .collect()
    };
    let mut folds = Vec::with_capacity(cfg.folds);
    for outcome in outcomes {
        folds.push(outcome?);
    }

    let per_fold: Vec<ConfusionMatrix> = folds.iter().map(|f| f.confusion.clone()).collect();
    let pooled_confusion = accumulate(&per_fold)?;
    let pooled: Vec<PredictionRecord> = folds
        .iter()
        .flat_map(|f| f.predictions.iter().cloned())
        .collect();
    let scopes = match cfg.task {
        Task::Binary => binary_report(&pooled, cfg.train.cutoff)?,
        Task::Multiclass => {
            multiclass_report(&pooled, Task::Multiclass.class_names(), cfg.train.cutoff)?
        }
    };

    Ok(CvOutcome {
        plan,
        excluded,
        folds,
        pooled_confusion,
        scopes,
    })
}
