//! Multi-view fundus image classification pipeline.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`image`] — image tensors, loading, resizing, mirroring
//! - [`dataset`] — manifests, per-subject view sets, completion/exclusion
//! - [`folds`] — patient-wise stratified fold plans
//! - [`synthetic`] — seeded synthetic multi-view cohorts with a known class rule
//! - [`model`] — the multi-view network, its single-view ablation, parameter accounting
//! - [`training`] — augmentation, fold training with early stopping, cross-validation
//! - [`evaluation`] — confusion matrices, the scalar metric suite, ROC/AUC

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod folds;
pub mod image;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use dataset::{
    ClassLabel, Completion, DatasetManifest, DatasetSummary, ExcludedSubject, Eye, ImageSet,
    Provenance, SubjectRecord, ViewKey,
};
pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, MetricReport, PredictionRecord, RocCurve};
pub use folds::FoldPlan;
pub use image::ImageTensor;
pub use model::{BackboneSpec, HeadConfig, MvsModel, ParameterCount};
pub use synthetic::SynthSpec;
pub use training::{AugmentationPolicy, RunConfig, Task, TrainConfig, Variant};
