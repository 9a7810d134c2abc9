//! Per-subject multi-view image sets: manifests, validation, and
//! missing-view completion.
//!
//! Every subject contributes up to four fundus views — optic nerve
//! head-centered (`v1`) and macula-centered (`v2`) for each eye. A missing
//! view is filled by horizontally mirroring the same view of the other eye;
//! when a view is missing from both eyes the subject is excluded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mirror_horizontal, standardize, ImageTensor};

pub const MANIFEST_SCHEMA_VERSION: &str = "1";

// ---------------------------------------------------------------------------
// Keys and labels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    Right,
    Left,
}

impl Eye {
    pub fn contralateral(self) -> Eye {
        match self {
            Eye::Right => Eye::Left,
            Eye::Left => Eye::Right,
        }
    }
}

/// The two capture views: `v1` is optic nerve head-centered, `v2` is
/// macula-centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FundusView {
    V1,
    V2,
}

/// One of the four (eye, view) slots of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewKey {
    pub eye: Eye,
    pub view: FundusView,
}

impl ViewKey {
    /// Canonical ordering: (R, v1), (R, v2), (L, v1), (L, v2).
    pub const ALL: [ViewKey; 4] = [
        ViewKey {
            eye: Eye::Right,
            view: FundusView::V1,
        },
        ViewKey {
            eye: Eye::Right,
            view: FundusView::V2,
        },
        ViewKey {
            eye: Eye::Left,
            view: FundusView::V1,
        },
        ViewKey {
            eye: Eye::Left,
            view: FundusView::V2,
        },
    ];

    pub fn index(self) -> usize {
        match (self.eye, self.view) {
            (Eye::Right, FundusView::V1) => 0,
            (Eye::Right, FundusView::V2) => 1,
            (Eye::Left, FundusView::V1) => 2,
            (Eye::Left, FundusView::V2) => 3,
        }
    }

    /// Same view of the other eye.
    pub fn contralateral(self) -> ViewKey {
        ViewKey {
            eye: self.eye.contralateral(),
            view: self.view,
        }
    }

    pub fn key_str(self) -> &'static str {
        match self.index() {
            0 => "R_v1",
            1 => "R_v2",
            2 => "L_v1",
            _ => "L_v2",
        }
    }

    pub fn parse(s: &str) -> Option<ViewKey> {
        ViewKey::ALL.into_iter().find(|k| k.key_str() == s)
    }
}

impl fmt::Display for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key_str())
    }
}

/// Binary projection of the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryClass {
    Negative,
    Positive,
}

impl BinaryClass {
    pub fn index(self) -> usize {
        match self {
            BinaryClass::Negative => 0,
            BinaryClass::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Control,
    Stroke,
    Tia,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Control, ClassLabel::Stroke, ClassLabel::Tia];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Control => 0,
            ClassLabel::Stroke => 1,
            ClassLabel::Tia => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        ClassLabel::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Control => "control",
            ClassLabel::Stroke => "stroke",
            ClassLabel::Tia => "tia",
        }
    }

    pub fn parse(s: &str) -> Option<ClassLabel> {
        ClassLabel::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Controls are negative; stroke and TIA form the positive class.
    pub fn binary(self) -> BinaryClass {
        match self {
            ClassLabel::Control => BinaryClass::Negative,
            ClassLabel::Stroke | ClassLabel::Tia => BinaryClass::Positive,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Clinical,
    Synthetic,
}

// ---------------------------------------------------------------------------
// Subject records and manifests
// ---------------------------------------------------------------------------

/// A subject as declared in a manifest: a label plus 0-4 view bindings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectRecord {
    pub id: String,
    pub label: ClassLabel,
    /// Indexed by `ViewKey::index()`; `None` means the view was not captured.
    pub views: [Option<PathBuf>; 4],
    pub source: Source,
}

impl SubjectRecord {
    pub fn bound_views(&self) -> impl Iterator<Item = (ViewKey, &Path)> {
        ViewKey::ALL.into_iter().filter_map(|k| {
            self.views[k.index()]
                .as_deref()
                .map(move |p: &Path| (k, p))
        })
    }

    pub fn bound_count(&self) -> usize {
        self.views.iter().filter(|v| v.is_some()).count()
    }
}

/// Per-class subject counts and per-class per-view image-binding counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Subjects per class, canonical class order.
    pub subjects: [usize; 3],
    /// Bound images per class (rows) and view (columns, canonical order).
    pub images: [[usize; 4]; 3],
}

impl DatasetSummary {
    pub fn total_subjects(&self) -> usize {
        self.subjects.iter().sum()
    }

    pub fn view_totals(&self) -> [usize; 4] {
        let mut t = [0usize; 4];
        for row in &self.images {
            for (slot, v) in t.iter_mut().zip(row) {
                *slot += v;
            }
        }
        t
    }

    pub fn total_images(&self) -> usize {
        self.view_totals().iter().sum()
    }
}

/// A validated collection of subject records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    subjects: Vec<SubjectRecord>,
    summary: DatasetSummary,
}

impl DatasetManifest {
    /// Build a manifest, rejecting duplicate subject ids. The summary is
    /// recomputed from the records so it can never drift.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateSubject(s.id.clone()));
            }
        }
        let summary = summarize_records(&subjects);
        Ok(Self { subjects, summary })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn summary(&self) -> &DatasetSummary {
        &self.summary
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

fn summarize_records(subjects: &[SubjectRecord]) -> DatasetSummary {
    let mut summary = DatasetSummary {
        subjects: [0; 3],
        images: [[0; 4]; 3],
    };
    for s in subjects {
        let c = s.label.index();
        summary.subjects[c] += 1;
        for (key, _) in s.bound_views() {
            summary.images[c][key.index()] += 1;
        }
    }
    summary
}

/// Per-class per-view count table for a manifest.
pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    summarize_records(manifest.subjects())
}

// --- manifest file format ---------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema_version: String,
    subjects: Vec<SubjectFileEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectFileEntry {
    id: String,
    label: String,
    views: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// Parse and validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::schema("manifest", e.to_string()))?;
    if file.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!(
                "expected \"{MANIFEST_SCHEMA_VERSION}\", got \"{}\"",
                file.schema_version
            ),
        ));
    }
    let mut subjects = Vec::with_capacity(file.subjects.len());
    for (idx, entry) in file.subjects.into_iter().enumerate() {
        let label = ClassLabel::parse(&entry.label).ok_or_else(|| {
            Error::schema(
                format!("subjects[{idx}].label"),
                format!("unknown label \"{}\"", entry.label),
            )
        })?;
        let mut views: [Option<PathBuf>; 4] = Default::default();
        for (k, v) in &entry.views {
            let key = ViewKey::parse(k).ok_or_else(|| {
                Error::schema(
                    format!("subjects[{idx}].views"),
                    format!("unknown view key \"{k}\""),
                )
            })?;
            views[key.index()] = Some(PathBuf::from(v));
        }
        let source = match entry.source.as_deref() {
            None | Some("clinical") => Source::Clinical,
            Some("synthetic") => Source::Synthetic,
            Some(other) => {
                return Err(Error::schema(
                    format!("subjects[{idx}].source"),
                    format!("unknown source \"{other}\""),
                ))
            }
        };
        subjects.push(SubjectRecord {
            id: entry.id,
            label,
            views,
            source,
        });
    }
    DatasetManifest::new(subjects)
}

/// Serialize a manifest to the file schema.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = ManifestFile {
        schema_version: MANIFEST_SCHEMA_VERSION.to_string(),
        subjects: manifest
            .subjects()
            .iter()
            .map(|s| SubjectFileEntry {
                id: s.id.clone(),
                label: s.label.name().to_string(),
                views: s
                    .bound_views()
                    .map(|(k, p)| (k.key_str().to_string(), p.to_string_lossy().into_owned()))
                    .collect(),
                source: match s.source {
                    Source::Clinical => None,
                    Source::Synthetic => Some("synthetic".to_string()),
                },
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Completion and exclusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    MirroredFromContralateral,
}

/// A complete four-view bundle for one subject.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: [Arc<ImageTensor>; 4],
    pub provenance: [Provenance; 4],
    pub label: ClassLabel,
}

impl ImageSet {
    pub fn image(&self, key: ViewKey) -> &ImageTensor {
        &self.images[key.index()]
    }

    /// Resize every view to the standard network input size.
    pub fn standardized(&self) -> ImageSet {
        ImageSet {
            images: std::array::from_fn(|i| {
                if self.images[i].is_standard_size() {
                    Arc::clone(&self.images[i])
                } else {
                    Arc::new(standardize(&self.images[i]))
                }
            }),
            provenance: self.provenance,
            label: self.label,
        }
    }
}

/// A subject dropped by the completion rule, with the reason recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedSubject {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub enum Completion {
    Set(ImageSet),
    Excluded(ExcludedSubject),
}

/// Completion rule on already-loaded view images.
///
/// Each missing view is filled with the horizontal mirror of the same view of
/// the other eye; if some view is absent from both eyes the subject is
/// excluded.
pub fn complete_views(
    subject_id: &str,
    label: ClassLabel,
    loaded: [Option<Arc<ImageTensor>>; 4],
) -> Completion {
    for view in [FundusView::V1, FundusView::V2] {
        let right = ViewKey {
            eye: Eye::Right,
            view,
        };
        let left = ViewKey {
            eye: Eye::Left,
            view,
        };
        if loaded[right.index()].is_none() && loaded[left.index()].is_none() {
            let v = match view {
                FundusView::V1 => "v1",
                FundusView::V2 => "v2",
            };
            return Completion::Excluded(ExcludedSubject {
                subject_id: subject_id.to_string(),
                reason: format!("no contralateral {v}"),
            });
        }
    }
    let mut images: [Option<Arc<ImageTensor>>; 4] = Default::default();
    let mut provenance = [Provenance::Original; 4];
    for key in ViewKey::ALL {
        let i = key.index();
        match &loaded[i] {
            Some(img) => images[i] = Some(Arc::clone(img)),
            None => {
                let contra = &loaded[key.contralateral().index()];
                let src = contra.as_ref().expect("checked above");
                images[i] = Some(Arc::new(mirror_horizontal(src)));
                provenance[i] = Provenance::MirroredFromContralateral;
            }
        }
    }
    Completion::Set(ImageSet {
        images: images.map(|o| o.expect("all views filled")),
        provenance,
        label,
    })
}

/// Load a record's bound images and apply the completion rule.
///
/// Relative view paths are resolved against `base_dir`.
pub fn complete_or_exclude(record: &SubjectRecord, base_dir: &Path) -> Result<Completion> {
    let mut loaded: [Option<Arc<ImageTensor>>; 4] = Default::default();
    for (key, rel) in record.bound_views() {
        let path = if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            base_dir.join(rel)
        };
        let img = ImageTensor::load(&path).map_err(|e| match e {
            Error::MissingFile(p) => Error::UnreadableImage {
                view: key.key_str().to_string(),
                path: p,
                message: "file not found".into(),
            },
            Error::UnreadableImage { path, message, .. } => Error::UnreadableImage {
                view: key.key_str().to_string(),
                path,
                message,
            },
            other => other,
        })?;
        loaded[key.index()] = Some(Arc::new(img));
    }
    Ok(complete_views(&record.id, record.label, loaded))
}
