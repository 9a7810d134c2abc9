//! Confusion matrices, the scalar metric suite, and ROC/AUC.
//!
//! Metrics are always computed from pooled counts of the accumulated
//! confusion matrix, not from averaged per-fold metrics. Tie rules are fixed:
//! a positive score equal to the cutoff predicts positive, and argmax ties
//! break to the lowest class index.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking published rates against integer matrices.
pub const RATE_TOLERANCE: f64 = 0.0005;

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// One evaluated unit: a subject (multi-view) or an image (single-view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unit_id: String,
    pub fold: usize,
    /// Index into the task's class space.
    pub true_label: usize,
    /// Softmax scores over the task classes; sums to 1 within 1e-6.
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn predicted_argmax(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Confusion matrices
// ---------------------------------------------------------------------------

/// K x K counts; rows are true classes, columns predicted classes. For
/// binary matrices class 1 is the positive class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} counts for k = {k}, got {}",
                k * k,
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn binary(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        Self {
            k: 2,
            counts: vec![tn, fp, fn_, tp],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.k + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, true_class: usize) -> u64 {
        (0..self.k).map(|j| self.get(true_class, j)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, predicted)).sum()
    }

    pub fn true_positives(&self) -> u64 {
        debug_assert_eq!(self.k, 2);
        self.get(1, 1)
    }

    pub fn false_negatives(&self) -> u64 {
        debug_assert_eq!(self.k, 2);
        self.get(1, 0)
    }

    pub fn false_positives(&self) -> u64 {
        debug_assert_eq!(self.k, 2);
        self.get(0, 1)
    }

    pub fn true_negatives(&self) -> u64 {
        debug_assert_eq!(self.k, 2);
        self.get(0, 0)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.k)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Binary confusion matrix at a score cutoff: positive is predicted when the
/// positive-class score is >= the cutoff.
pub fn confusion_binary(preds: &[PredictionRecord], cutoff: f64) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(2);
    for p in preds {
        if p.scores.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "binary confusion needs 2-class scores, unit `{}` has {}",
                p.unit_id,
                p.scores.len()
            )));
        }
        let predicted = usize::from(p.scores[1] >= cutoff);
        cm.add(p.true_label, predicted);
    }
    Ok(cm)
}

/// Multi-class confusion matrix by argmax; ties break to the lowest index.
pub fn confusion_multiclass(preds: &[PredictionRecord], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(k);
    for p in preds {
        if p.scores.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "expected {k}-class scores, unit `{}` has {}",
                p.unit_id,
                p.scores.len()
            )));
        }
        cm.add(p.true_label, p.predicted_argmax());
    }
    Ok(cm)
}

/// Collapse a K x K matrix to the binary matrix of class `c` against the
/// rest.
pub fn one_vs_rest(cm: &ConfusionMatrix, class: usize) -> ConfusionMatrix {
    let tp = cm.get(class, class);
    let fn_ = cm.row_total(class) - tp;
    let fp = cm.col_total(class) - tp;
    let tn = cm.total() - tp - fn_ - fp;
    ConfusionMatrix::binary(tp, fn_, tn, fp)
}

/// Element-wise sum of per-fold matrices.
pub fn accumulate(cms: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let k = cms
        .first()
        .map(|c| c.k)
        .ok_or_else(|| Error::ShapeMismatch("cannot accumulate zero matrices".into()))?;
    let mut total = ConfusionMatrix::zeros(k);
    for cm in cms {
        if cm.k != k {
            return Err(Error::ShapeMismatch(format!(
                "cannot accumulate a {}x{} matrix into a {k}x{k} sum",
                cm.k, cm.k
            )));
        }
        for (slot, v) in total.counts.iter_mut().zip(&cm.counts) {
            *slot += v;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// The reported metric row. A zero denominator yields 0 and records the
/// metric name in `degenerate` instead of failing, so accumulated reports
/// survive a class that is absent from a fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub degenerate: BTreeSet<String>,
}

/// All metrics except AUC from a binary confusion matrix.
pub fn metrics_from_cm(cm: &ConfusionMatrix, cutoff: Option<f64>) -> Result<MetricReport> {
    if cm.k != 2 {
        return Err(Error::ShapeMismatch(format!(
            "metrics need a 2x2 matrix, got {}x{}",
            cm.k, cm.k
        )));
    }
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let (tp, fn_, fp, tn) = (
        cm.true_positives() as f64,
        cm.false_negatives() as f64,
        cm.false_positives() as f64,
        cm.true_negatives() as f64,
    );
    let mut degenerate = BTreeSet::new();
    let mut ratio = |name: &str, num: f64, den: f64| -> f64 {
        if den == 0.0 {
            degenerate.insert(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let precision = ratio("precision", tp, tp + fp);
    let f1 = ratio("f1", 2.0 * precision * sensitivity, precision + sensitivity);
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    Ok(MetricReport {
        sensitivity,
        specificity,
        precision,
        f1,
        accuracy,
        auc: None,
        cutoff,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from a threshold sweep over the distinct scores, with AUC by
/// trapezoidal integration. Equal to the pairwise rank statistic (ties
/// counted 1/2) up to floating-point rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Sweep thresholds over the scores of `positive_class` and integrate.
pub fn roc_auc(preds: &[PredictionRecord], positive_class: usize) -> Result<RocCurve> {
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(preds.len());
    for p in preds {
        let score = *p.scores.get(positive_class).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "unit `{}` has no score for class {positive_class}",
                p.unit_id
            ))
        })?;
        scored.push((score, p.true_label == positive_class));
    }
    let pos = scored.iter().filter(|(_, is_pos)| *is_pos).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }

    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        // Consume the whole tie group at this threshold in one step; the
        // resulting diagonal segment gives tied pairs half credit.
        let score = scored[i].0;
        let mut j = i;
        while j < scored.len() && scored[j].0 == score {
            if scored[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let prev = *points.last().expect("seeded with the origin");
        let next = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += (next.fpr - prev.fpr) * (prev.tpr + next.tpr) / 2.0;
        points.push(next);
        i = j;
    }
    Ok(RocCurve { points, auc })
}

// ---------------------------------------------------------------------------
// Published-row consistency checking
// ---------------------------------------------------------------------------

/// Result of reconstructing an integer confusion matrix from published
/// sensitivity/specificity.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub matrix: ConfusionMatrix,
    /// |TP/n_pos - sensitivity| for the chosen TP.
    pub sens_residual: f64,
    /// |TN/n_neg - specificity| for the chosen TN.
    pub spec_residual: f64,
    /// Set when a rate lands exactly between two integers; the nearest is
    /// returned with halves rounded away from zero.
    pub ambiguous: bool,
}

/// Rebuild the integer matrix behind published rates: `TP =
/// round(sensitivity * n_pos)`, `TN = round(specificity * n_neg)`.
///
/// Fails with `InfeasibleRates` when no integer matrix reproduces both rates
/// within [`RATE_TOLERANCE`], unless the miss is an exact half-integer tie,
/// which is reported via the `ambiguous` flag instead.
pub fn reconstruct_confusion(
    sensitivity: f64,
    specificity: f64,
    n_pos: u64,
    n_neg: u64,
) -> Result<Reconstruction> {
    if !(0.0..=1.0).contains(&sensitivity) || !(0.0..=1.0).contains(&specificity) {
        return Err(Error::Config(format!(
            "rates must be in [0, 1], got sensitivity {sensitivity}, specificity {specificity}"
        )));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("class counts must be positive".into()));
    }

    let half_tie = |target: f64, n: u64| ((target * n as f64).fract() - 0.5).abs() < 1e-9;
    let round_count = |target: f64, n: u64| -> u64 {
        let v = (target * n as f64).round();
        (v.max(0.0) as u64).min(n)
    };

    let tp = round_count(sensitivity, n_pos);
    let tn = round_count(specificity, n_neg);
    let sens_residual = (tp as f64 / n_pos as f64 - sensitivity).abs();
    let spec_residual = (tn as f64 / n_neg as f64 - specificity).abs();
    let ambiguous = half_tie(sensitivity, n_pos) || half_tie(specificity, n_neg);

    if !ambiguous && (sens_residual > RATE_TOLERANCE || spec_residual > RATE_TOLERANCE) {
        return Err(Error::InfeasibleRates {
            tolerance: RATE_TOLERANCE,
            sens_residual,
            spec_residual,
        });
    }
    Ok(Reconstruction {
        matrix: ConfusionMatrix::binary(tp, n_pos - tp, tn, n_neg - tn),
        sens_residual,
        spec_residual,
        ambiguous,
    })
}

// ---------------------------------------------------------------------------
// Report assembly and artifact I/O
// ---------------------------------------------------------------------------

/// Metric scopes keyed by name: `binary` for the two-class task, one scope
/// per class for the multi-class task.
pub type ScopedReports = BTreeMap<String, MetricReport>;

/// Assemble the binary-task report from pooled predictions.
pub fn binary_report(preds: &[PredictionRecord], cutoff: f64) -> Result<ScopedReports> {
    let cm = confusion_binary(preds, cutoff)?;
    let mut report = metrics_from_cm(&cm, Some(cutoff))?;
    match roc_auc(preds, 1) {
        Ok(curve) => report.auc = Some(curve.auc),
        Err(Error::DegenerateLabels) => {
            report.degenerate.insert("auc".into());
        }
        Err(e) => return Err(e),
    }
    let mut scopes = BTreeMap::new();
    scopes.insert("binary".to_string(), report);
    Ok(scopes)
}

/// Reduce multi-class predictions to the binary problem of `class` against
/// the rest, scored by that class's softmax output.
pub fn one_vs_rest_predictions(preds: &[PredictionRecord], class: usize) -> Vec<PredictionRecord> {
    preds
        .iter()
        .map(|p| PredictionRecord {
            unit_id: p.unit_id.clone(),
            fold: p.fold,
            true_label: usize::from(p.true_label == class),
            scores: vec![1.0 - p.scores[class], p.scores[class]],
        })
        .collect()
}

/// Assemble per-class one-vs-rest reports from pooled multi-class
/// predictions. The accuracy column repeats the overall multi-class accuracy
/// for every class; per-class AUC uses that class's softmax score.
pub fn multiclass_report(
    preds: &[PredictionRecord],
    class_names: &[&str],
    cutoff: f64,
) -> Result<ScopedReports> {
    let k = class_names.len();
    let cm = confusion_multiclass(preds, k)?;
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let diag: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let overall_accuracy = diag as f64 / cm.total() as f64;
    let mut scopes = BTreeMap::new();
    for (c, name) in class_names.iter().enumerate() {
        let binary = one_vs_rest(&cm, c);
        let mut report = metrics_from_cm(&binary, Some(cutoff))?;
        report.accuracy = overall_accuracy;
        match roc_auc(&one_vs_rest_predictions(preds, c), 1) {
            Ok(curve) => report.auc = Some(curve.auc),
            Err(Error::DegenerateLabels) => {
                report.degenerate.insert("auc".into());
            }
            Err(e) => return Err(e),
        }
        scopes.insert(name.to_string(), report);
    }
    Ok(scopes)
}

pub fn write_metrics_json(scopes: &ScopedReports, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(scopes).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<ScopedReports> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_predictions_csv(preds: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let c = preds.first().map(|p| p.scores.len()).unwrap_or(0);
    let mut header = vec!["id".to_string(), "fold".to_string(), "true_label".to_string()];
    for i in 0..c {
        header.push(format!("score_{i}"));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for p in preds {
        let mut row = vec![p.unit_id.clone(), p.fold.to_string(), p.true_label.to_string()];
        for s in &p.scores {
            row.push(s.to_string());
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        if record.len() < 4 {
            return Err(Error::schema(
                "predictions.csv",
                format!("row with {} fields, expected at least 4", record.len()),
            ));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::schema("predictions.csv", format!("bad float `{s}`: {e}")))
        };
        let fold = record[1]
            .parse::<usize>()
            .map_err(|e| Error::schema("predictions.csv", format!("bad fold: {e}")))?;
        let true_label = record[2]
            .parse::<usize>()
            .map_err(|e| Error::schema("predictions.csv", format!("bad label: {e}")))?;
        let mut scores = Vec::with_capacity(record.len() - 3);
        for i in 3..record.len() {
            scores.push(parse_f(&record[i])?);
        }
        out.push(PredictionRecord {
            unit_id: record[0].to_string(),
            fold,
            true_label,
            scores,
        });
    }
    Ok(out)
}
