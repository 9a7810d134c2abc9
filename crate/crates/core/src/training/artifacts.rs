//! Run-directory layout: `run.json`, per-fold curves/predictions/checkpoints,
//! and `metrics.json`. A run directory is self-describing; reporting needs no
//! state beyond it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ExcludedSubject;
use crate::error::{Error, Result};
use crate::evaluation::{write_metrics_json, write_predictions_csv, ScopedReports};
use crate::folds::FoldPlan;

use super::{CvOutcome, RunConfig};

/// Contents of `run.json`: the resolved configuration plus everything the
/// run derived from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunJson {
    pub config: RunConfig,
    pub fold_plan: FoldPlan,
    pub excluded: Vec<ExcludedSubject>,
}

/// Write the complete run directory.
pub fn write_run_dir(cfg: &RunConfig, outcome: &CvOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let run_json = RunJson {
        config: cfg.clone(),
        fold_plan: outcome.plan.clone(),
        excluded: outcome.excluded.clone(),
    };
    let run_path = out_dir.join("run.json");
    let text = serde_json::to_string_pretty(&run_json).map_err(|e| Error::json(&run_path, e))?;
    std::fs::write(&run_path, text).map_err(|e| Error::io(&run_path, e))?;

    for fold in &outcome.folds {
        let fold_dir = out_dir.join("folds").join(fold.fold.to_string());
        std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        fold.curve.write_csv(&fold_dir.join("curve.csv"))?;
        write_predictions_csv(&fold.predictions, &fold_dir.join("predictions.csv"))?;
        fold.model.save_checkpoint(&fold_dir)?;
    }

    write_metrics_json(&outcome.scopes, &out_dir.join("metrics.json"))
}

/// Metric columns in the reported order.
pub const METRIC_COLUMNS: [&str; 6] = [
    "Sensitivity",
    "Specificity",
    "Precision",
    "F1-Score",
    "AUC",
    "Accuracy",
];

fn metric_values(report: &crate::evaluation::MetricReport) -> [f64; 6] {
    [
        report.sensitivity,
        report.specificity,
        report.precision,
        report.f1,
        report.auc.unwrap_or(f64::NAN),
        report.accuracy,
    ]
}

/// Render the scoped metrics as a fixed-width text table with the six
/// metric columns in the reported order.
pub fn metrics_table(scopes: &ScopedReports) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12}", "Scope"));
    for col in METRIC_COLUMNS {
        out.push_str(&format!("{col:>13}"));
    }
    out.push('\n');
    for (scope, report) in scopes {
        out.push_str(&format!("{scope:<12}"));
        for v in metric_values(report) {
            if v.is_nan() {
                out.push_str(&format!("{:>13}", "-"));
            } else {
                out.push_str(&format!("{v:>13.3}"));
            }
        }
        out.push('\n');
    }
    out
}

/// One row of the variant-comparison radar data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadarRow {
    pub metric: String,
    pub variant: String,
    pub value: f64,
}

/// Flatten one run's scoped reports into radar rows labelled with the
/// variant name.
pub fn radar_rows(scopes: &ScopedReports, variant: &str) -> Vec<RadarRow> {
    let mut rows = Vec::new();
    for (scope, report) in scopes {
        let prefix = if scopes.len() > 1 {
            format!("{scope}/")
        } else {
            String::new()
        };
        for (name, value) in METRIC_COLUMNS.iter().zip(metric_values(report)) {
            if value.is_nan() {
                continue;
            }
            rows.push(RadarRow {
                metric: format!("{prefix}{name}"),
                variant: variant.to_string(),
                value,
            });
        }
    }
    rows
}

pub fn write_radar_csv(rows: &[RadarRow], path: &Path) -> Result<()> {
    let mut out = String::from("metric,variant,value\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.metric, row.variant, row.value));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::MetricReport;
    use std::collections::BTreeMap;

    fn report(s: f64) -> MetricReport {
        MetricReport {
            sensitivity: s,
            specificity: 0.785,
            precision: 0.723,
            f1: 0.705,
            accuracy: 0.741,
            auc: Some(0.837),
            cutoff: Some(0.5),
            degenerate: Default::default(),
        }
    }

    #[test]
    fn table_has_columns_in_reported_order() {
        let mut scopes = BTreeMap::new();
        scopes.insert("binary".to_string(), report(0.687));
        let table = metrics_table(&scopes);
        let header = table.lines().next().unwrap();
        let mut last = 0;
        for col in METRIC_COLUMNS {
            let pos = header.find(col).unwrap_or_else(|| panic!("missing {col}"));
            assert!(pos > last, "column {col} out of order");
            last = pos;
        }
        assert!(table.contains("0.687"));
        assert!(table.contains("0.837"));
    }

    #[test]
    fn radar_rows_cover_both_variants() {
        let mut scopes = BTreeMap::new();
        scopes.insert("binary".to_string(), report(0.7));
        let mut rows = radar_rows(&scopes, "multi-view");
        rows.extend(radar_rows(&scopes, "single-view"));
        assert_eq!(rows.len(), 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("radar.csv");
        write_radar_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("metric,variant,value\n"));
        assert_eq!(text.lines().count(), 13);
    }
}
