//! Classifier metrics and annotator agreement.

mod kappa;
mod roc;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use kappa::{
    fleiss_kappa, human_eval_report, read_annotation_matrix, AnnotationMatrix, HumanEvalReport,
};
pub use roc::{point_metrics, roc_and_auc, PointMetrics, RocCurve, RocPoint};

use crate::error::{Error, Result};

/// Decision threshold for accuracy, precision, recall and F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub roc: RocCurve,
    pub threshold: f64,
    pub point: PointMetrics,
}

impl EvalReport {
    pub fn auc(&self) -> f64 {
        self.roc.auc
    }

    /// `name value` lines.
    pub fn to_text(&self) -> String {
        let p = &self.point;
        let mut out = String::new();
        for (name, value) in [
            ("auc", self.roc.auc.to_string()),
            ("accuracy", p.accuracy.to_string()),
            ("precision", p.precision.to_string()),
            ("recall", p.recall.to_string()),
            ("f1", p.f1.to_string()),
            ("threshold", self.threshold.to_string()),
            ("positives", self.roc.positives.to_string()),
            ("negatives", self.roc.negatives.to_string()),
            ("true_positives", p.true_positives.to_string()),
            ("false_positives", p.false_positives.to_string()),
            ("true_negatives", p.true_negatives.to_string()),
            ("false_negatives", p.false_negatives.to_string()),
        ] {
            writeln!(out, "{name} {value}").expect("writing to a String");
        }
        out
    }
}

/// ROC curve and point metrics at `threshold`.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        roc: roc_and_auc(scores, labels)?,
        threshold,
        point: point_metrics(scores, labels, threshold)?,
    })
}

/// Tab-separated `threshold fpr tpr` table with a header row.
pub fn roc_table(curve: &RocCurve) -> String {
    let mut out = String::from("threshold\tfpr\ttpr\n");
    for p in &curve.points {
        writeln!(out, "{}\t{}\t{}", p.threshold, p.fpr, p.tpr).expect("writing to a String");
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// One score per line; blank lines and `#` comments are skipped.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_lines(path.as_ref())?
        .into_iter()
        .map(|(n, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(n, format!("`{l}` is not a finite number")))
        })
        .collect()
}

/// One label per line: `1`/`0` or `true`/`false`.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    read_lines(path.as_ref())?
        .into_iter()
        .map(|(n, l)| match l.as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(Error::parse(n, format!("`{l}` is not a label (0/1/true/false)"))),
        })
        .collect()
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
