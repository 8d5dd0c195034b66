//! Classification reports for predicted metadata (sex, field).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Square count matrix, `counts[gold][pred]`, over a sorted label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("confusion matrix needs at least one label"));
        }
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::invalid("confusion matrix must be square and match its labels"));
        }
        if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
            return Err(Error::invalid("confusion matrix labels must be distinct"));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn count(&self, gold: &str, pred: &str) -> Option<u64> {
        let g = self.index(gold)?;
        let p = self.index(pred)?;
        Some(self.counts[g][p])
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Builds the matrix over the union of observed labels plus `extra_labels`
/// (so classes that never occur still get a row).
pub fn confusion_with_labels<S: AsRef<str>>(
    predictions: &[S],
    gold: &[S],
    extra_labels: &[S],
) -> Result<ConfusionMatrix> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let labels: Vec<String> = predictions
        .iter()
        .chain(gold)
        .chain(extra_labels)
        .map(|s| s.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    let pos = |s: &str| labels.binary_search_by(|l| l.as_str().cmp(s)).expect("label collected");
    for (p, g) in predictions.iter().zip(gold) {
        counts[pos(g.as_ref())][pos(p.as_ref())] += 1;
    }
    ConfusionMatrix::from_counts(labels, counts)
}

pub fn confusion<S: AsRef<str>>(predictions: &[S], gold: &[S]) -> Result<ConfusionMatrix> {
    confusion_with_labels(predictions, gold, &[])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// True when some metric had a zero denominator and was set to 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassRow>,
    pub accuracy: f64,
    pub macro_avg: ClassRow,
    pub weighted_avg: ClassRow,
    pub total_support: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report(matrix: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let k = matrix.labels.len();
    let c = &matrix.counts;
    let classes: Vec<ClassRow> = (0..k)
        .map(|i| {
            let tp = c[i][i];
            let predicted: u64 = (0..k).map(|g| c[g][i]).sum();
            let support: u64 = c[i].iter().sum();
            let (precision, zp) = ratio(tp, predicted);
            let (recall, zr) = ratio(tp, support);
            ClassRow {
                label: matrix.labels[i].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
                zero_division: zp || zr,
            }
        })
        .collect();
    let trace: u64 = (0..k).map(|i| c[i][i]).sum();
    let avg = |label: &str, weight: &dyn Fn(&ClassRow) -> f64| {
        let wsum: f64 = classes.iter().map(weight).sum();
        let mean = |f: fn(&ClassRow) -> f64| classes.iter().map(|r| weight(r) * f(r)).sum::<f64>() / wsum;
        ClassRow {
            label: label.to_string(),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            support: total,
            zero_division: classes.iter().any(|r| r.zero_division),
        }
    };
    let macro_avg = avg("macro avg", &|_| 1.0);
    let weighted_avg = avg("weighted avg", &|r| r.support as f64);
    Ok(ClassificationReport {
        accuracy: trace as f64 / total as f64,
        classes,
        macro_avg,
        weighted_avg,
        total_support: total,
    })
}

impl ClassificationReport {
    /// Fixed-width table with two decimals.
    pub fn render_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|r| r.label.len())
            .chain([12])
            .max()
            .unwrap_or(12);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support");
        let row = |out: &mut String, r: &ClassRow| {
            let _ = writeln!(
                out,
                "{:<width$} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                r.label, r.precision, r.recall, r.f1, r.support
            );
        };
        for r in &self.classes {
            row(&mut out, r);
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<width$} {:>9} {:>9} {:>9.2} {:>9}",
            "accuracy", "", "", self.accuracy, self.total_support
        );
        row(&mut out, &self.macro_avg);
        row(&mut out, &self.weighted_avg);
        out
    }

    /// Rows: one per class, then `accuracy`, `macro avg`, `weighted avg`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "precision", "recall", "f1", "support"])?;
        let rec = |r: &ClassRow| {
            [
                r.label.clone(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.support.to_string(),
            ]
        };
        for r in &self.classes {
            w.write_record(rec(r))?;
        }
        w.write_record([
            "accuracy".to_string(),
            String::new(),
            String::new(),
            self.accuracy.to_string(),
            self.total_support.to_string(),
        ])?;
        w.write_record(rec(&self.macro_avg))?;
        w.write_record(rec(&self.weighted_avg))?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
