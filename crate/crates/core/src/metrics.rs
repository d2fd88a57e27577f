//! Binary classification metrics and threshold sweeps.
//!
//! "Positive" means defective. A metric whose denominator is zero is
//! reported as `None` and rendered as `undefined`, never coerced to 0 or 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [50.0, 100.0, 150.0, 200.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    /// Tallies `(predicted_defective, actually_defective)` pairs.
    pub fn tally(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (pred, truth) in outcomes {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub selectivity: Option<f64>,
    pub accuracy: Option<f64>,
    pub f_score: Option<f64>,
}

impl Metrics {
    pub fn any_undefined(&self) -> bool {
        [self.recall, self.precision, self.selectivity, self.accuracy, self.f_score]
            .iter()
            .any(Option::is_none)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let recall = ratio(c.tp, c.positives());
    let precision = ratio(c.tp, c.tp + c.fp);
    let f_score = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics {
        recall,
        precision,
        selectivity: ratio(c.tn, c.negatives()),
        accuracy: ratio(c.tp + c.tn, c.total()),
        f_score,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Threshold with the highest accuracy (first one on ties).
    pub best_threshold: Option<f64>,
    pub best_accuracy: Option<f64>,
}

/// One row per threshold with verdict `score > threshold`.
pub fn sweep_thresholds(scores: &[(f64, bool)], thresholds: &[f64]) -> Result<SweepTable> {
    sweep_thresholds_scaled(scores, thresholds, 1.0)
}

/// As [`sweep_thresholds`] with verdict `score > threshold * scale`; rows
/// keep the unscaled threshold.
pub fn sweep_thresholds_scaled(scores: &[(f64, bool)], thresholds: &[f64], scale: f64) -> Result<SweepTable> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("no scores to sweep".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold list is empty".into()));
    }
    let rows: Vec<SweepRow> = thresholds
        .iter()
        .map(|&t| {
            let counts = ConfusionCounts::tally(scores.iter().map(|&(s, truth)| (s > t * scale, truth)));
            SweepRow {
                threshold: t,
                counts,
                metrics: metrics(&counts),
            }
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for r in &rows {
        if let Some(a) = r.metrics.accuracy {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((r.threshold, a));
            }
        }
    }
    Ok(SweepTable {
        best_threshold: best.map(|b| b.0),
        best_accuracy: best.map(|b| b.1),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

fn cell(v: Option<f64>, digits: Option<usize>) -> String {
    match (v, digits) {
        (None, _) => "undefined".into(),
        (Some(v), None) => v.to_string(),
        (Some(v), Some(d)) => format!("{v:.d$}"),
    }
}

pub fn emit_table(table: &SweepTable, format: TableFormat) -> Result<String> {
    let columns = |m: &Metrics| [m.recall, m.precision, m.selectivity, m.accuracy, m.f_score];
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("threshold,recall,precision,selectivity,accuracy,f_score\n");
            for r in &table.rows {
                let cells: Vec<String> = columns(&r.metrics).iter().map(|&v| cell(v, None)).collect();
                let _ = writeln!(out, "{},{}", r.threshold, cells.join(","));
            }
        }
        TableFormat::Json => {
            out = serde_json::to_string_pretty(table)?;
            out.push('\n');
        }
        TableFormat::Markdown => {
            out.push_str("| Threshold | Recall | Precision | Selectivity | Accuracy | F-score |\n");
            out.push_str("|---:|---:|---:|---:|---:|---:|\n");
            for r in &table.rows {
                let cells: Vec<String> = columns(&r.metrics).iter().map(|&v| cell(v, Some(3))).collect();
                let _ = writeln!(out, "| {} | {} |", r.threshold, cells.join(" | "));
            }
        }
    }
    Ok(out)
}
