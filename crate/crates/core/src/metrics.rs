//! Binary confusion statistics and ROC-AUC.

use std::fmt::Write as _;

use crate::data::Label;
use crate::error::{Error, Result};

pub const POSITIVE_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts outcomes with `positive` as the positive class; every other index
/// is negative.
pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    positive: usize,
) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "confusion",
            format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("confusion input".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Ratio metrics; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn summary(c: &ConfusionCounts) -> Summary {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    Summary {
        sensitivity,
        // Standard true-negative rate.
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: sensitivity,
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

fn check_scores(scores: &[f32], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc", "scores contain NaN"));
    }
    Ok(())
}

/// Scores sorted descending with labels alongside, then split into groups of
/// tied scores as `(positives, negatives)` counts.
fn tie_groups(scores: &[f32], labels: &[usize], positive: usize) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f32> = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] == positive {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auc(scores: &[f32], labels: &[usize], positive: usize) -> Result<Option<f64>> {
    check_scores(scores, labels)?;
    let groups = tie_groups(scores, labels, positive);
    let (pos, neg) = groups.iter().fold((0, 0), |a, g| (a.0 + g.0, a.1 + g.1));
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    // Twice the Mann-Whitney U, kept as an integer.
    let mut doubled = 0u64;
    let mut neg_below: u64 = neg;
    for &(p, n) in &groups {
        neg_below -= n;
        doubled += p * (2 * neg_below + n);
    }
    Ok(Some(doubled as f64 / (2 * pos * neg) as f64))
}

/// Trapezoidal area under the ROC curve traced through every distinct
/// threshold. Accumulated in integers so it agrees exactly with [`auc`].
pub fn auc_trapezoid(scores: &[f32], labels: &[usize], positive: usize) -> Result<Option<f64>> {
    check_scores(scores, labels)?;
    let groups = tie_groups(scores, labels, positive);
    let (pos, neg) = groups.iter().fold((0, 0), |a, g| (a.0 + g.0, a.1 + g.1));
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let (mut tp, mut fp, mut doubled_area) = (0u64, 0u64, 0u64);
    for &(p, n) in &groups {
        let (tp_next, fp_next) = (tp + p, fp + n);
        doubled_area += (fp_next - fp) * (tp_next + tp);
        tp = tp_next;
        fp = fp_next;
    }
    Ok(Some(doubled_area as f64 / (2 * pos * neg) as f64))
}

/// A full report for one evaluated split.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub split: String,
    pub counts: ConfusionCounts,
    pub summary: Summary,
    pub auc: Option<f64>,
}

impl Report {
    pub fn new(
        split: impl Into<String>,
        predictions: &[usize],
        labels: &[usize],
        positive_scores: &[f32],
    ) -> Result<Self> {
        let counts = confusion(predictions, labels, Label::Covid.index())?;
        Ok(Report {
            split: split.into(),
            summary: summary(&counts),
            auc: auc(positive_scores, labels, Label::Covid.index())?,
            counts,
        })
    }

    /// `(name, value)` in display column order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 6] {
        let s = &self.summary;
        [
            ("sensitivity", s.sensitivity),
            ("specificity", s.specificity),
            ("precision", s.precision),
            ("recall", s.recall),
            ("accuracy", s.accuracy),
            ("auc", self.auc),
        ]
    }

    /// `metric,value` rows at full precision; undefined metrics are left
    /// empty. Counts are appended after the ratio metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, value) in self.columns() {
            let _ = writeln!(
                out,
                "{name},{}",
                value.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        let c = &self.counts;
        for (name, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }
}

/// Table with one row per report, values at 2 decimals and `-` for
/// undefined metrics.
pub fn format_table(reports: &[Report]) -> String {
    let mut out = format!(
        "{:<12}{:>7}{:>7}{:>7}{:>7}{:>7}{:>7}\n",
        "split", "Sens", "Spec", "Prec", "Rec", "Acc", "AUC"
    );
    for r in reports {
        let _ = write!(out, "{:<12}", r.split);
        for (_, v) in r.columns() {
            match v {
                Some(v) => {
                    let _ = write!(out, "{v:>7.2}");
                }
                None => {
                    let _ = write!(out, "{:>7}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Parses the output of [`Report::to_csv`] back into `(metric, value)` pairs.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::invalid("metrics csv", "missing metric,value header"));
    }
    lines
        .map(|line| {
            let (name, value) = line
                .split_once(',')
                .ok_or_else(|| Error::invalid("metrics csv", format!("bad row {line:?}")))?;
            let value = if value.is_empty() {
                None
            } else {
                Some(value.parse::<f64>().map_err(|e| {
                    Error::invalid("metrics csv", format!("bad value in {line:?}: {e}"))
                })?)
            };
            Ok((name.to_string(), value))
        })
        .collect()
}
