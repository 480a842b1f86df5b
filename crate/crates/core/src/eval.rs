//! Precision, recall and F1 for the abnormal class, overall and per
//! diagnosis class.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::wfdb::{DiagnosisLabel, CLASS_TABLE, HEALTHY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Derive precision, recall and F1 from counts; each is 0 when its
    /// denominator is 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// tn / (tn + fp), 0 when there are no negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

/// Counts with abnormal (`true`) as the positive class.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class_name: String,
    pub n: usize,
    /// Recall as abnormal for disease classes, specificity for healthy.
    pub rate: f64,
    /// F1 over this class's frames together with every healthy frame.
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationReport {
    pub overall: Metrics,
    /// Classes present in the test set, in vocabulary order.
    pub rows: Vec<ClassRow>,
}

/// Overall and per-class scores. Every label must be healthy or a known
/// disease class.
pub fn generalization_report(predictions: &[bool], labels: &[DiagnosisLabel]) -> Result<GeneralizationReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|l| l.is_unknown()) {
        return Err(Error::InvalidConfig(format!("label {:?} is outside the class vocabulary", l.class_name)));
    }
    let truth: Vec<bool> = labels.iter().map(|l| !l.is_healthy).collect();
    let overall = f1_score(predictions, &truth)?;

    let healthy: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_healthy).collect();
    let mut rows = Vec::new();
    for (name, _, _) in CLASS_TABLE {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].class_name == name).collect();
        if members.is_empty() {
            continue;
        }
        let scope: Vec<usize> = if name == HEALTHY {
            members.clone()
        } else {
            members.iter().chain(&healthy).copied().collect()
        };
        let p: Vec<bool> = scope.iter().map(|&i| predictions[i]).collect();
        let t: Vec<bool> = scope.iter().map(|&i| truth[i]).collect();
        let metrics = f1_score(&p, &t)?;
        let rate = if name == HEALTHY { metrics.specificity() } else { metrics.recall };
        rows.push(ClassRow {
            class_name: name.to_string(),
            n: members.len(),
            rate,
            metrics,
        });
    }
    Ok(GeneralizationReport { overall, rows })
}

/// Record-level scores: each record is predicted abnormal when at least
/// half of its frames are.
pub fn patient_level_report(predictions: &[bool], labels: &[DiagnosisLabel], record_ids: &[usize]) -> Result<GeneralizationReport> {
    if predictions.len() != labels.len() || record_ids.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut records: Vec<(usize, usize, usize, DiagnosisLabel)> = Vec::new();
    for ((&p, l), &r) in predictions.iter().zip(labels).zip(record_ids) {
        match records.iter_mut().find(|e| e.0 == r) {
            Some(e) => {
                e.1 += usize::from(p);
                e.2 += 1;
            }
            None => records.push((r, usize::from(p), 1, l.clone())),
        }
    }
    records.sort_by_key(|e| e.0);
    let votes: Vec<bool> = records.iter().map(|e| 2 * e.1 >= e.2).collect();
    let rec_labels: Vec<DiagnosisLabel> = records.into_iter().map(|e| e.3).collect();
    generalization_report(&votes, &rec_labels)
}

const COLUMNS: [&str; 9] = ["class", "n", "rate", "precision", "recall", "f1", "tp", "fp", "fn"];

impl GeneralizationReport {
    fn lines(&self) -> Vec<(String, usize, f64, Metrics)> {
        let mut v = vec![("overall".to_string(), self.overall.total(), self.overall.recall, self.overall)];
        v.extend(self.rows.iter().map(|r| (r.class_name.clone(), r.n, r.rate, r.metrics)));
        v
    }

    /// Tab-separated, one row per class after an `overall` row.
    pub fn to_tsv(&self) -> String {
        let mut out = COLUMNS.join("\t");
        out.push_str("\ttn\n");
        for (name, n, rate, m) in self.lines() {
            let _ = writeln!(
                out,
                "{name}\t{n}\t{rate:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, m.tn
            );
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let lines = self.lines();
        let width = lines.iter().map(|l| l.0.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "class", "n", "rate", "f1");
        for (name, n, rate, m) in lines {
            let _ = writeln!(out, "{name:<width$}  {n:>6}  {rate:>6.3}  {:>6.3}", m.f1);
        }
        out
    }

    pub fn row(&self, class_name: &str) -> Option<&ClassRow> {
        self.rows.iter().find(|r| r.class_name == class_name)
    }
}
