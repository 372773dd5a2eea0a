//! Binary classification metrics, ROC curves and AUC.
//!
//! Label 1 is the positive class; scores are positive-class probabilities.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Ratio metrics derived from a confusion matrix.
///
/// A ratio with a zero denominator is reported as 0 and its name listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
    pub roc_points: Vec<(f64, f64)>,
    #[serde(default)]
    pub undefined: Vec<String>,
}

/// Column order used in result tables.
pub const METRIC_NAMES: [&str; 6] = ["acc", "auc", "f1", "precision", "sensitivity", "specificity"];

impl MetricsReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "acc" => self.acc,
            "auc" => self.auc,
            "f1" => self.f1,
            "precision" => self.precision,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            _ => return None,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        METRIC_NAMES.map(|m| self.metric(m).expect("known metric"))
    }
}

fn check_inputs(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::validation("no samples to score"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::validation(format!("score {s} lies outside [0, 1]")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::validation(format!("label {l} is not binary")));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[usize], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn compute_metrics(scores: &[f64], labels: &[usize], threshold: f64) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let c = confusion(scores, labels, threshold);
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let acc = ratio("acc", c.tp + c.tn, c.total());
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let sensitivity = ratio("sensitivity", c.tp, c.tp + c.fn_);
    let specificity = ratio("specificity", c.tn, c.tn + c.fp);
    // 2PR/(P+R) = 2tp/(2tp+fp+fn)
    let f1 = ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let (auc, roc_points) = match roc_curve(scores, labels) {
        Ok(points) => (trapezoid(&points), points),
        Err(Error::UndefinedAuc) => {
            undefined.push("auc".into());
            (0.0, vec![(0.0, 0.0), (1.0, 1.0)])
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        acc,
        auc,
        f1,
        precision,
        sensitivity,
        specificity,
        confusion: c,
        roc_points,
        undefined,
    })
}

fn class_counts(labels: &[usize]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score threshold,
/// with interior points on a straight segment dropped.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Integer (fp, tp) vertices keep the collinearity test exact.
    let mut vertices: Vec<(usize, usize)> = vec![(0, 0)];
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let v = (fp, tp);
        if vertices.len() >= 2 {
            let (a, b) = (vertices[vertices.len() - 2], vertices[vertices.len() - 1]);
            let cross = (b.0 as i64 - a.0 as i64) * (v.1 as i64 - a.1 as i64)
                - (b.1 as i64 - a.1 as i64) * (v.0 as i64 - a.0 as i64);
            if cross == 0 {
                vertices.pop();
            }
        }
        vertices.push(v);
    }
    Ok(vertices
        .into_iter()
        .map(|(f, t)| (f as f64 / neg as f64, t as f64 / pos as f64))
        .collect())
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Trapezoidal area under the ROC curve; tied scores contribute a diagonal segment.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(trapezoid(&roc_curve(scores, labels)?))
}

/// `U / (n₊·n₋)` from average ranks.
pub fn auc_mann_whitney(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let ranks = crate::stats::average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct RocRow {
    model_name: String,
    fpr: f64,
    tpr: f64,
}

/// Named ROC curves as CSV with columns `model_name,fpr,tpr`.
pub fn roc_csv(curves: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::validation("no ROC curves to export"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (name, points) in curves {
        for &(fpr, tpr) in points {
            w.serialize(RocRow {
                model_name: name.clone(),
                fpr,
                tpr,
            })
            .map_err(|e| Error::Malformed(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn export_roc(curves: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let text = roc_csv(curves)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `model_name,fpr,tpr` CSV, keeping models in first-seen order.
pub fn parse_roc_csv(text: &str) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<RocRow>() {
        let row = row.map_err(|e| Error::Malformed(e.to_string()))?;
        match out.iter_mut().find(|(n, _)| *n == row.model_name) {
            Some((_, pts)) => pts.push((row.fpr, row.tpr)),
            None => out.push((row.model_name, vec![(row.fpr, row.tpr)])),
        }
    }
    Ok(out)
}
