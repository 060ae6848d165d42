//! One-vs-rest ROC and precision-recall evaluation.
//!
//! Curves sweep thresholds over the distinct scores in descending order;
//! samples with identical scores enter together. ROC area uses the
//! trapezoidal rule, which with grouped ties equals the tie-corrected
//! Mann-Whitney statistic. PR area is step-wise average precision,
//! `Σ (R_k - R_{k-1}) · P_k`, with no interpolation between points.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Threshold reached at each point after the origin.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` per distinct threshold, recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Cumulative (tp, fp, threshold) after each tie group, scores descending.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<(usize, usize, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::dim("curve", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Degenerate(format!("score {bad} is not comparable")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp, threshold));
    }
    Ok(out)
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(format!(
            "ROC needs both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    let steps = sweep(scores, labels)?;
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = Vec::with_capacity(steps.len() + 1);
    points.push((0.0, 0.0));
    let mut thresholds = Vec::with_capacity(steps.len());
    for &(tp, fp, t) in &steps {
        points.push((fp as f64 / n, tp as f64 / p));
        thresholds.push(t);
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Degenerate("precision-recall needs at least one positive".into()));
    }
    let steps = sweep(scores, labels)?;
    let p = positives as f64;
    let mut points = Vec::with_capacity(steps.len());
    let mut thresholds = Vec::with_capacity(steps.len());
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for &(tp, fp, t) in &steps {
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
        thresholds.push(t);
    }
    Ok(PrCurve {
        points,
        thresholds,
        auc,
    })
}

/// True class plus predicted probabilities over all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub positives: usize,
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub macro_auc_roc: f64,
    pub macro_auc_pr: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Tab-separated `class auc_roc auc_pr positives`, ending in a `macro` row.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("class\tauc_roc\tauc_pr\tpositives\n");
        for c in &self.classes {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}", c.name, c.auc_roc, c.auc_pr, c.positives);
        }
        let _ = writeln!(
            out,
            "macro\t{:.6}\t{:.6}\t{}",
            self.macro_auc_roc, self.macro_auc_pr, self.n_samples
        );
        out
    }
}

pub fn one_vs_rest_report(samples: &[ScoredSample], class_names: &[String]) -> Result<EvalReport> {
    let k = class_names.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least two classes, got {k}")));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.probs.len() != k {
            return Err(Error::dim("scored sample", &[s.probs.len()], &[k]));
        }
        if s.label >= k {
            return Err(Error::Index {
                what: "class labels",
                index: s.label,
                len: k,
            });
        }
        let total: f64 = s.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "sample {i}: probabilities sum to {total}, not 1"
            )));
        }
    }
    let mut classes = Vec::with_capacity(k);
    for (class, name) in class_names.iter().enumerate() {
        let labels: Vec<bool> = samples.iter().map(|s| s.label == class).collect();
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 {
            return Err(Error::Degenerate(format!("class {name:?} has no samples")));
        }
        let scores: Vec<f64> = samples.iter().map(|s| s.probs[class]).collect();
        let roc = roc_curve(&scores, &labels)?;
        let pr = pr_curve(&scores, &labels)?;
        classes.push(ClassReport {
            name: name.clone(),
            auc_roc: roc.auc,
            auc_pr: pr.auc,
            positives,
            roc: roc.points,
            pr: pr.points,
        });
    }
    let macro_auc_roc = classes.iter().map(|c| c.auc_roc).sum::<f64>() / k as f64;
    let macro_auc_pr = classes.iter().map(|c| c.auc_pr).sum::<f64>() / k as f64;
    Ok(EvalReport {
        classes,
        macro_auc_roc,
        macro_auc_pr,
        n_samples: samples.len(),
    })
}
