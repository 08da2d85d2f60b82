//! Classification metrics over predicted class probabilities.
//!
//! A class absent from the true labels has undefined recall, F1 and AUC;
//! those fields are `None` and the class is left out of macro and weighted
//! means.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    /// Equal to recall: the fraction of this class predicted correctly.
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub kappa: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub weighted_avg: Aggregate,
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Cohen's kappa. When chance agreement is total (`p_e == 1`) the statistic
/// is undefined and 0 is returned.
pub fn cohen_kappa(confusion: &[Vec<usize>]) -> f64 {
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let c = confusion.len();
    let p_o = (0..c).map(|i| confusion[i][i]).sum::<usize>() as f64 / n;
    let p_e = (0..c)
        .map(|k| {
            let row: usize = confusion[k].iter().sum();
            let col: usize = confusion.iter().map(|r| r[k]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < f64::EPSILON {
        return 0.0;
    }
    (p_o - p_e) / (1.0 - p_e)
}

/// Area under the ROC curve by the trapezoid rule. Tied scores contribute
/// half. `None` if either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (pos as f64 * neg as f64))
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Computes every metric from labels and `[N][C]` probabilities.
pub fn compute_metrics(y_true: &[usize], y_prob: &[Vec<f64>]) -> Result<MetricsReport> {
    if y_true.is_empty() {
        return Err(Error::Data("cannot compute metrics on zero samples".into()));
    }
    if y_true.len() != y_prob.len() {
        return Err(Error::Data(format!(
            "{} labels but {} probability rows",
            y_true.len(),
            y_prob.len()
        )));
    }
    let c = y_prob[0].len();
    if c < 2 || y_prob.iter().any(|r| r.len() != c) {
        return Err(Error::Data("probability rows must share a width of at least 2".into()));
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let n = y_true.len();
    let y_pred: Vec<usize> = y_prob.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_matrix(y_true, &y_pred, c);
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();

    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[k]).sum();
        let recall = ratio(tp, support);
        let precision = ratio(tp, predicted).or((support > 0).then_some(0.0));
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let scores: Vec<f64> = y_prob.iter().map(|r| r[k]).collect();
        let positive: Vec<bool> = y_true.iter().map(|&t| t == k).collect();
        let auc = binary_auc(&scores, &positive);
        if support == 0 {
            log::warn!("class {k} has no samples; recall, F1 and AUC are undefined");
        }
        per_class.push(ClassMetrics {
            class: k,
            support,
            accuracy: recall,
            precision,
            recall,
            f1,
            auc,
        });
    }

    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let mean = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        let vals: Vec<f64> = present.iter().filter_map(|m| f(m)).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let weighted = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        let (mut s, mut w) = (0.0, 0.0);
        for m in &present {
            if let Some(v) = f(m) {
                s += v * m.support as f64;
                w += m.support as f64;
            }
        }
        if w > 0.0 {
            s / w
        } else {
            0.0
        }
    };
    let macro_avg = Aggregate {
        precision: mean(&|m| m.precision),
        recall: mean(&|m| m.recall),
        f1: mean(&|m| m.f1),
        auc: mean(&|m| m.auc),
    };
    let weighted_avg = Aggregate {
        precision: weighted(&|m| m.precision),
        recall: weighted(&|m| m.recall),
        f1: weighted(&|m| m.f1),
        auc: weighted(&|m| m.auc),
    };

    Ok(MetricsReport {
        num_samples: n,
        accuracy: correct as f64 / n as f64,
        kappa: cohen_kappa(&confusion),
        confusion,
        per_class,
        macro_avg,
        weighted_avg,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl MetricsReport {
    /// Per-class table with macro and weighted rows, values in percent. The
    /// macro row's accuracy column is the overall accuracy.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}",
            "class", "acc", "prec", "rec", "f1", "auc", "support"
        );
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}",
                m.class,
                pct(m.accuracy),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                pct(m.auc),
                m.support
            );
        }
        for (label, acc, a) in [
            ("macro", Some(self.accuracy), &self.macro_avg),
            ("weighted", None, &self.weighted_avg),
        ] {
            let _ = writeln!(
                out,
                "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}",
                label,
                pct(acc),
                pct(Some(a.precision)),
                pct(Some(a.recall)),
                pct(Some(a.f1)),
                pct(Some(a.auc)),
                self.num_samples
            );
        }
        let _ = writeln!(out, "kappa {:.4}", self.kappa);
        out
    }
}
