//! Per-class and support-weighted AUROC / F1, and cross-fold aggregation.

use serde::{Deserialize, Serialize};

use crate::data::{LABEL_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Exact AUROC via the rank-sum (Mann-Whitney) statistic: the fraction of
/// (positive, negative) pairs ranked concordantly, ties counted half.
/// Labels must be 0/1; both classes must be present.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Contract("auroc labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {pos} positives / {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// F1 at a probability threshold; zero-division conventions yield 0.
pub fn f1(probs: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fun) = (0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, l == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fun += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fun) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Support-weighted mean.
pub fn weighted_average(values: &[f64], support: &[f64]) -> Result<f64> {
    if values.len() != support.len() {
        return Err(Error::dim(
            "weighted_average",
            format!("{} values vs {} supports", values.len(), support.len()),
        ));
    }
    let total: f64 = support.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("weighted_average needs positive total support".into()));
    }
    Ok(values.iter().zip(support).map(|(v, s)| v * s).sum::<f64>() / total)
}

/// Sample mean and sample (n-1) standard deviation across folds.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "aggregation requires at least 2 folds, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Per-class and weighted metrics of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub fold_id: usize,
    pub fraction: f64,
    /// None when the test slice had a single class (excluded from weighting).
    pub per_class_auroc: [Option<f64>; NUM_CLASSES],
    pub per_class_f1: [f64; NUM_CLASSES],
    /// True-instance (positive) counts per class.
    pub support: [usize; NUM_CLASSES],
    pub weighted_auroc: Option<f64>,
    pub weighted_f1: f64,
}

impl MetricsReport {
    /// Compute a report from per-sample class probabilities and 0/1 targets.
    pub fn compute(
        model: &str,
        fold_id: usize,
        fraction: f64,
        probs: &[[f64; NUM_CLASSES]],
        targets: &[[f64; NUM_CLASSES]],
        threshold: f64,
    ) -> Result<MetricsReport> {
        if probs.len() != targets.len() || probs.is_empty() {
            return Err(Error::Contract(format!(
                "metrics need matching non-empty prediction/target lists ({} vs {})",
                probs.len(),
                targets.len()
            )));
        }
        let mut per_class_auroc = [None; NUM_CLASSES];
        let mut per_class_f1 = [0.0; NUM_CLASSES];
        let mut support = [0usize; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let col_p: Vec<f64> = probs.iter().map(|row| row[k]).collect();
            let col_t: Vec<f64> = targets.iter().map(|row| row[k]).collect();
            support[k] = col_t.iter().filter(|&&v| v == 1.0).count();
            per_class_auroc[k] = match auroc(&col_p, &col_t) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            per_class_f1[k] = f1(&col_p, &col_t, threshold);
        }
        // weighted means over classes with defined values and support
        let mut auroc_vals = Vec::new();
        let mut auroc_sup = Vec::new();
        let mut f1_vals = Vec::new();
        let mut f1_sup = Vec::new();
        for k in 0..NUM_CLASSES {
            if support[k] > 0 {
                f1_vals.push(per_class_f1[k]);
                f1_sup.push(support[k] as f64);
                if let Some(v) = per_class_auroc[k] {
                    auroc_vals.push(v);
                    auroc_sup.push(support[k] as f64);
                }
            }
        }
        let weighted_auroc = if auroc_vals.is_empty() {
            None
        } else {
            Some(weighted_average(&auroc_vals, &auroc_sup)?)
        };
        let weighted_f1 = weighted_average(&f1_vals, &f1_sup)?;
        Ok(MetricsReport {
            model: model.to_string(),
            fold_id,
            fraction,
            per_class_auroc,
            per_class_f1,
            support,
            weighted_auroc,
            weighted_f1,
        })
    }

    /// CSV: one row per class (class, auroc, f1, support) plus a weighted
    /// summary row. Undefined AUROC prints as NA.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,auroc,f1,support\n");
        for k in 0..NUM_CLASSES {
            let a = match self.per_class_auroc[k] {
                Some(v) => format!("{v}"),
                None => "NA".to_string(),
            };
            out.push_str(&format!(
                "{},{a},{},{}\n",
                LABEL_NAMES[k], self.per_class_f1[k], self.support[k]
            ));
        }
        let a = match self.weighted_auroc {
            Some(v) => format!("{v}"),
            None => "NA".to_string(),
        };
        let total: usize = self.support.iter().sum();
        out.push_str(&format!("weighted,{a},{},{total}\n", self.weighted_f1));
        out
    }
}
