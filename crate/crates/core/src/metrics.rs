//! Evaluation metrics for reconstruction-based anomaly detection and for
//! classification, plus the epistemic/aleatoric uncertainty split.
//!
//! All computations run in `f64` on dequantized values.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("empty input")]
    Empty,
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("ROC analysis needs both classes present")]
    SingleClass,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability row {row} sums to {sum}")]
    NotNormalized { row: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub l1: f64,
    pub nll: f64,
}

/// RMSE, L1 and Gaussian NLL of `pred_mean` against `target`, with
/// `pred_var` the per-point predictive (total) variance.
pub fn regression_metrics(
    pred_mean: &[f64],
    pred_var: &[f64],
    target: &[f64],
) -> Result<RegressionMetrics, MetricsError> {
    if pred_mean.len() != target.len() || pred_var.len() != target.len() {
        return Err(MetricsError::Shape(format!(
            "mean {}, var {}, target {}",
            pred_mean.len(),
            pred_var.len(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&v) = pred_var.iter().find(|&&v| !(v > 0.0)) {
        return Err(MetricsError::NonPositiveVariance(v));
    }
    let n = target.len() as f64;
    let (mut sq, mut abs, mut nll) = (0.0, 0.0, 0.0);
    for ((&mu, &var), &y) in pred_mean.iter().zip(pred_var).zip(target) {
        let d = mu - y;
        sq += d * d;
        abs += d.abs();
        nll += 0.5 * (2.0 * PI * var).ln() + d * d / (2.0 * var);
    }
    Ok(RegressionMetrics { rmse: (sq / n).sqrt(), l1: abs / n, nll: nll / n })
}

/// Root-mean-squared difference between two equally long slices.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    pub best_threshold: f64,
    pub acc_at_cutoff: f64,
    pub ap: f64,
    /// (FPR, TPR) points from (0, 0) to (1, 1).
    pub curve: Vec<(f64, f64)>,
}

/// One operating point per unique score, highest threshold first.
struct Sweep {
    thresholds: Vec<f64>,
    tp: Vec<usize>,
    fp: Vec<usize>,
    pos: usize,
    neg: usize,
}

/// Cumulative confusion counts when predicting positive for `score >= thr`.
fn sweep(scores: &[f64], labels: &[bool]) -> Sweep {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut thresholds, mut tp, mut fp) = (Vec::new(), Vec::new(), Vec::new());
    let (mut t, mut f) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            t += 1;
        } else {
            f += 1;
        }
        let last_of_group = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_group {
            thresholds.push(scores[i]);
            tp.push(t);
            fp.push(f);
        }
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Sweep { thresholds, tp, fp, pos, neg: labels.len() - pos }
}

/// Step-interpolated area under the precision-recall curve.
fn average_precision_of(sw: &Sweep) -> f64 {
    if sw.pos == 0 {
        return 0.0;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&tp, &fp) in sw.tp.iter().zip(&sw.fp) {
        let recall = tp as f64 / sw.pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Average precision of `scores` for the positive class given by `labels`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_binary(scores, labels)?;
    Ok(average_precision_of(&sweep(scores, labels)))
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// ROC curve, trapezoid AUC, Youden-optimal cutoff and AP for a binary
/// problem where `true` marks the positive (anomalous) class and higher
/// scores mean "more positive".
///
/// Among thresholds with equal Youden's J the largest one wins.
pub fn roc_analysis(scores: &[f64], labels: &[bool]) -> Result<RocResult, MetricsError> {
    check_binary(scores, labels)?;
    let sw = sweep(scores, labels);
    if sw.pos == 0 || sw.neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let (p, n) = (sw.pos as f64, sw.neg as f64);
    let mut curve = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let mut best_j = f64::NEG_INFINITY;
    let mut best = 0;
    for k in 0..sw.thresholds.len() {
        let tpr = sw.tp[k] as f64 / p;
        let fpr = sw.fp[k] as f64 / n;
        let (px, py) = *curve.last().unwrap();
        auc += (fpr - px) * (tpr + py) / 2.0;
        curve.push((fpr, tpr));
        let j = tpr - fpr;
        if j > best_j {
            best_j = j;
            best = k;
        }
    }
    let tn = sw.neg - sw.fp[best];
    let acc = (sw.tp[best] + tn) as f64 / (p + n);
    Ok(RocResult {
        auc,
        best_threshold: sw.thresholds[best],
        acc_at_cutoff: acc,
        ap: average_precision_of(&sw),
        curve,
    })
}

/// Accuracy when predicting positive for `score >= threshold`.
pub fn accuracy_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == l).count();
    correct as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_ap: f64,
    pub macro_ar: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy by argmax, macro one-vs-rest AP and macro recall.
///
/// Classes absent from `labels` are left out of both macro averages.
pub fn classification_metrics(
    probs: &[Vec<f64>],
    labels: &[usize],
) -> Result<ClassificationMetrics, MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if probs.len() != labels.len() {
        return Err(MetricsError::Shape(format!("{} rows, {} labels", probs.len(), labels.len())));
    }
    let classes = probs[0].len();
    for (row, p) in probs.iter().enumerate() {
        if p.len() != classes {
            return Err(MetricsError::Shape(format!("row {row} has {} columns", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalized { row, sum });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let (mut ap_sum, mut ar_sum, mut present) = (0.0, 0.0, 0usize);
    for c in 0..classes {
        let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let support = truth.iter().filter(|&&t| t).count();
        if support == 0 {
            continue;
        }
        present += 1;
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        ap_sum += average_precision_of(&sweep(&scores, &truth));
        let hits = preds.iter().zip(labels).filter(|(&p, &l)| l == c && p == c).count();
        ar_sum += hits as f64 / support as f64;
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_ap: ap_sum / present as f64,
        macro_ar: ar_sum / present as f64,
    })
}

/// Entropy in nats with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uncertainty {
    pub mean: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
    pub aleatoric: f64,
    /// True when a single sample was given and epistemic variance is zero
    /// by definition rather than by estimate.
    pub degenerate: bool,
}

impl Uncertainty {
    /// `mean +/- 3 * sqrt(total)` per element.
    pub fn three_sigma_band(&self) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(&self.total)
            .map(|(&m, &v)| {
                let s = 3.0 * v.sqrt();
                (m - s, m + s)
            })
            .collect()
    }
}

/// Sample mean, unbiased across-sample variance (epistemic) and
/// epistemic + aleatoric (total) of S equally shaped outputs.
pub fn uncertainty_decompose(samples: &[Vec<f64>], aleatoric_var: f64) -> Uncertainty {
    assert!(!samples.is_empty(), "need at least one sample");
    let s = samples.len();
    let len = samples[0].len();
    let mut mean = vec![0.0; len];
    for row in samples {
        assert_eq!(row.len(), len, "samples must share a shape");
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    // identical columns are exact: no rounding residue in mean or variance
    let constant: Vec<bool> = (0..len).map(|j| samples.iter().all(|r| r[j] == samples[0][j])).collect();
    for j in (0..len).filter(|&j| constant[j]) {
        mean[j] = samples[0][j];
    }
    let epistemic: Vec<f64> = if s == 1 {
        vec![0.0; len]
    } else {
        (0..len)
            .map(|j| {
                if constant[j] {
                    return 0.0;
                }
                let ss: f64 = samples.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
                ss / (s - 1) as f64
            })
            .collect()
    };
    let total = epistemic.iter().map(|&e| e + aleatoric_var).collect();
    Uncertainty { mean, epistemic, total, aleatoric: aleatoric_var, degenerate: s == 1 }
}
