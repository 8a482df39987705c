//! Balanced accuracy, one-vs-all AUROC and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_labels(labels: &[usize], k: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!(
            "{what} label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Entry (i, j) counts samples of true class i predicted as j.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    check_labels(y_true, k, "true")?;
    check_labels(y_pred, k, "predicted")?;
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall over the classes present in the matrix.
pub fn balanced_accuracy_from_confusion(confusion: &[Vec<usize>]) -> Option<f64> {
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Mean per-class recall. Every class must occur in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<f64> {
    let m = confusion_matrix(y_true, y_pred, k)?;
    if let Some(c) = m.iter().position(|row| row.iter().sum::<usize>() == 0) {
        return Err(Error::InvalidInput(format!(
            "class {c} has no samples; its recall is undefined"
        )));
    }
    Ok(balanced_accuracy_from_confusion(&m).expect("all classes present"))
}

/// Area under the ROC curve of `scores` for the binary labels in
/// `positive`, via the Mann-Whitney rank sum with averaged tie ranks
/// (ties earn half credit). `None` when either side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep tie averages integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum2 += doubled;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Some(u2 as f64 / 2.0 / (p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Auroc {
    /// Unweighted mean over the defined per-class values.
    pub macro_avg: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// One-vs-all AUROC using column c of `scores` for class c.
pub fn auroc_ova(y_true: &[usize], scores: &[Vec<f64>], k: usize) -> Result<Auroc> {
    if y_true.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels vs {} score rows",
            y_true.len(),
            scores.len()
        )));
    }
    check_labels(y_true, k, "true")?;
    if scores.iter().any(|row| row.len() != k || row.iter().any(|s| !s.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "scores must be finite rows of length {k}"
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let a = binary_auroc(&col, &pos);
        if a.is_none() {
            warnings.push(format!(
                "class {c}: AUROC undefined (needs at least one positive and one negative)"
            ));
        }
        per_class.push(a);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_avg = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(Auroc {
        macro_avg,
        per_class,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bacc: f64,
    pub auroc_macro: Option<f64>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Scores every metric from true labels and per-sample class probabilities.
pub fn evaluate(y_true: &[usize], probs: &[Vec<f64>], k: usize) -> Result<EvalResult> {
    let y_pred: Vec<usize> = probs.iter().map(|p| crate::model::predict(p)).collect();
    let confusion = confusion_matrix(y_true, &y_pred, k)?;
    let bacc = balanced_accuracy_from_confusion(&confusion)
        .ok_or_else(|| Error::InvalidInput("no samples to evaluate".into()))?;
    let au = auroc_ova(y_true, probs, k)?;
    Ok(EvalResult {
        bacc,
        auroc_macro: au.macro_avg,
        per_class_auroc: au.per_class,
        confusion,
        warnings: au.warnings,
    })
}
