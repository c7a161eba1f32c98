use serde::{Deserialize, Serialize};

use crate::cohort::EventTime;
use crate::error::{Error, Result};
use crate::simulator::MixtureParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
}

/// Rank-statistic AUC; tied scores receive half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks (1-based) over tie blocks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!("{a} scores but {b} labels")));
    }
    if a == 0 {
        return Err(Error::Config("no scores to evaluate".into()));
    }
    Ok(())
}

/// F1 of `predicted` against `actual`, positive class = `true`.
pub fn f1_score(predicted: &[bool], actual: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// AUC, accuracy at 0.5 and F1 for the positive class.
pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> Result<BinaryMetrics> {
    let auc = auc(scores, labels)?;
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(BinaryMetrics {
        auc,
        accuracy: correct as f64 / labels.len() as f64,
        f1: f1_score(&predicted, labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassAuc {
    pub micro: f64,
    pub weighted: f64,
    /// Classes absent from the labels, left out of the weighted mean.
    pub excluded_classes: Vec<usize>,
}

/// One-vs-rest micro and prevalence-weighted AUC.
pub fn multiclass_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<MulticlassAuc> {
    check_lengths(scores.len(), labels.len())?;
    let classes = scores[0].len();
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Config("score rows differ in width".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!(
            "label {bad} outside {classes} score columns"
        )));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Config(
            "multiclass AUC needs at least two classes present".into(),
        ));
    }
    let mut flat_scores = Vec::with_capacity(scores.len() * classes);
    let mut flat_labels = Vec::with_capacity(scores.len() * classes);
    for (row, &l) in scores.iter().zip(labels) {
        for (c, &s) in row.iter().enumerate() {
            flat_scores.push(s);
            flat_labels.push(c == l);
        }
    }
    let micro = auc(&flat_scores, &flat_labels)?.expect("both classes present");
    let mut weighted = 0.0;
    let mut excluded = Vec::new();
    for c in 0..classes {
        if counts[c] == 0 {
            excluded.push(c);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let lab: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let a = auc(&col, &lab)?.expect("class present and not universal");
        weighted += a * counts[c] as f64 / labels.len() as f64;
    }
    if !excluded.is_empty() {
        log::info!("classes {excluded:?} absent from labels; left out of weighted AUC");
    }
    Ok(MulticlassAuc {
        micro,
        weighted,
        excluded_classes: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: f64,
    /// AUC of 1 − S(horizon) for an event by the horizon.
    pub auc: Option<f64>,
    /// F1 with survival past the horizon as the positive class.
    pub f1: f64,
    pub evaluated: usize,
    pub excluded_censored: usize,
}

/// Label for a time-horizon binarization; `None` if censored before it.
pub fn horizon_label(outcome: &EventTime, horizon: f64) -> Option<bool> {
    if outcome.event && outcome.months <= horizon {
        Some(true)
    } else if outcome.months >= horizon {
        Some(false)
    } else {
        None
    }
}

pub fn horizon_metrics(
    curves: &[MixtureParams],
    outcomes: &[EventTime],
    horizon: f64,
) -> Result<HorizonMetrics> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if curves.len() != outcomes.len() {
        return Err(Error::Config(format!(
            "{} curves but {} outcome records",
            curves.len(),
            outcomes.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut survive_pred = Vec::new();
    let mut excluded = 0;
    for (c, o) in curves.iter().zip(outcomes) {
        match horizon_label(o, horizon) {
            None => excluded += 1,
            Some(event) => {
                let s = c.survival(horizon)?;
                scores.push(1.0 - s);
                labels.push(event);
                survive_pred.push(s >= 0.5);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Config(format!(
            "no evaluable records at horizon {horizon} months"
        )));
    }
    let survived: Vec<bool> = labels.iter().map(|&e| !e).collect();
    Ok(HorizonMetrics {
        horizon,
        auc: auc(&scores, &labels)?,
        f1: f1_score(&survive_pred, &survived),
        evaluated: labels.len(),
        excluded_censored: excluded,
    })
}
