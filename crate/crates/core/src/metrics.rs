//! ROC-AUC, error rate and ADTM normalization of HPO trajectories.

use crate::error::{Error, Result};

/// Class probabilities with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// Row-major `labels.len() × n_classes`.
    pub probs: Vec<f64>,
    pub n_classes: usize,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, n_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if n_classes == 0 || probs.len() != labels.len() * n_classes {
            return Err(Error::shape(format!(
                "{} probabilities for {} rows of {n_classes} classes",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Bounds {
                index: bad,
                len: n_classes,
            });
        }
        Ok(Self {
            probs,
            n_classes,
            labels,
        })
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.probs.chunks(self.n_classes).map(|r| r[k]).collect()
    }
}

/// Mann-Whitney form of the binary ROC-AUC: the fraction of
/// (negative, positive) pairs ranked correctly, ties counting one half.
/// `positive[i]` marks the positive class.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC-AUC needs both classes present".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay
    // in integers: a tie block spanning ranks lo+1..=hi has mean rank
    // (lo + 1 + hi) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut lo = 0;
    while lo < order.len() {
        let mut hi = lo + 1;
        while hi < order.len() && scores[order[hi]] == scores[order[lo]] {
            hi += 1;
        }
        let pos_in_block = order[lo..hi].iter().filter(|&&i| positive[i]).count() as u128;
        twice_rank_sum += pos_in_block * (lo as u128 + 1 + hi as u128);
        lo = hi;
    }
    let n_pos = n_pos as u128;
    // U = R_pos − n_pos(n_pos+1)/2, doubled
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest ROC-AUC over the classes present in the labels.
/// With two classes this is the binary AUC of the class-1 column.
pub fn roc_auc_multiclass(pred: &PredictionSet) -> Result<f64> {
    let mut present = vec![false; pred.n_classes];
    for &y in &pred.labels {
        present[y] = true;
    }
    let classes: Vec<usize> = (0..pred.n_classes).filter(|&k| present[k]).collect();
    if classes.len() < 2 {
        return Err(Error::UndefinedMetric(
            "fewer than two classes present".into(),
        ));
    }
    if pred.n_classes == 2 {
        let positive: Vec<bool> = pred.labels.iter().map(|&y| y == 1).collect();
        return roc_auc_binary(&pred.column(1), &positive);
    }
    let mut total = 0.0;
    for &k in &classes {
        let positive: Vec<bool> = pred.labels.iter().map(|&y| y == k).collect();
        total += roc_auc_binary(&pred.column(k), &positive)?;
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of rows whose arg-max class (lowest index on ties) is wrong.
pub fn error_rate(pred: &PredictionSet) -> Result<f64> {
    if pred.labels.is_empty() {
        return Err(Error::UndefinedMetric("error rate of zero rows".into()));
    }
    let wrong = pred
        .probs
        .chunks(pred.n_classes)
        .zip(&pred.labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    Ok(wrong as f64 / pred.labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One HPO trajectory with the normalization bounds of its group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdtmInput {
    pub trajectory: Vec<f64>,
    pub dataset_min: f64,
    pub dataset_max: f64,
}

impl AdtmInput {
    /// Bounds taken from the trajectory itself, i.e. normalization within
    /// one method's search space for one (dataset, fold).
    pub fn intra(trajectory: Vec<f64>) -> Self {
        let dataset_min = trajectory.iter().copied().fold(f64::INFINITY, f64::min);
        let dataset_max = trajectory.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            trajectory,
            dataset_min,
            dataset_max,
        }
    }
}

/// Normalized incumbent curve of one trajectory, right-extended to
/// `n_trials`. `dataset_max` maps to 0 and `dataset_min` to 1.
pub fn adtm_trajectory(input: &AdtmInput, n_trials: usize) -> Result<Vec<f64>> {
    let Some(&first) = input.trajectory.first() else {
        return Err(Error::InsufficientData("empty ADTM trajectory".into()));
    };
    let (lo, hi) = (input.dataset_min, input.dataset_max);
    let span = hi - lo;
    let mut incumbent = first;
    let mut out = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        if let Some(&v) = input.trajectory.get(t) {
            incumbent = incumbent.max(v);
        }
        out.push(if span > 0.0 { (hi - incumbent) / span } else { 0.0 });
    }
    Ok(out)
}

/// Average of [`adtm_trajectory`] over all inputs.
pub fn adtm_curve(inputs: &[AdtmInput], n_trials: usize) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no ADTM trajectories".into()));
    }
    let mut total = vec![0.0; n_trials];
    for input in inputs {
        for (acc, v) in total.iter_mut().zip(adtm_trajectory(input, n_trials)?) {
            *acc += v;
        }
    }
    total.iter_mut().for_each(|v| *v /= inputs.len() as f64);
    Ok(total)
}
