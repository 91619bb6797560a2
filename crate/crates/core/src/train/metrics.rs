//! Ranking metrics for multi-label scores.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Area under the precision-recall curve as the step sum
/// `Σ (Rₙ − Rₙ₋₁)·Pₙ` over distinct score thresholds. `None` without
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let order = ranking(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Consume a block of tied scores as one threshold.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// ROC AUC as the Mann-Whitney statistic with average ranks for ties.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUC from a precomputed ascending order of `scores` (ties grouped).
pub(crate) fn roc_auc_sorted(scores: &[f64], order: &[usize], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            pos += labels[order[j]] as usize;
            j += 1;
        }
        rank_sum += (i + 1 + j) as f64 / 2.0 * pos as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub(crate) fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.at(r, c)).collect()
}

pub(crate) fn bool_column(t: &Tensor, c: usize) -> Vec<bool> {
    (0..t.rows()).map(|r| t.at(r, c) > 0.5).collect()
}

/// Per-class metrics of one score matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetrics {
    /// `None` for classes without positives.
    pub ap: Vec<Option<f64>>,
    /// `None` for classes with a single label value.
    pub auc: Vec<Option<f64>>,
    pub map: f64,
    pub mean_auc: f64,
    /// Fraction of correct 0/1 decisions at thresholds 0.50, 0.55, …, 0.95.
    pub threshold_accuracy: Vec<(f64, f64)>,
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        f64::NAN
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// AP, AUC and their means over classes. Classes where a metric is
/// undefined are left out of its mean.
pub fn score_metrics(scores: &Tensor, labels: &Tensor) -> ScoreMetrics {
    let k = labels.cols();
    let mut ap = Vec::with_capacity(k);
    let mut auc = Vec::with_capacity(k);
    for c in 0..k {
        let s = column(scores, c);
        let l = bool_column(labels, c);
        ap.push(average_precision(&s, &l));
        auc.push(roc_auc(&s, &l));
    }
    for (c, a) in ap.iter().enumerate() {
        if a.is_none() {
            log::info!("class {c} has no positives; AP excluded from the mean");
        }
    }
    let total = scores.numel().max(1) as f64;
    let threshold_accuracy = (0..10)
        .map(|i| {
            let t = 0.5 + 0.05 * i as f64;
            let correct = scores
                .data()
                .iter()
                .zip(labels.data())
                .filter(|(s, l)| (**s >= t) == (**l > 0.5))
                .count();
            (t, correct as f64 / total)
        })
        .collect();
    ScoreMetrics {
        map: mean_defined(&ap),
        mean_auc: mean_defined(&auc),
        ap,
        auc,
        threshold_accuracy,
    }
}

/// Metrics for the class head (`initial`) and the refined output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub initial: ScoreMetrics,
    pub refined: ScoreMetrics,
}

/// Mean Bernoulli entropy per row, in nats.
pub fn mean_entropy(probs: &Tensor) -> Vec<f64> {
    let h = |p: f64| {
        let mut e = 0.0;
        if p > 0.0 {
            e -= p * p.ln();
        }
        if p < 1.0 {
            e -= (1.0 - p) * (1.0 - p).ln();
        }
        e
    };
    (0..probs.rows())
        .map(|r| probs.row(r).iter().map(|&p| h(p)).sum::<f64>() / probs.cols() as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PercentileError(pub f64);

impl std::fmt::Display for PercentileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "percentile must lie strictly between 0 and 100, got {}", self.0)
    }
}

impl std::error::Error for PercentileError {}

/// Indices of the most uncertain samples: the top `(100 − percentile)%`
/// by mean entropy, ties broken by lower index, returned in ascending
/// index order.
pub fn hard_sample_split(probs: &Tensor, percentile: f64) -> Result<Vec<usize>, PercentileError> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(PercentileError(percentile));
    }
    let ent = mean_entropy(probs);
    let n = ent.len();
    let count = ((n as f64) * (100.0 - percentile) / 100.0 - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| ent[b].total_cmp(&ent[a]).then(a.cmp(&b)));
    let mut hard: Vec<usize> = idx.into_iter().take(count.min(n)).collect();
    hard.sort_unstable();
    Ok(hard)
}

/// Maximum-weight assignment of rows to distinct columns for `rows ≤ cols`.
/// Returns the column of each row.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return vec![];
    }
    let m = weights[0].len();
    assert!(n <= m, "need rows ≤ cols");
    // Shortest augmenting paths with potentials on cost = −weight.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = -weights[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}
