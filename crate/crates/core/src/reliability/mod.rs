//! Post-hoc temperature scaling, equal-frequency ECE, energy scores,
//! abstention thresholds and OOD detection metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReliabilityError {
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("only one class present; temperature is not identifiable")]
    SingleClass,
    #[error("rows must have {want} entries, row {row} has {got}")]
    Ragged { row: usize, got: usize, want: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ReliabilityError>;

pub const ECE_BINS: usize = 15;
const LOG_T_RANGE: (f64, f64) = (-2.995_732_273_553_991, 2.995_732_273_553_991);

fn check_rows(rows: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if rows.len() != labels.len() {
        return Err(ReliabilityError::Invalid(format!(
            "{} rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let k = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(ReliabilityError::Ragged {
                row: i,
                got: r.len(),
                want: k,
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ReliabilityError::NonFinite);
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ReliabilityError::Label { label, classes: k });
    }
    Ok(k)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|v| v / t).collect();
    let lse = log_sum_exp(&s);
    s.iter().map(|v| (v - lse).exp()).collect()
}

/// Mean negative log-likelihood of `softmax(z / t)`.
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let s: Vec<f64> = z.iter().map(|v| v / t).collect();
            log_sum_exp(&s) - s[y]
        })
        .sum::<f64>()
        / n
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub temperature: f64,
    pub nll_pre: f64,
    pub nll_post: f64,
    pub ece_pre: f64,
    pub ece_post: f64,
}

/// Golden-section search for the NLL-minimizing temperature on
/// `log T` in `[log 0.05, log 20]`; keeps `T = 1` if the search does not
/// improve on it.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<CalibrationResult> {
    if logits.len() < 50 {
        return Err(ReliabilityError::TooFew {
            need: 50,
            got: logits.len(),
        });
    }
    check_rows(logits, labels)?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(ReliabilityError::SingleClass);
    }
    let f = |u: f64| nll(logits, labels, u.exp());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let nll_pre = f(0.0);
    let u = (a + b) / 2.0;
    let (temperature, nll_post) = match f(u) {
        v if v <= nll_pre => (u.exp(), v),
        _ => (1.0, nll_pre),
    };
    let probs = |t: f64| logits.iter().map(|z| softmax(z, t)).collect::<Vec<_>>();
    Ok(CalibrationResult {
        temperature,
        nll_pre,
        nll_post,
        ece_pre: ece(&probs(1.0), labels, ECE_BINS)?,
        ece_post: ece(&probs(temperature), labels, ECE_BINS)?,
    })
}

/// Expected calibration error over equal-frequency confidence bins.
///
/// Samples are sorted by confidence and cut into `n_bins` near-equal runs,
/// the remainder going to the leading bins. A cut that would separate equal
/// confidences moves to the end of the tied run, so tied samples always
/// share a bin.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    let n = probs.len();
    if n_bins == 0 || n < n_bins {
        return Err(ReliabilityError::TooFew {
            need: n_bins.max(1),
            got: n,
        });
    }
    check_rows(probs, labels)?;
    for p in probs {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ReliabilityError::Invalid(format!(
                "probabilities sum to {s}"
            )));
        }
    }
    let mut items: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let k = argmax(p);
            (p[k], k == y)
        })
        .collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut start = 0;
    let mut target = 0;
    let mut total = 0.0;
    for b in 0..n_bins {
        target += base + usize::from(b < extra);
        let mut end = target.max(start);
        while end < n && end > 0 && items[end].0 == items[end - 1].0 {
            end += 1;
        }
        if end > start {
            let bin = &items[start..end];
            let m = bin.len() as f64;
            let conf = bin.iter().map(|x| x.0).sum::<f64>() / m;
            let acc = bin.iter().filter(|x| x.1).count() as f64 / m;
            total += m / n as f64 * (acc - conf).abs();
        }
        start = end;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub temperature: f64,
    /// Abstain when the energy exceeds this value.
    pub threshold: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            threshold: f64::INFINITY,
        }
    }
}

impl EnergyConfig {
    pub fn abstains(&self, z: &[f64]) -> bool {
        energy_score(z, self.temperature) > self.threshold
    }
}

/// `-T log sum_k exp(z_k / T)`; lower means more in-distribution.
pub fn energy_score(z: &[f64], t: f64) -> f64 {
    let s: Vec<f64> = z.iter().map(|v| v / t).collect();
    -t * log_sum_exp(&s)
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Energy threshold accepting at least `target_tpr` of in-distribution
/// scores: the type-7 quantile, raised to the next order statistic in the
/// rare case interpolation lands below the required coverage.
pub fn select_threshold(scores_id: &[f64], target_tpr: f64) -> Result<f64> {
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(ReliabilityError::Invalid(format!(
            "target_tpr {target_tpr} outside (0, 1)"
        )));
    }
    if scores_id.len() < 20 {
        return Err(ReliabilityError::TooFew {
            need: 20,
            got: scores_id.len(),
        });
    }
    if scores_id.iter().any(|v| !v.is_finite()) {
        return Err(ReliabilityError::NonFinite);
    }
    let mut s = scores_id.to_vec();
    s.sort_by(f64::total_cmp);
    let tau = quantile_sorted(&s, target_tpr);
    let need = (target_tpr * s.len() as f64).ceil() as usize;
    let covered = s.partition_point(|&v| v <= tau);
    Ok(if covered >= need { tau } else { s[need - 1] })
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn auroc(negatives: &[f64], positives: &[f64]) -> f64 {
    let (n0, n1) = (negatives.len() as f64, positives.len() as f64);
    let all: Vec<f64> = negatives.iter().chain(positives).cloned().collect();
    let ranks = average_ranks(&all);
    let r1: f64 = ranks[negatives.len()..].iter().sum();
    (r1 - n1 * (n1 + 1.0) / 2.0) / (n0 * n1)
}

/// Average precision with positives flagged when `score >= threshold`,
/// stepping through distinct thresholds from high to low.
pub fn average_precision(negatives: &[f64], positives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let p_total = positives.len() as f64;
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / p_total;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr_out: f64,
    pub fpr_at_95tpr: f64,
}

/// Detection metrics with OOD as the positive class and higher energy
/// meaning more OOD.
pub fn ood_metrics(scores_id: &[f64], scores_ood: &[f64]) -> Result<OodMetrics> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(ReliabilityError::TooFew {
            need: 1,
            got: scores_id.len().min(scores_ood.len()),
        });
    }
    if scores_id.iter().chain(scores_ood).any(|v| !v.is_finite()) {
        return Err(ReliabilityError::NonFinite);
    }
    let mut ood = scores_ood.to_vec();
    ood.sort_by(|a, b| b.total_cmp(a));
    let k = ((0.95 * ood.len() as f64).ceil() as usize).clamp(1, ood.len());
    let tau = ood[k - 1];
    let fpr = scores_id.iter().filter(|&&s| s >= tau).count() as f64 / scores_id.len() as f64;
    Ok(OodMetrics {
        auroc: auroc(scores_id, scores_ood),
        aupr_out: average_precision(scores_id, scores_ood),
        fpr_at_95tpr: fpr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: f64,
    pub aupr_out: f64,
    pub fpr_at_95tpr: f64,
    pub threshold: f64,
    pub abstain_rate_id: f64,
    pub abstain_rate_ood: f64,
}

/// Metrics plus abstention rates at `threshold` on held-out scores.
pub fn ood_report(scores_id: &[f64], scores_ood: &[f64], threshold: f64) -> Result<OodReport> {
    let m = ood_metrics(scores_id, scores_ood)?;
    let rate = |s: &[f64]| s.iter().filter(|&&v| v > threshold).count() as f64 / s.len() as f64;
    Ok(OodReport {
        auroc: m.auroc,
        aupr_out: m.aupr_out,
        fpr_at_95tpr: m.fpr_at_95tpr,
        threshold,
        abstain_rate_id: rate(scores_id),
        abstain_rate_ood: rate(scores_ood),
    })
}
