use serde::Serialize;

use crate::error::{Error, Result};
use crate::reliability::{argmax, auroc};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hit = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hit as f64 / labels.len().max(1) as f64
}

/// Unweighted mean of per-class F1 over all `k` classes; a class with no
/// true positives (including one absent from both inputs) contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Invariant(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Invariant(format!(
            "class {bad} out of range for {k} classes"
        )));
    }
    let mut f1 = 0.0;
    for c in 0..k {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l != c)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != c && l == c)
            .count() as f64;
        if tp > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    Ok(f1 / k as f64)
}

/// Mean one-vs-rest Mann-Whitney AUC over classes that occur in `labels`.
pub fn ovr_auc(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::Invariant(
            "AUC needs at least two classes in the labels".into(),
        ));
    }
    let mut sum = 0.0;
    for &c in &present {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (p, &l) in probs.iter().zip(labels) {
            if l == c {
                pos.push(p[c]);
            } else {
                neg.push(p[c]);
            }
        }
        sum += auroc(&neg, &pos);
    }
    Ok(sum / present.len() as f64)
}

pub fn predictions(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub class: usize,
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One-vs-rest ROC curve for `class`, one point per distinct score plus
/// the origin.
pub fn roc_curve(probs: &[Vec<f64>], labels: &[usize], class: usize) -> Vec<RocPoint> {
    let mut s: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p[class], l == class))
        .collect();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = s.iter().filter(|x| x.1).count().max(1) as f64;
    let neg = s.iter().filter(|x| !x.1).count().max(1) as f64;
    let mut out = vec![RocPoint {
        class,
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < s.len() {
        let t = s[i].0;
        while i < s.len() && s[i].0 == t {
            if s[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push(RocPoint {
            class,
            threshold: t,
            fpr: fp / neg,
            tpr: tp / pos,
        });
    }
    out
}
