//! Training losses: DAE reconstruction with time/frequency gradient
//! penalties, cross-entropy, feature consistency and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{corrupt, spec_augment, MaskPolicy, SpecAugment, Spectrogram};
use crate::model::{
    classify, dae_forward, encode, tokenize, BnMode, Bound, ModelConfig, ModelError,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaeLossWeights {
    pub beta_t: f64,
    pub beta_f: f64,
}

impl Default for DaeLossWeights {
    fn default() -> Self {
        Self {
            beta_t: 0.1,
            beta_f: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dae: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_dae: 0.3,
            lambda_con: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce > 0.0) || !(self.lambda_dae >= 0.0) || !(self.lambda_con >= 0.0) {
            return Err(ObjectiveError::Weights(format!(
                "need lambda_ce > 0 and the rest >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl DaeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_t >= 0.0 && self.beta_f >= 0.0) {
            return Err(ObjectiveError::Weights(format!(
                "negative beta in {self:?}"
            )));
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(ObjectiveError::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute forward difference of `d` along the time (`axis_t`) or
/// frequency axis of its trailing `[T, F]` block. `None` when that axis has
/// a single entry.
fn diff_l1(tape: &mut Tape, d: Var, along_time: bool) -> Result<Option<Var>> {
    let shape = tape.shape(d).to_vec();
    let (t, f) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let lead = shape.iter().product::<usize>() / (t * f);
    let (nt, nf, step) = if along_time {
        (t - 1, f, f)
    } else {
        (t, f - 1, 1)
    };
    if nt == 0 || nf == 0 {
        return Ok(None);
    }
    let mut lo = Vec::with_capacity(lead * nt * nf);
    for b in 0..lead {
        for i in 0..nt {
            for j in 0..nf {
                lo.push(b * t * f + i * f + j);
            }
        }
    }
    let hi: Vec<usize> = lo.iter().map(|i| i + step).collect();
    let n = lo.len();
    let a = tape.gather(d, hi, vec![n])?;
    let b = tape.gather(d, lo, vec![n])?;
    let g = tape.sub(a, b)?;
    let g = tape.abs(g);
    Ok(Some(tape.mean(g)))
}

/// `mean((x_hat - x)^2) + beta_t * mean|D_t(x_hat - x)| + beta_f * mean|D_f(x_hat - x)|`
/// over the trailing `[T, F]` axes; each L1 term is averaged over its own
/// element count.
pub fn dae_loss(tape: &mut Tape, x_hat: Var, x: Var, w: &DaeLossWeights) -> Result<Var> {
    same_shape(tape, "dae_loss", x_hat, x)?;
    if tape.shape(x).len() < 2 {
        return Err(ObjectiveError::Shape {
            op: "dae_loss",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![],
        });
    }
    let d = tape.sub(x_hat, x)?;
    let sq = tape.mul(d, d)?;
    let mut loss = tape.mean(sq);
    for (beta, along_time) in [(w.beta_t, true), (w.beta_f, false)] {
        if beta == 0.0 {
            continue;
        }
        if let Some(term) = diff_l1(tape, d, along_time)? {
            let term = tape.scale(term, beta);
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// Batch-mean of `-log_softmax(z)[label]`; `logits` is `[B, K]` or `[K]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / k.max(1);
    if rows != labels.len() || labels.is_empty() {
        return Err(ObjectiveError::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ObjectiveError::Label { label, classes: k });
    }
    let ls = tape.log_softmax(logits);
    let idx = labels.iter().enumerate().map(|(b, &l)| b * k + l).collect();
    let picked = tape.gather(ls, idx, vec![rows])?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Squared L2 distance, averaged over rows for `[B, D]` inputs.
pub fn consistency_loss(tape: &mut Tape, f: Var, f_prime: Var) -> Result<Var> {
    same_shape(tape, "consistency_loss", f, f_prime)?;
    let rows = match tape.shape(f) {
        [r, _] => *r,
        _ => 1,
    };
    let d = tape.sub(f, f_prime)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Input corruptions used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    /// Std of the Gaussian perturbation added to log-mel values.
    pub noise_std: f64,
    pub mask: MaskPolicy,
    /// SpecAugment for the second view; `None` reuses the corrupted input.
    pub view: Option<SpecAugment>,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            mask: MaskPolicy::default(),
            view: Some(SpecAugment::default()),
        }
    }
}

/// Weighted loss terms; `ce + dae + con == total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dae: f64,
    pub con: f64,
    pub total: f64,
}

/// Graph handles produced by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub logits: Var,
    /// Batch-norm node, for updating running statistics.
    pub bn: Var,
}

fn take_rows(tape: &mut Tape, x: Var, rows: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let per = shape[1..].iter().product::<usize>();
    let flat = tape.reshape(x, &[shape[0], per])?;
    let idx: Vec<usize> = (0..rows).collect();
    let picked = tape.select_rows(flat, &idx)?;
    let mut out = shape;
    out[0] = rows;
    Ok(tape.reshape(picked, &out)?)
}

/// Composite objective on a labelled batch of raw log-mel spectrograms.
///
/// The classification view is `corrupt(X)` passed through DAE, tokenizer,
/// encoder and head. The DAE term compares that view's reconstruction with
/// `X`. The consistency term compares class-token features of the main view
/// and of an augmented copy. Terms with zero weight are not built.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    specs: &[&Spectrogram],
    labels: &[usize],
    weights: &LossWeights,
    dae_w: &DaeLossWeights,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<(LossGraph, LossBreakdown)> {
    total_loss_with_targets(tape, p, cfg, specs, None, labels, weights, dae_w, aug, rng)
}

/// [`total_loss`] with explicit reconstruction targets for the DAE term,
/// e.g. the noise-free version of each input. `None` uses the inputs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_targets<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    specs: &[&Spectrogram],
    targets: Option<&[&Spectrogram]>,
    labels: &[usize],
    weights: &LossWeights,
    dae_w: &DaeLossWeights,
    aug: &Augmentation,
    rng: &mut R,
) -> Result<(LossGraph, LossBreakdown)> {
    weights.validate()?;
    if specs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if let Some(t) = targets {
        if t.len() != specs.len() {
            return Err(ObjectiveError::Shape {
                op: "total_loss targets",
                lhs: vec![specs.len()],
                rhs: vec![t.len()],
            });
        }
    }
    let b = specs.len();
    let corrupted: Vec<Spectrogram> = specs
        .iter()
        .map(|s| corrupt(s, aug.noise_std, &aug.mask, rng))
        .collect();
    let mut inputs: Vec<&Spectrogram> = corrupted.iter().collect();
    let views: Vec<Spectrogram>;
    if weights.lambda_con > 0.0 {
        views = match &aug.view {
            Some(sa) => corrupted.iter().map(|s| spec_augment(s, sa, rng)).collect(),
            None => corrupted.clone(),
        };
        inputs.extend(views.iter());
    }
    let n = inputs.len();
    let x = tape.constant(cfg.batch_tensor(&inputs)?);
    let x_hat = dae_forward(tape, p, cfg, x)?;
    let (tokens, bn, _) = tokenize(tape, p, cfg, x_hat, BnMode::Train)?;
    let (h, _) = encode(tape, p, cfg, tokens, n, cfg.causal)?;
    let h_main = if n > b { take_rows(tape, h, b)? } else { h };
    let logits = classify(tape, p, cfg, h_main)?;

    let ce = cross_entropy(tape, logits, labels)?;
    let ce = tape.scale(ce, weights.lambda_ce);
    let mut total = ce;
    let mut parts = LossBreakdown {
        ce: tape.value(ce).item(),
        ..LossBreakdown::default()
    };
    if weights.lambda_dae > 0.0 {
        let clean = tape.constant(cfg.batch_tensor(targets.unwrap_or(specs))?);
        let recon = if n > b {
            take_rows(tape, x_hat, b)?
        } else {
            x_hat
        };
        let l = dae_loss(tape, recon, clean, dae_w)?;
        let l = tape.scale(l, weights.lambda_dae);
        parts.dae = tape.value(l).item();
        total = tape.add(total, l)?;
    }
    if weights.lambda_con > 0.0 {
        let d = tape.shape(h)[1];
        let idx: Vec<usize> = (b * d..2 * b * d).collect();
        let h_view = tape.gather(h, idx, vec![b, d])?;
        let l = consistency_loss(tape, h_main, h_view)?;
        let l = tape.scale(l, weights.lambda_con);
        parts.con = tape.value(l).item();
        total = tape.add(total, l)?;
    }
    parts.total = tape.value(total).item();
    Ok((LossGraph { total, logits, bn }, parts))
}

/// Reconstruction-only objective for DAE pretraining: `noisy` inputs are
/// denoised and compared with `clean` targets (both normalized `[B,1,T,F]`).
pub fn dae_pretrain_loss(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    noisy: Tensor,
    clean: Tensor,
    dae_w: &DaeLossWeights,
) -> Result<Var> {
    let x = tape.constant(noisy);
    let y = tape.constant(clean);
    let x_hat = dae_forward(tape, p, cfg, x)?;
    dae_loss(tape, x_hat, y, dae_w)
}

#[cfg(test)]
mod tests;
