//! Federated rounds: corrected local updates with control variates and a
//! proximal pull, delta clipping, 8-bit quantization, staleness-weighted
//! aggregation and payload accounting.

mod quadratic;
mod wire;

pub use quadratic::{
    quadratic_benchmark, QuadraticObjective, QuadraticRun, QuadraticSetup, QUAD_PARAM,
};
pub use wire::{
    account_payload, decode_delta, decode_masked, encode_delta, encode_masked, ComponentBytes,
    PayloadReport, Schema, MAGIC_DELTA, MAGIC_MASKED,
};

use std::collections::{BTreeMap, VecDeque};

use rand::{seq::SliceRandom, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{is_buffer, ModelError, ParamGroup, ParamSet};
use crate::objective::ObjectiveError;
use crate::secure::{
    derive_masks, mask_upload, unmask_sum, MaskedTensor, MaskedUpload, SecureError, SessionKey,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("invalid hyper-parameters: {0}")]
    Config(String),
    #[error("client {0} has no data")]
    EmptyDataset(u32),
    #[error("client {client}: non-finite {what}")]
    NonFinite { client: u32, what: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor names differ: {0}")]
    NameMismatch(String),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("weighted code sum may overflow 32 bits (total multiplicity {0})")]
    Overflow(u64),
    #[error("wire format: {0}")]
    Wire(String),
    #[error(transparent)]
    Secure(#[from] SecureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// Tensors keyed by parameter name.
pub type Named = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOptimizer {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mu: f64,
    pub clip: f64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub optimizer: LocalOptimizer,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Backbone learning rate as a fraction of `lr`.
    pub backbone_lr_scale: f64,
    pub staleness_threshold: u32,
    pub control_variates: bool,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 1e-2,
            mu: 0.01,
            clip: 1.0,
            rounds: 50,
            clients_per_round: 3,
            optimizer: LocalOptimizer::AdamW,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            backbone_lr_scale: 0.1,
            staleness_threshold: 1,
            control_variates: true,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.mu >= 0.0) || !(self.weight_decay >= 0.0) || !(self.backbone_lr_scale >= 0.0) {
            return bad("mu, weight_decay and backbone_lr_scale must be non-negative");
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs and batch_size must be at least 1");
        }
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be at least 1");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    /// Weight multiplier for an update computed `age` rounds ago.
    pub fn staleness_factor(&self, age: u32) -> f64 {
        1.0 / (1.0 + age.saturating_sub(self.staleness_threshold) as f64)
    }
}

/// Tensors that carry control variates: uploaded and trainable.
pub fn variate_names(params: &ParamSet) -> Vec<String> {
    params
        .names()
        .filter(|n| ParamGroup::of(n).is_adapted() && !is_buffer(n))
        .map(str::to_string)
        .collect()
}

fn zeros_like(params: &ParamSet, names: &[String]) -> Result<Named> {
    names
        .iter()
        .map(|n| Ok((n.clone(), Tensor::zeros(params.require(n)?.shape()))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: u32,
    pub theta: ParamSet,
    pub c_server: Named,
    /// Sample count over every client in the federation.
    pub total_samples: u64,
    history: VecDeque<ParamSet>,
    history_limit: usize,
}

impl GlobalState {
    pub fn new(theta: ParamSet, total_samples: u64) -> Result<Self> {
        let c_server = zeros_like(&theta, &variate_names(&theta))?;
        Ok(Self {
            round: 0,
            theta,
            c_server,
            total_samples,
            history: VecDeque::new(),
            history_limit: 0,
        })
    }

    /// Keeps up to `rounds` past models so lagging clients can train on them.
    pub fn with_history(mut self, rounds: usize) -> Self {
        self.history_limit = rounds;
        self
    }

    /// Model broadcast `age` rounds ago, clamped to what is retained.
    fn snapshot(&self, age: u32) -> (&ParamSet, u32) {
        if age == 0 || self.history.is_empty() {
            return (&self.theta, 0);
        }
        let i = (age as usize).min(self.history.len());
        (&self.history[i - 1], i as u32)
    }
}

/// Data access for one client's local objective.
pub trait LocalObjective: Send {
    fn num_samples(&self) -> usize;

    /// Mean loss and gradients over the examples at `batch` for every
    /// tensor the objective trains. Buffers such as running statistics may
    /// be updated in `params` as a side effect.
    fn minibatch(
        &mut self,
        params: &mut ParamSet,
        batch: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Named)>;
}

#[derive(Debug)]
pub struct ClientState<O> {
    pub id: u32,
    pub c_local: Named,
    pub data: O,
    pub last_participation: Option<u32>,
    /// Rounds by which this client's view of the model trails the server.
    pub lag: u32,
}

impl<O: LocalObjective> ClientState<O> {
    pub fn new(id: u32, data: O, theta: &ParamSet) -> Result<Self> {
        Ok(Self {
            id,
            c_local: zeros_like(theta, &variate_names(theta))?,
            data,
            last_participation: None,
            lag: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    /// `theta - theta_start` over the uploaded tensors, buffers included.
    pub delta: Named,
    pub c_local_new: Named,
    pub steps: usize,
    pub mean_loss: f64,
    /// Full local model after training.
    pub theta: ParamSet,
}

struct Adam {
    m: Named,
    v: Named,
    t: i32,
}

fn check_finite(client: u32, what: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(FedError::NonFinite {
            client,
            what: what.to_string(),
        })
    }
}

/// `E` epochs of minibatch steps from `theta_start`.
///
/// Uploaded tensors follow `g + (c_s - c) + mu (theta - theta_start)` through
/// AdamW or plain SGD; backbone tensors take plain SGD steps at a reduced
/// rate. Control variates use the convention `c ~ -grad`, so the correction
/// equals `grad F - grad F_s` at a fixed point.
pub fn local_update<O: LocalObjective + ?Sized>(
    client: u32,
    theta_start: &ParamSet,
    c_server: &Named,
    c_local: &Named,
    data: &mut O,
    hp: &HyperParams,
    rng: &mut dyn RngCore,
) -> Result<LocalUpdate> {
    hp.validate()?;
    let n = data.num_samples();
    if n == 0 {
        return Err(FedError::EmptyDataset(client));
    }
    let vnames = variate_names(theta_start);
    for name in &vnames {
        for (set, what) in [(c_server, "server"), (c_local, "client")] {
            match set.get(name) {
                Some(t) if t.shape() == theta_start.require(name)?.shape() => {}
                _ => return Err(FedError::NameMismatch(format!("{what} variate for {name}"))),
            }
        }
    }
    let mut theta = theta_start.clone();
    let mut adam = Adam {
        m: zeros_like(theta_start, &vnames)?,
        v: zeros_like(theta_start, &vnames)?,
        t: 0,
    };
    let mut grad_sum = zeros_like(theta_start, &vnames)?;
    let mut order: Vec<usize> = (0..n).collect();
    let (mut steps, mut loss_sum) = (0usize, 0.0);
    for _ in 0..hp.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(hp.batch_size) {
            let (loss, grads) = data.minibatch(&mut theta, batch, rng)?;
            if !loss.is_finite() {
                return Err(FedError::NonFinite {
                    client,
                    what: "loss".into(),
                });
            }
            loss_sum += loss;
            steps += 1;
            adam.t += 1;
            for (name, g) in grads {
                check_finite(client, &format!("gradient of {name}"), &g)?;
                if is_buffer(&name) {
                    continue;
                }
                if !ParamGroup::of(&name).is_adapted() {
                    let p = theta
                        .get_mut(&name)
                        .ok_or_else(|| FedError::Missing(name.clone()))?;
                    p.axpy(-hp.lr * hp.backbone_lr_scale, &g)?;
                    continue;
                }
                let start = theta_start.require(&name)?;
                let p = theta
                    .get_mut(&name)
                    .ok_or_else(|| FedError::Missing(name.clone()))?;
                let mut g = g;
                {
                    let gd = g.data_mut();
                    for ((gi, &pi), &si) in gd.iter_mut().zip(p.data()).zip(start.data()) {
                        *gi += hp.mu * (pi - si);
                    }
                }
                grad_sum
                    .get_mut(&name)
                    .ok_or_else(|| FedError::Missing(name.clone()))?
                    .axpy(1.0, &g)?;
                if hp.control_variates {
                    g.axpy(-1.0, &c_server[&name])?;
                    g.axpy(1.0, &c_local[&name])?;
                }
                match hp.optimizer {
                    LocalOptimizer::Sgd => p.axpy(-hp.lr, &g)?,
                    LocalOptimizer::AdamW => {
                        let (b1, b2) = hp.betas;
                        let bc1 = 1.0 - b1.powi(adam.t);
                        let bc2 = 1.0 - b2.powi(adam.t);
                        let m = adam
                            .m
                            .get_mut(&name)
                            .expect("moment allocated per variate name");
                        let v = adam
                            .v
                            .get_mut(&name)
                            .expect("moment allocated per variate name");
                        let decay = 1.0 - hp.lr * hp.weight_decay;
                        for (((pi, &gi), mi), vi) in p
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.data_mut())
                            .zip(v.data_mut())
                        {
                            *mi = b1 * *mi + (1.0 - b1) * gi;
                            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                            let step = (*mi / bc1) / ((*vi / bc2).sqrt() + hp.adam_eps);
                            *pi = *pi * decay - hp.lr * step;
                        }
                    }
                }
            }
        }
    }
    let k = steps as f64;
    let mut c_local_new = Named::new();
    for name in &vnames {
        let c = if !hp.control_variates {
            Tensor::zeros(theta_start.require(name)?.shape())
        } else {
            match hp.optimizer {
                LocalOptimizer::Sgd => {
                    let mut c = c_local[name].clone();
                    c.axpy(-1.0, &c_server[name])?;
                    let s = 1.0 / (k * hp.lr);
                    c.axpy(s, theta.require(name)?)?;
                    c.axpy(-s, theta_start.require(name)?)?;
                    c
                }
                LocalOptimizer::AdamW => {
                    let mut c = grad_sum[name].clone();
                    c.scale_in_place(-1.0 / k);
                    c
                }
            }
        };
        c_local_new.insert(name.clone(), c);
    }
    let mut delta = Named::new();
    for (name, t) in theta.adapted_subset() {
        let mut d = t.clone();
        d.axpy(-1.0, theta_start.require(name)?)?;
        check_finite(client, &format!("delta of {name}"), &d)?;
        delta.insert(name.to_string(), d);
    }
    Ok(LocalUpdate {
        delta,
        c_local_new,
        steps,
        mean_loss: loss_sum / k,
        theta,
    })
}

/// L2 norm over trainable entries; running statistics are left out.
pub fn global_norm(delta: &Named) -> f64 {
    delta
        .iter()
        .filter(|(n, _)| !is_buffer(n))
        .map(|(_, t)| t.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable entries so their joint L2 norm is at most `c`.
pub fn clip_delta(delta: &Named, c: f64) -> Named {
    let norm = global_norm(delta);
    if norm <= c {
        return delta.clone();
    }
    let s = c / norm;
    delta
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            if !is_buffer(n) {
                t.scale_in_place(s);
            }
            (n.clone(), t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f32,
    pub zero_point: i32,
    pub codes: Vec<i8>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor {
        let s = self.scale as f64;
        let data = self.codes.iter().map(|&c| c as f64 * s).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDelta {
    pub round: u32,
    pub client_id: u32,
    pub tensors: Vec<QuantizedTensor>,
}

impl QuantizedDelta {
    /// Bytes of quantized codes, one per parameter.
    pub fn code_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.codes.len()).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }
}

/// `max|v| / 127` as stored on the wire.
pub fn symmetric_scale(t: &Tensor) -> f32 {
    let m = t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let s = (m / 127.0) as f32;
    if s > 0.0 && s as f64 * 127.0 > m {
        // round down so that 127 * scale never exceeds max|v|
        f32::from_bits(s.to_bits() - 1)
    } else {
        s
    }
}

fn quantize_tensor(name: &str, t: &Tensor, scale: f32) -> QuantizedTensor {
    let s = scale as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| {
            if s > 0.0 {
                (v / s).round().clamp(-127.0, 127.0) as i8
            } else {
                0
            }
        })
        .collect();
    QuantizedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        scale,
        zero_point: 0,
        codes,
    }
}

/// Symmetric per-tensor 8-bit quantization.
pub fn quantize_8bit(delta: &Named) -> QuantizedDelta {
    QuantizedDelta {
        round: 0,
        client_id: 0,
        tensors: delta
            .iter()
            .map(|(n, t)| quantize_tensor(n, t, symmetric_scale(t)))
            .collect(),
    }
}

/// Quantization against externally agreed per-tensor scales.
pub fn quantize_with_scales(
    delta: &Named,
    scales: &BTreeMap<String, f32>,
) -> Result<QuantizedDelta> {
    let tensors = delta
        .iter()
        .map(|(n, t)| {
            let s = scales
                .get(n)
                .ok_or_else(|| FedError::Missing(format!("scale for {n}")))?;
            Ok(quantize_tensor(n, t, *s))
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedDelta {
        round: 0,
        client_id: 0,
        tensors,
    })
}

pub fn dequantize(q: &QuantizedDelta) -> Named {
    q.tensors
        .iter()
        .map(|t| (t.name.clone(), t.dequantize()))
        .collect()
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client_id: u32,
    pub samples: u64,
    pub age: u32,
    pub delta: QuantizedDelta,
    /// Quantized `c_s_new - c_s_old`.
    pub c_delta: Option<QuantizedDelta>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer weights `n_s * L / (1 + excess_s)` with `L` the lcm of the
/// denominators, so relative weights are exact.
pub fn multiplicities(samples: &[u64], ages: &[u32], hp: &HyperParams) -> Vec<u64> {
    let dens: Vec<u64> = ages
        .iter()
        .map(|&a| 1 + a.saturating_sub(hp.staleness_threshold) as u64)
        .collect();
    let l = dens.iter().fold(1u64, |l, &d| l / gcd(l, d) * d);
    samples
        .iter()
        .zip(&dens)
        .map(|(&n, &d)| n * (l / d))
        .collect()
}

/// `theta[i] += scale * sum[i] / total` for each tensor.
fn apply_sums(
    target: &mut BTreeMap<String, &mut Tensor>,
    names: &[String],
    scales: &[f32],
    sums: &[Vec<i64>],
    total: u64,
) {
    for ((name, &s), sum) in names.iter().zip(scales).zip(sums) {
        let t = target.get_mut(name).expect("names checked by caller");
        let (s, m) = (s as f64, total as f64);
        for (x, &c) in t.data_mut().iter_mut().zip(sum) {
            *x += s * (c as f64 / m);
        }
    }
}

fn check_names(q: &QuantizedDelta, want: &[String]) -> Result<()> {
    let got = q.names();
    if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| *a != b) {
        return Err(FedError::NameMismatch(format!(
            "client {} sent {:?}, expected {:?}",
            q.client_id, got, want
        )));
    }
    Ok(())
}

fn integer_sums(qs: &[&QuantizedDelta], mult: &[u64]) -> Option<(Vec<f32>, Vec<Vec<i64>>)> {
    let first = qs.first()?;
    let mut scales = Vec::new();
    let mut sums = Vec::new();
    for (i, t) in first.tensors.iter().enumerate() {
        if qs
            .iter()
            .any(|q| q.tensors[i].scale.to_bits() != t.scale.to_bits())
        {
            return None;
        }
        let mut acc = vec![0i64; t.codes.len()];
        for (q, &m) in qs.iter().zip(mult) {
            for (a, &c) in acc.iter_mut().zip(&q.tensors[i].codes) {
                *a += m as i64 * c as i64;
            }
        }
        scales.push(t.scale);
        sums.push(acc);
    }
    Some((scales, sums))
}

fn state_targets<'a>(
    params: &'a mut ParamSet,
    names: &[String],
) -> BTreeMap<String, &'a mut Tensor> {
    params
        .iter_mut()
        .filter(|(n, _)| names.iter().any(|m| m == n))
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

/// Staleness-weighted average of dequantized deltas added to the global
/// model, plus the sample-weighted server variate update.
///
/// Uploads sharing a per-tensor scale are summed exactly in integers.
pub fn aggregate(state: &mut GlobalState, uploads: &[Upload], hp: &HyperParams) -> Result<()> {
    if uploads.is_empty() {
        return Err(FedError::EmptyCohort);
    }
    let mut ups: Vec<&Upload> = uploads.iter().collect();
    ups.sort_by_key(|u| u.client_id);
    let names: Vec<String> = state
        .theta
        .adapted_subset()
        .into_iter()
        .map(|(n, _)| n.to_string())
        .collect();
    for u in &ups {
        check_names(&u.delta, &names)?;
    }
    let samples: Vec<u64> = ups.iter().map(|u| u.samples).collect();
    let ages: Vec<u32> = ups.iter().map(|u| u.age).collect();
    let mult = multiplicities(&samples, &ages, hp);
    let total: u64 = mult.iter().sum();
    if total == 0 {
        return Err(FedError::Config("uploads carry no samples".into()));
    }
    let deltas: Vec<&QuantizedDelta> = ups.iter().map(|u| &u.delta).collect();
    {
        let mut targets = state_targets(&mut state.theta, &names);
        match integer_sums(&deltas, &mult) {
            Some((scales, sums)) => apply_sums(&mut targets, &names, &scales, &sums, total),
            None => {
                for (q, &m) in deltas.iter().zip(&mult) {
                    let w = m as f64 / total as f64;
                    for t in &q.tensors {
                        targets
                            .get_mut(&t.name)
                            .expect("names checked")
                            .axpy(w, &t.dequantize())?;
                    }
                }
            }
        }
    }
    let cds: Vec<&QuantizedDelta> = ups.iter().filter_map(|u| u.c_delta.as_ref()).collect();
    if !cds.is_empty() {
        let vnames: Vec<String> = state.c_server.keys().cloned().collect();
        for q in &cds {
            check_names(q, &vnames)?;
        }
        let w: Vec<u64> = ups
            .iter()
            .filter(|u| u.c_delta.is_some())
            .map(|u| u.samples)
            .collect();
        let denom = state.total_samples.max(w.iter().sum());
        let mut targets: BTreeMap<String, &mut Tensor> = state
            .c_server
            .iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        match integer_sums(&cds, &w) {
            Some((scales, sums)) => apply_sums(&mut targets, &vnames, &scales, &sums, denom),
            None => {
                for (q, &n) in cds.iter().zip(&w) {
                    for t in &q.tensors {
                        targets
                            .get_mut(&t.name)
                            .expect("names checked")
                            .axpy(n as f64 / denom as f64, &t.dequantize())?;
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub samples: u64,
    pub age: u32,
    pub steps: usize,
    pub loss: f64,
    pub delta_norm: f64,
    pub clipped: bool,
    /// Relative aggregation weight after staleness.
    pub weight: f64,
    pub upload_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub secure: bool,
    pub clients: Vec<ClientReport>,
    pub dropped: Vec<(u32, String)>,
    /// Per-client payload of this round's uploads.
    pub payload: PayloadReport,
    pub upload_bytes: usize,
    /// Evaluation metrics filled in by the caller.
    pub eval: BTreeMap<String, f64>,
}

impl RoundReport {
    pub fn mean_loss(&self) -> f64 {
        let n = self.clients.len().max(1) as f64;
        self.clients.iter().map(|c| c.loss).sum::<f64>() / n
    }
}

pub(crate) fn client_seed(seed: u64, round: u32, client: u32) -> u64 {
    let mut x = seed ^ ((round as u64) << 32 | client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn shared_scales(named: &[&Named]) -> BTreeMap<String, f32> {
    let mut out = BTreeMap::new();
    for d in named {
        for (n, t) in d.iter() {
            let s = symmetric_scale(t);
            let e = out.entry(n.clone()).or_insert(0.0f32);
            if s > *e {
                *e = s;
            }
        }
    }
    out
}

fn schema_of(named: &Named) -> Schema {
    named
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

/// Per-client upload size for one round, computed by encoding zero-valued
/// messages with the layout `run_round` sends.
pub fn expected_payload(theta: &ParamSet, hp: &HyperParams, secure: bool) -> Result<PayloadReport> {
    let delta_schema: Schema = theta
        .adapted_subset()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let mut schemas = vec![delta_schema.clone()];
    if hp.control_variates {
        let names = variate_names(theta);
        schemas.push(schema_of(&zeros_like(theta, &names)?));
    }
    let mut bytes = 0;
    for schema in &schemas {
        bytes += if secure {
            let up = MaskedUpload {
                round: 0,
                client_id: 0,
                tensors: schema
                    .iter()
                    .map(|(n, sh)| MaskedTensor {
                        name: n.clone(),
                        shape: sh.clone(),
                        scale: 1.0,
                        zero_point: 0,
                        codes: vec![0; sh.iter().product()],
                    })
                    .collect(),
            };
            encode_masked(&up, schema)?.len()
        } else {
            let q = QuantizedDelta {
                round: 0,
                client_id: 0,
                tensors: schema
                    .iter()
                    .map(|(n, sh)| QuantizedTensor {
                        name: n.clone(),
                        shape: sh.clone(),
                        scale: 1.0,
                        zero_point: 0,
                        codes: vec![0; sh.iter().product()],
                    })
                    .collect(),
            };
            encode_delta(&q, schema)?.len()
        };
    }
    let sizes = wire::group_sizes(&delta_schema);
    let params: usize = sizes.iter().map(|(_, n)| n).sum();
    Ok(account_payload(&sizes, bytes.saturating_sub(params)))
}

struct Finished {
    idx: usize,
    age: u32,
    samples: u64,
    update: LocalUpdate,
    clipped: Named,
    c_delta: Option<Named>,
    norm: f64,
}

/// One synchronous round over `cohort`: local training, clipping,
/// quantization against cohort-wide scales, optional masking, wire
/// round-trip, aggregation and variate refresh.
pub fn run_round<O: LocalObjective>(
    state: &mut GlobalState,
    cohort: &mut [ClientState<O>],
    hp: &HyperParams,
    secure: bool,
) -> Result<RoundReport> {
    hp.validate()?;
    if cohort.is_empty() {
        return Err(FedError::EmptyCohort);
    }
    let round = state.round;
    let results: Vec<(usize, u32, Result<LocalUpdate>)> = cohort
        .par_iter_mut()
        .enumerate()
        .map(|(idx, cl)| {
            let (theta0, age) = state.snapshot(cl.lag);
            let mut rng = ChaCha8Rng::seed_from_u64(client_seed(hp.seed, round, cl.id));
            let r = local_update(
                cl.id,
                theta0,
                &state.c_server,
                &cl.c_local,
                &mut cl.data,
                hp,
                &mut rng,
            );
            (idx, age, r)
        })
        .collect();
    let mut done = Vec::new();
    let mut dropped = Vec::new();
    for (idx, age, r) in results {
        let cl = &cohort[idx];
        match r {
            Ok(update) => {
                let norm = global_norm(&update.delta);
                let clipped = clip_delta(&update.delta, hp.clip);
                let c_delta = if hp.control_variates {
                    let mut d = Named::new();
                    for (n, c) in &update.c_local_new {
                        let mut c = c.clone();
                        c.axpy(-1.0, &cl.c_local[n])?;
                        d.insert(n.clone(), c);
                    }
                    Some(d)
                } else {
                    None
                };
                done.push(Finished {
                    idx,
                    age,
                    samples: cl.data.num_samples() as u64,
                    update,
                    clipped,
                    c_delta,
                    norm,
                });
            }
            Err(e) => {
                log::warn!("round {round}: dropping client {}: {e}", cl.id);
                dropped.push((cl.id, e.to_string()));
            }
        }
    }
    if done.is_empty() {
        return Err(FedError::EmptyCohort);
    }
    done.sort_by_key(|f| cohort[f.idx].id);
    let ids: Vec<u32> = done.iter().map(|f| cohort[f.idx].id).collect();
    let samples: Vec<u64> = done.iter().map(|f| f.samples).collect();
    let ages: Vec<u32> = done.iter().map(|f| f.age).collect();
    let mult = multiplicities(&samples, &ages, hp);
    let total: u64 = mult.iter().sum();
    let max_c_weight: u64 = samples.iter().sum::<u64>().max(state.total_samples);
    if total.max(max_c_weight).saturating_mul(127) >= i32::MAX as u64 {
        return Err(FedError::Overflow(total));
    }

    let delta_scales = shared_scales(&done.iter().map(|f| &f.clipped).collect::<Vec<_>>());
    let delta_schema = schema_of(&done[0].clipped);
    let c_parts: Vec<&Named> = done.iter().filter_map(|f| f.c_delta.as_ref()).collect();
    let c_scales = shared_scales(&c_parts);
    let c_schema = c_parts.first().map(|c| schema_of(c));

    let adapted: Vec<String> = state
        .theta
        .adapted_subset()
        .into_iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let delta_names: Vec<&String> = delta_schema.iter().map(|(n, _)| n).collect();
    if delta_names.len() != adapted.len() || delta_names.iter().zip(&adapted).any(|(a, b)| *a != b)
    {
        return Err(FedError::NameMismatch(format!(
            "deltas cover {delta_names:?}, model has {adapted:?}"
        )));
    }
    let previous = (state.history_limit > 0).then(|| state.theta.clone());
    let key = SessionKey::from_seed(hp.seed);
    let mut uploads = Vec::with_capacity(done.len());
    let mut client_bytes = Vec::with_capacity(done.len());
    let mut masked_d = Vec::new();
    let mut masked_c = Vec::new();
    let mut sent_c = Vec::with_capacity(done.len());
    for (f, &m) in done.iter().zip(&mult) {
        let id = cohort[f.idx].id;
        let mut q = quantize_with_scales(&f.clipped, &delta_scales)?;
        q.round = round;
        q.client_id = id;
        let cq = match &f.c_delta {
            Some(c) => {
                let mut cq = quantize_with_scales(c, &c_scales)?;
                cq.round = round;
                cq.client_id = id;
                Some(cq)
            }
            None => None,
        };
        sent_c.push(cq.as_ref().map(dequantize));
        let mut bytes = 0usize;
        if secure {
            let lens: Vec<usize> = q.tensors.iter().map(|t| t.codes.len()).collect();
            let masks = derive_masks(id, &ids, round, &key.derive("delta"), &lens)?;
            let wire = encode_masked(&mask_upload(&q, m as u32, &masks)?, &delta_schema)?;
            bytes += wire.len();
            masked_d.push(decode_masked(&wire, &delta_schema)?);
            if let (Some(cq), Some(schema)) = (&cq, &c_schema) {
                let lens: Vec<usize> = cq.tensors.iter().map(|t| t.codes.len()).collect();
                let masks = derive_masks(id, &ids, round, &key.derive("variate"), &lens)?;
                let wire = encode_masked(&mask_upload(cq, f.samples as u32, &masks)?, schema)?;
                bytes += wire.len();
                masked_c.push(decode_masked(&wire, schema)?);
            }
            uploads.push(Upload {
                client_id: id,
                samples: f.samples,
                age: f.age,
                delta: q,
                c_delta: cq,
            });
        } else {
            let wire = encode_delta(&q, &delta_schema)?;
            bytes += wire.len();
            let q = decode_delta(&wire, &delta_schema)?;
            let cq = match (&cq, &c_schema) {
                (Some(cq), Some(schema)) => {
                    let wire = encode_delta(cq, schema)?;
                    bytes += wire.len();
                    Some(decode_delta(&wire, schema)?)
                }
                _ => None,
            };
            uploads.push(Upload {
                client_id: id,
                samples: f.samples,
                age: f.age,
                delta: q,
                c_delta: cq,
            });
        }
        client_bytes.push(bytes);
    }

    if secure {
        let names: Vec<String> = delta_schema.iter().map(|(n, _)| n.clone()).collect();
        let scales: Vec<f32> = names.iter().map(|n| delta_scales[n]).collect();
        let sums = unmask_sum(&masked_d, &ids)?;
        let mut targets = state_targets(&mut state.theta, &names);
        apply_sums(&mut targets, &names, &scales, &sums, total);
        if let Some(schema) = &c_schema {
            let vnames: Vec<String> = schema.iter().map(|(n, _)| n.clone()).collect();
            let scales: Vec<f32> = vnames.iter().map(|n| c_scales[n]).collect();
            let sums = unmask_sum(&masked_c, &ids)?;
            let denom = max_c_weight;
            let mut targets: BTreeMap<String, &mut Tensor> = state
                .c_server
                .iter_mut()
                .map(|(n, t)| (n.clone(), t))
                .collect();
            apply_sums(&mut targets, &vnames, &scales, &sums, denom);
        }
    } else {
        aggregate(state, &uploads, hp)?;
    }

    let mut reports = Vec::with_capacity(done.len());
    for ((f, &m), &bytes) in done.iter().zip(&mult).zip(&client_bytes) {
        reports.push(ClientReport {
            client_id: cohort[f.idx].id,
            samples: f.samples,
            age: f.age,
            steps: f.update.steps,
            loss: f.update.mean_loss,
            delta_norm: f.norm,
            clipped: f.norm > hp.clip,
            weight: m as f64 / total as f64,
            upload_bytes: bytes,
        });
    }
    // Clients keep the variate the server accounted for, so that the server
    // variate stays the weighted sum of client variates despite quantization.
    for (f, sent) in done.into_iter().zip(sent_c) {
        let cl = &mut cohort[f.idx];
        match sent {
            Some(dc) => {
                for (n, d) in dc {
                    cl.c_local
                        .get_mut(&n)
                        .ok_or_else(|| FedError::Missing(n.clone()))?
                        .axpy(1.0, &d)?;
                }
            }
            None => cl.c_local = f.update.c_local_new,
        }
        cl.last_participation = Some(round);
    }

    let sizes = wire::group_sizes(&delta_schema);
    let per_client = client_bytes.iter().sum::<usize>() / client_bytes.len();
    let params: usize = sizes.iter().map(|(_, n)| n).sum();
    let payload = account_payload(&sizes, per_client.saturating_sub(params));

    if let Some(prev) = previous {
        state.history.push_front(prev);
        state.history.truncate(state.history_limit);
    }
    state.round += 1;
    Ok(RoundReport {
        round,
        secure,
        clients: reports,
        dropped,
        payload,
        upload_bytes: client_bytes.iter().sum(),
        eval: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests;
