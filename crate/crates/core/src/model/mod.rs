//! Denoising autoencoder, patch tokenizer, pre-norm Transformer encoder,
//! classifier head and low-rank adapters.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names. Forward passes
//! bind a `ParamSet` onto a [`Tape`] and build the graph from there.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    classify, dae_forward, encode, positional_encoding, predict_logits, tokenize,
    update_running_stats, BnMode, Bound, Forward, TokenGrid,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("input {got:?} does not match {want}")]
    Input { got: Vec<usize>, want: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_t: usize,
    pub patch_f: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
    pub causal: bool,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    /// Channel widths of the two DAE encoder convolutions.
    pub dae_channels: [usize; 2],
    pub bn_momentum: f64,
    pub norm_eps: f64,
    /// Log-mel inputs enter the model as `(X - input_center) / input_scale`.
    pub input_center: f64,
    pub input_scale: f64,
    /// `ln(eps)` of the front end, used for tokenizer padding.
    pub log_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_t: 4,
            patch_f: 4,
            token_dim: 64,
            layers: 6,
            heads: 4,
            mlp_dim: 128,
            n_classes: 5,
            causal: false,
            adapter_rank: 4,
            adapter_alpha: 4.0,
            dae_channels: [8, 16],
            bn_momentum: 0.9,
            norm_eps: 1e-5,
            input_center: -6.0,
            input_scale: 6.0,
            log_floor: 1e-10f64.ln(),
        }
    }
}

/// Low-rank additive adapter on one weight: `W + (alpha / r) * A B`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterSpec {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// Target viewed as a matrix `[rows, cols]`.
    pub rows: usize,
    pub cols: usize,
}

impl AdapterSpec {
    pub fn a_name(&self) -> String {
        format!("adapters.{}.a", adapter_stem(&self.target))
    }

    pub fn b_name(&self) -> String {
        format!("adapters.{}.b", adapter_stem(&self.target))
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn adapter_stem(target: &str) -> &str {
    target.strip_suffix(".weight").unwrap_or(target)
}

/// Upload groups. Everything outside the first three is backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    DaeAdapters,
    Head,
    TokenEmbeddings,
    Backbone,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("adapters.dae.") {
            ParamGroup::DaeAdapters
        } else if name.starts_with("head.") || name.starts_with("adapters.head.") {
            ParamGroup::Head
        } else if name.starts_with("tokenizer.") {
            ParamGroup::TokenEmbeddings
        } else {
            ParamGroup::Backbone
        }
    }

    pub fn is_adapted(self) -> bool {
        self != ParamGroup::Backbone
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::DaeAdapters => "DAE adapters",
            ParamGroup::Head => "Classifier head",
            ParamGroup::TokenEmbeddings => "Token embeddings",
            ParamGroup::Backbone => "Backbone",
        }
    }
}

/// Running statistics: carried in the parameter set but never trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Trainable parameter counts of the three uploaded groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCounts {
    pub dae_adapters: usize,
    pub head: usize,
    pub token_embeddings: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.dae_adapters + self.head + self.token_embeddings
    }
}

const DAE_KERNEL: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch_t == 0 || self.patch_f == 0 {
            return err("patch sizes must be at least 1".into());
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return err(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_dim == 0 || self.n_classes < 2 {
            return err("layers, mlp_dim must be positive and n_classes >= 2".into());
        }
        if self.dae_channels.contains(&0) {
            return err("DAE channel widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return err(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        if !(self.input_scale > 0.0 && self.norm_eps > 0.0) {
            return err("input_scale and norm_eps must be positive".into());
        }
        if self.adapter_rank == 0 {
            return err("adapter_rank must be at least 1".into());
        }
        for a in self.adapter_specs() {
            if a.rank >= a.rows.min(a.cols) {
                return err(format!(
                    "adapter rank {} not below min dim of {} ({}x{})",
                    a.rank, a.target, a.rows, a.cols
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.patch_t * self.patch_f
    }

    /// Token grid for a `frames x bins` input (remainders are padded).
    pub fn grid(&self, frames: usize, bins: usize) -> TokenGrid {
        TokenGrid {
            frames,
            bins,
            n_t: frames.div_ceil(self.patch_t),
            n_f: bins.div_ceil(self.patch_f),
        }
    }

    /// Normalized value used for tokenizer padding.
    pub fn pad_value(&self) -> f64 {
        (self.log_floor - self.input_center) / self.input_scale
    }

    pub fn normalize(&self, spec: &Spectrogram) -> Vec<f64> {
        spec.values()
            .iter()
            .map(|v| (v - self.input_center) / self.input_scale)
            .collect()
    }

    /// Stacks spectrograms into a normalized `[B, 1, T, F]` tensor.
    pub fn batch_tensor(&self, specs: &[&Spectrogram]) -> Result<Tensor> {
        let first = specs.first().ok_or_else(|| ModelError::Input {
            got: vec![0],
            want: "at least one spectrogram".into(),
        })?;
        let (t, f) = (first.frames(), first.bins());
        let mut data = Vec::with_capacity(specs.len() * t * f);
        for s in specs {
            if (s.frames(), s.bins()) != (t, f) {
                return Err(ModelError::Input {
                    got: vec![s.frames(), s.bins()],
                    want: format!("{t}x{f} like the first spectrogram"),
                });
            }
            data.extend(self.normalize(s));
        }
        Ok(Tensor::new(vec![specs.len(), 1, t, f], data)?)
    }

    pub fn adapter_specs(&self) -> Vec<AdapterSpec> {
        let [c1, c2] = self.dae_channels;
        let k2 = DAE_KERNEL * DAE_KERNEL;
        let spec = |target: &str, rows, cols| AdapterSpec {
            target: target.to_string(),
            rank: self.adapter_rank,
            alpha: self.adapter_alpha,
            rows,
            cols,
        };
        vec![
            spec("dae.enc1.weight", c1, k2),
            spec("dae.enc2.weight", c2, c1 * k2),
            spec("dae.dec1.weight", c2, c1 * k2),
            spec("dae.dec2.weight", c1, k2),
            spec("head.weight", self.token_dim, self.n_classes),
        ]
    }

    /// Every named tensor with its shape, buffers included.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let [c1, c2] = self.dae_channels;
        let k = DAE_KERNEL;
        let (d, m) = (self.token_dim, self.mlp_dim);
        let mut s = BTreeMap::new();
        let mut put = |n: &str, shape: Vec<usize>| {
            s.insert(n.to_string(), shape);
        };
        put("dae.enc1.weight", vec![c1, 1, k, k]);
        put("dae.enc1.bias", vec![c1]);
        put("dae.enc2.weight", vec![c2, c1, k, k]);
        put("dae.enc2.bias", vec![c2]);
        put("dae.dec1.weight", vec![c2, c1, k, k]);
        put("dae.dec1.bias", vec![c1]);
        put("dae.dec2.weight", vec![c1, 1, k, k]);
        put("dae.dec2.bias", vec![1]);
        put("tokenizer.weight", vec![self.patch_len(), d]);
        put("tokenizer.bias", vec![d]);
        put("tokenizer.bn.gamma", vec![d]);
        put("tokenizer.bn.beta", vec![d]);
        put("tokenizer.bn.running_mean", vec![d]);
        put("tokenizer.bn.running_var", vec![d]);
        put("tokenizer.cls", vec![1, d]);
        for i in 0..self.layers {
            let p = |n: &str| format!("encoder.layer{i}.{n}");
            put(&p("ln1.gamma"), vec![d]);
            put(&p("ln1.beta"), vec![d]);
            put(&p("attn.qkv.weight"), vec![d, 3 * d]);
            put(&p("attn.qkv.bias"), vec![3 * d]);
            put(&p("attn.out.weight"), vec![d, d]);
            put(&p("attn.out.bias"), vec![d]);
            put(&p("ln2.gamma"), vec![d]);
            put(&p("ln2.beta"), vec![d]);
            put(&p("mlp.fc1.weight"), vec![d, m]);
            put(&p("mlp.fc1.bias"), vec![m]);
            put(&p("mlp.fc2.weight"), vec![m, d]);
            put(&p("mlp.fc2.bias"), vec![d]);
        }
        put("encoder.norm.gamma", vec![d]);
        put("encoder.norm.beta", vec![d]);
        put("head.weight", vec![d, self.n_classes]);
        put("head.bias", vec![self.n_classes]);
        for a in self.adapter_specs() {
            put(&a.a_name(), vec![a.rows, a.rank]);
            put(&a.b_name(), vec![a.rank, a.cols]);
        }
        s
    }

    /// Trainable counts per uploaded group, from shapes alone.
    pub fn group_counts(&self) -> GroupCounts {
        let mut c = GroupCounts {
            dae_adapters: 0,
            head: 0,
            token_embeddings: 0,
        };
        for (name, shape) in self.param_shapes() {
            if is_buffer(&name) {
                continue;
            }
            let n: usize = shape.iter().product();
            match ParamGroup::of(&name) {
                ParamGroup::DaeAdapters => c.dae_adapters += n,
                ParamGroup::Head => c.head += n,
                ParamGroup::TokenEmbeddings => c.token_embeddings += n,
                ParamGroup::Backbone => {}
            }
        }
        c
    }

    pub fn total_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named tensors with a stable (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| ModelError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Scalar count over tensors accepted by `keep`.
    pub fn count(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| keep(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Checks that every name and shape agrees with `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = cfg.param_shapes();
        for (name, shape) in &want {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape {
                    name: name.clone(),
                    got: t.shape().to_vec(),
                    want: shape.clone(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !want.contains_key(*n)) {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Uploaded tensors (adapters, head, token embeddings), sorted by name.
    pub fn adapted_subset(&self) -> Vec<(&str, &Tensor)> {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n).is_adapted())
            .collect()
    }
}

/// Names of the uploaded tensors in wire order.
pub fn adapted_names(params: &ParamSet) -> Vec<String> {
    params
        .adapted_subset()
        .into_iter()
        .map(|(n, _)| n.to_string())
        .collect()
}

pub fn adapted_subset(params: &ParamSet) -> Vec<(&str, &Tensor)> {
    params.adapted_subset()
}

/// Fresh parameters.
///
/// The last DAE layer starts at zero so the residual DAE begins as the
/// identity, and adapter `B` factors start at zero so adapters begin inert.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let depth_scale = 1.0 / ((2 * cfg.layers) as f64).sqrt();
    let mut p = ParamSet::new();
    for (name, shape) in cfg.param_shapes() {
        let fan_in = |s: &[usize]| -> f64 {
            match s.len() {
                4 => (s[1] * s[2] * s[3]) as f64,
                2 => s[0] as f64,
                _ => 1.0,
            }
        };
        let t = if name.ends_with(".bias")
            || name.ends_with(".beta")
            || name.ends_with("running_mean")
        {
            Tensor::zeros(&shape)
        } else if name.ends_with(".gamma") || name.ends_with("running_var") {
            Tensor::ones(&shape)
        } else if name == "dae.dec2.weight" || name.ends_with(".b") && name.starts_with("adapters.")
        {
            Tensor::zeros(&shape)
        } else if name.starts_with("adapters.") {
            Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
        } else if name == "dae.dec1.weight" {
            // Transposed conv: fan-in is Cin * k * k seen from the output side.
            Tensor::randn(&shape, (2.0 / (shape[0] * 9) as f64).sqrt(), rng)
        } else if name.starts_with("dae.") {
            Tensor::randn(&shape, (2.0 / fan_in(&shape)).sqrt(), rng)
        } else if name == "tokenizer.cls" {
            Tensor::randn(&shape, 0.02, rng)
        } else if name == "head.weight" {
            Tensor::randn(&shape, 0.01, rng)
        } else if name.ends_with("attn.out.weight") || name.ends_with("fc2.weight") {
            Tensor::randn(&shape, depth_scale / fan_in(&shape).sqrt(), rng)
        } else {
            Tensor::randn(&shape, 1.0 / fan_in(&shape).sqrt(), rng)
        };
        p.insert(name, t);
    }
    Ok(p)
}

/// Builds a tape for a forward pass over `params`; `trainable` decides which
/// tensors become differentiable leaves.
pub fn bind<'p>(
    tape: &mut Tape,
    params: &'p ParamSet,
    trainable: impl Fn(&str) -> bool,
) -> Bound<'p> {
    Bound::new(tape, params, trainable)
}
