use std::collections::BTreeMap;

use super::{is_buffer, ModelConfig, ModelError, ParamSet, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Token layout for a `frames x bins` input: `n_t x n_f` patches, time-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub bins: usize,
    pub n_t: usize,
    pub n_f: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.n_t * self.n_f
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether batch norm uses batch statistics or the stored running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'p> {
    params: &'p ParamSet,
    vars: BTreeMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl<'p> Bound<'p> {
    pub fn new(tape: &mut Tape, params: &'p ParamSet, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut leaves = Vec::new();
        for (name, t) in params.iter() {
            if is_buffer(name) {
                continue;
            }
            let v = if trainable(name) {
                let v = tape.param(t.clone());
                leaves.push((name.to_string(), v));
                v
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Self {
            params,
            vars,
            trainable: leaves,
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Missing(name.to_string()))
    }

    /// Weight with its low-rank adapter folded in, when one is present.
    pub fn weight(&self, tape: &mut Tape, name: &str, scaling: f64) -> Result<Var> {
        let w = self.var(name)?;
        let stem = name.strip_suffix(".weight").unwrap_or(name);
        let (Ok(a), Ok(b)) = (
            self.var(&format!("adapters.{stem}.a")),
            self.var(&format!("adapters.{stem}.b")),
        ) else {
            return Ok(w);
        };
        let ab = tape.matmul(a, b)?;
        let ab = tape.scale(ab, scaling);
        let shape = tape.shape(w).to_vec();
        let ab = tape.reshape(ab, &shape)?;
        Ok(tape.add(w, ab)?)
    }

    /// Gradients of the trainable tensors, by name.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|(n, v)| (n.clone(), g.get(*v)))
            .collect()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(|(n, _)| n.as_str())
    }
}

fn dims4(tape: &Tape, x: Var, want: &str) -> Result<[usize; 4]> {
    match tape.shape(x) {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(ModelError::Input {
            got: s.to_vec(),
            want: want.to_string(),
        }),
    }
}

/// Residual convolutional DAE on `[B, 1, T, F]`; the output has the same shape.
pub fn dae_forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let [_, c, t, f] = dims4(tape, x, "[B, 1, T, F]")?;
    if c != 1 {
        return Err(ModelError::Input {
            got: tape.shape(x).to_vec(),
            want: "[B, 1, T, F]".into(),
        });
    }
    let s = cfg.adapter_alpha / cfg.adapter_rank as f64;
    let w1 = p.weight(tape, "dae.enc1.weight", s)?;
    let h1 = tape.conv2d(x, w1, Some(p.var("dae.enc1.bias")?), 2, 1)?;
    let h1 = tape.gelu(h1);
    let [_, _, t1, f1] = dims4(tape, h1, "")?;
    let w2 = p.weight(tape, "dae.enc2.weight", s)?;
    let h2 = tape.conv2d(h1, w2, Some(p.var("dae.enc2.bias")?), 2, 1)?;
    let h2 = tape.gelu(h2);
    let w3 = p.weight(tape, "dae.dec1.weight", s)?;
    let d1 = tape.conv_transpose2d(h2, w3, Some(p.var("dae.dec1.bias")?), 2, 1, t1, f1)?;
    let d1 = tape.gelu(d1);
    let w4 = p.weight(tape, "dae.dec2.weight", s)?;
    let d2 = tape.conv_transpose2d(d1, w4, Some(p.var("dae.dec2.bias")?), 2, 1, t, f)?;
    Ok(tape.add(x, d2)?)
}

/// Sinusoidal encodings over the flattened token index, `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positional shape")
}

/// `Z = GELU(BN(patches W + b)) + P`, returned as `[B*L, D]` with the tokens
/// of each sample contiguous. Also returns the batch-norm node.
pub fn tokenize(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    x_hat: Var,
    mode: BnMode,
) -> Result<(Var, Var, TokenGrid)> {
    let [batch, _, t, f] = dims4(tape, x_hat, "[B, 1, T, F]")?;
    let grid = cfg.grid(t, f);
    let (pt, pf) = (cfg.patch_t, cfg.patch_f);
    let tf = t * f;
    let padded = grid.n_t * pt != t || grid.n_f * pf != f;
    let flat = tape.reshape(x_hat, &[batch * tf])?;
    let src = if padded {
        let pad = tape.constant(Tensor::from_vec(vec![cfg.pad_value()]));
        tape.concat(&[flat, pad])?
    } else {
        flat
    };
    let pad_index = batch * tf;
    let mut index = Vec::with_capacity(batch * grid.len() * pt * pf);
    for b in 0..batch {
        for it in 0..grid.n_t {
            for jf in 0..grid.n_f {
                for dt in 0..pt {
                    for df in 0..pf {
                        let (tt, ff) = (it * pt + dt, jf * pf + df);
                        index.push(if tt < t && ff < f {
                            b * tf + tt * f + ff
                        } else {
                            pad_index
                        });
                    }
                }
            }
        }
    }
    let rows = batch * grid.len();
    let patches = tape.gather(src, index, vec![rows, pt * pf])?;
    let e = tape.matmul(patches, p.var("tokenizer.weight")?)?;
    let e = tape.add_row(e, p.var("tokenizer.bias")?)?;
    let (gamma, beta) = (p.var("tokenizer.bn.gamma")?, p.var("tokenizer.bn.beta")?);
    let bn = match mode {
        BnMode::Train => tape.batch_norm(e, gamma, beta, None, cfg.norm_eps)?,
        BnMode::Eval => {
            let m = p.params().require("tokenizer.bn.running_mean")?;
            let v = p.params().require("tokenizer.bn.running_var")?;
            tape.batch_norm(e, gamma, beta, Some((m.data(), v.data())), cfg.norm_eps)?
        }
    };
    let act = tape.gelu(bn);
    let pe = positional_encoding(grid.len(), cfg.token_dim);
    let mut tiled = Vec::with_capacity(rows * cfg.token_dim);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(vec![rows, cfg.token_dim], tiled)?);
    Ok((tape.add(act, pe)?, bn, grid))
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{prefix}.weight"))?)?;
    Ok(tape.add_row(y, p.var(&format!("{prefix}.bias"))?)?)
}

/// Prepends the class token and runs the pre-norm blocks.
///
/// `z` is `[batch*L, D]`. Returns the normalized class-token state `h`
/// (`[batch, D]`) and the token states (`[batch*L, D]`, class token removed).
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    z: Var,
    batch: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let d = cfg.token_dim;
    let rows = tape.shape(z)[0];
    if tape.shape(z).len() != 2 || tape.shape(z)[1] != d || batch == 0 || !rows.is_multiple_of(batch) {
        return Err(ModelError::Input {
            got: tape.shape(z).to_vec(),
            want: format!("[{batch} * L, {d}]"),
        });
    }
    let l = rows / batch;
    let seq = l + 1;
    let with_cls = tape.concat(&[p.var("tokenizer.cls")?, z])?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..l).map(move |i| 1 + b * l + i)))
        .collect();
    let mut x = tape.select_rows(with_cls, &order)?;
    let eps = cfg.norm_eps;
    for i in 0..cfg.layers {
        let pre = format!("encoder.layer{i}");
        let n1 = tape.layer_norm(
            x,
            p.var(&format!("{pre}.ln1.gamma"))?,
            p.var(&format!("{pre}.ln1.beta"))?,
            eps,
        )?;
        let qkv = linear(tape, p, n1, &format!("{pre}.attn.qkv"))?;
        let a = tape.attention(qkv, batch, seq, cfg.heads, causal)?;
        let o = linear(tape, p, a, &format!("{pre}.attn.out"))?;
        x = tape.add(x, o)?;
        let n2 = tape.layer_norm(
            x,
            p.var(&format!("{pre}.ln2.gamma"))?,
            p.var(&format!("{pre}.ln2.beta"))?,
            eps,
        )?;
        let m = linear(tape, p, n2, &format!("{pre}.mlp.fc1"))?;
        let m = tape.gelu(m);
        let m = linear(tape, p, m, &format!("{pre}.mlp.fc2"))?;
        x = tape.add(x, m)?;
    }
    let out = tape.layer_norm(
        x,
        p.var("encoder.norm.gamma")?,
        p.var("encoder.norm.beta")?,
        eps,
    )?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let tok_rows: Vec<usize> = (0..batch)
        .flat_map(|b| (1..seq).map(move |i| b * seq + i))
        .collect();
    let h = tape.select_rows(out, &cls_rows)?;
    let states = tape.select_rows(out, &tok_rows)?;
    Ok((h, states))
}

/// Affine head: `[B, D] -> [B, K]` logits.
pub fn classify(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let w = p.weight(
        tape,
        "head.weight",
        cfg.adapter_alpha / cfg.adapter_rank as f64,
    )?;
    let z = tape.matmul(h, w)?;
    Ok(tape.add_row(z, p.var("head.bias")?)?)
}

/// Full pipeline from normalized input to logits.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub x_hat: Var,
    pub tokens: Var,
    pub bn: Var,
    pub h: Var,
    pub states: Var,
    pub logits: Var,
    pub grid: TokenGrid,
    pub batch: usize,
}

impl Forward {
    pub fn run(
        tape: &mut Tape,
        p: &Bound,
        cfg: &ModelConfig,
        x: Var,
        mode: BnMode,
    ) -> Result<Self> {
        let batch = tape.shape(x)[0];
        let x_hat = dae_forward(tape, p, cfg, x)?;
        let (tokens, bn, grid) = tokenize(tape, p, cfg, x_hat, mode)?;
        let (h, states) = encode(tape, p, cfg, tokens, batch, cfg.causal)?;
        let logits = classify(tape, p, cfg, h)?;
        Ok(Self {
            x_hat,
            tokens,
            bn,
            h,
            states,
            logits,
            grid,
            batch,
        })
    }

    /// Folds this pass's batch statistics into the running averages.
    pub fn update_running_stats(
        &self,
        tape: &Tape,
        params: &mut ParamSet,
        momentum: f64,
    ) -> Result<()> {
        update_running_stats(tape, self.bn, params, momentum)
    }
}

/// `running = m * running + (1 - m) * batch` for the batch-norm node `bn`;
/// a no-op when `bn` ran in evaluation mode.
pub fn update_running_stats(
    tape: &Tape,
    bn: Var,
    params: &mut ParamSet,
    momentum: f64,
) -> Result<()> {
    let Some((mean, var)) = tape.batch_norm_stats(bn) else {
        return Ok(());
    };
    for (name, stat) in [
        ("tokenizer.bn.running_mean", mean),
        ("tokenizer.bn.running_var", var),
    ] {
        let t = params
            .get_mut(name)
            .ok_or_else(|| ModelError::Missing(name.to_string()))?;
        for (r, s) in t.data_mut().iter_mut().zip(stat) {
            *r = momentum * *r + (1.0 - momentum) * s;
        }
    }
    Ok(())
}

/// Inference logits for a normalized `[B, 1, T, F]` batch.
pub fn predict_logits(params: &ParamSet, cfg: &ModelConfig, x: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, |_| false);
    let xv = tape.constant(x);
    let fwd = Forward::run(&mut tape, &bound, cfg, xv, BnMode::Eval)?;
    Ok(tape.value(fwd.logits).clone())
}
