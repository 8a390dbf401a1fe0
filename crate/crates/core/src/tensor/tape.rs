use super::kernels::{self, col2im, conv_out, gemm, im2col, ConvGeom};
use super::{dims2, dims4, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the output image seen as the input of the adjoint conv.
        geom: ConvGeom,
        batch: usize,
        cin: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        training: bool,
    },
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed primitives, in execution (hence topological) order.
///
/// A tape is single-writer. Each training replica owns its own tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Primitive kind that produced `v` (e.g. `"matmul"`).
    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Every node produced by primitive `kind`, in recording order.
    pub fn nodes_of_kind(&self, kind: &str) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(Var)
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("map shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// `a[.., j] + b[j]`: adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = last_dim(ta);
        if tb.shape() != [d] {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), needs))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[n,k] x [m,k]^T -> [n,m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims2("matmul", ta)?;
        let (r, c) = dims2("matmul", tb)?;
        let (k2, m, bs) = if trans_b {
            (c, r, (1, c))
        } else {
            (r, c, (c, 1))
        };
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            ta.data(),
            (k, 1),
            tb.data(),
            bs,
            &mut out,
            (m, 1),
            0.0,
        );
        let needs = self.needs(&[a, b]);
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, needs))
    }

    /// NCHW convolution: `x [B,Cin,H,W]`, `w [Cout,Cin,kh,kw]`, optional `b [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [batch, cin, h, wd] = dims4("conv2d", tx)?;
        let [cout, cin2, kh, kw] = dims4("conv2d", tw)?;
        if cin != cin2 {
            return Err(shape_err("conv2d", tx, tw));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d", tw, self.value(b)));
            }
        }
        let (Some(out_h), Some(out_w)) =
            (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad))
        else {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        };
        let geom = ConvGeom {
            channels: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; batch * cout * ncols];
        let img = cin * h * wd;
        for bi in 0..batch {
            im2col(&tx.data()[bi * img..(bi + 1) * img], &geom, &mut cols);
            let dst = &mut out[bi * cout * ncols..(bi + 1) * cout * ncols];
            gemm(
                cout,
                rows,
                ncols,
                tw.data(),
                (rows, 1),
                &cols,
                (ncols, 1),
                dst,
                (ncols, 1),
                0.0,
            );
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, bv) in dst.chunks_mut(ncols).zip(bias) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs = self.needs(&inputs);
        let out = Tensor::new(vec![batch, cout, out_h, out_w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            },
            needs,
        ))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel/stride/pad. `x [B,Cin,Hi,Wi]`, `w [Cin,Cout,kh,kw]`. The output
    /// size is given explicitly; it must map back to `Hi x Wi` under the
    /// forward conv geometry (this fixes the output padding).
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [batch, cin, hi, wi] = dims4("conv_transpose2d", tx)?;
        let [cin2, cout, kh, kw] = dims4("conv_transpose2d", tw)?;
        if cin != cin2 {
            return Err(shape_err("conv_transpose2d", tx, tw));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv_transpose2d", tw, self.value(b)));
            }
        }
        if conv_out(out_h, kh, stride, pad) != Some(hi)
            || conv_out(out_w, kw, stride, pad) != Some(wi)
        {
            return Err(invalid(
                "conv_transpose2d",
                format!("output {out_h}x{out_w} incompatible with input {hi}x{wi}"),
            ));
        }
        let geom = ConvGeom {
            channels: cout,
            h: out_h,
            w: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: hi,
            out_w: wi,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let img = cout * out_h * out_w;
        let mut out = vec![0.0; batch * img];
        for bi in 0..batch {
            let xb = &tx.data()[bi * cin * ncols..(bi + 1) * cin * ncols];
            // cols[rows, ncols] = w^T [rows, cin] * x_b [cin, ncols]
            gemm(
                rows,
                cin,
                ncols,
                tw.data(),
                (1, rows),
                xb,
                (ncols, 1),
                &mut cols,
                (ncols, 1),
                0.0,
            );
            let dst = &mut out[bi * img..(bi + 1) * img];
            col2im(&cols, &geom, dst);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, bv) in dst.chunks_mut(out_h * out_w).zip(bias) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs = self.needs(&inputs);
        let out = Tensor::new(vec![batch, cout, out_h, out_w], out)?;
        Ok(self.push(
            out,
            Op::ConvT2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            },
            needs,
        ))
    }

    /// Normalizes over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = last_dim(tx);
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", tx, self.value(p)));
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Batch norm over the rows of `x [N, D]` (one channel per column).
    ///
    /// With `running = None` the batch statistics are used (training) and can
    /// be read back through [`Tape::batch_norm_stats`]; otherwise the given
    /// `(mean, var)` are used as fixed statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = dims2("batch_norm", tx)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("batch_norm", tx, self.value(p)));
            }
        }
        let (mean, var, training) = match running {
            None => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for row in tx.data().chunks(d) {
                    for j in 0..d {
                        mean[j] += row[j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for row in tx.data().chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return Err(invalid("batch_norm", "running statistics width mismatch"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for (i, row) in tx.data().chunks(d).enumerate() {
            for j in 0..d {
                let xh = (row[j] - mean[j]) * rstd[j];
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + bt[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_mean: mean,
                batch_var: var,
                training,
            },
            needs,
        ))
    }

    /// Batch statistics `(mean, biased var)` computed by a training-mode batch norm.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                training: true,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, kernels::gelu);
        let needs = self.needs(&[x]);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::abs);
        let needs = self.needs(&[x]);
        self.push(out, Op::Abs(x), needs)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = last_dim(tx);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = last_dim(tx);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::LogSoftmax(x), needs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Covers slicing,
    /// permutation and row selection.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(invalid(
                "gather",
                format!("shape {shape:?} vs {} indices", index.len()),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= tx.numel()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of bounds for {:?}", tx.shape()),
            ));
        }
        let data = index.iter().map(|&i| tx.data()[i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, index }, needs))
    }

    /// Selects whole rows of a rank-2 tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, d) = dims2("select_rows", self.value(x))?;
        let index = rows.iter().flat_map(|r| (r * d)..(r * d + d)).collect();
        self.gather(x, index, vec![rows.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat", "no inputs"));
        };
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.value(*first), t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), needs))
    }

    /// Multi-head scaled dot-product self-attention over packed projections.
    ///
    /// `qkv` is `[batch*seq, 3*d]` with queries, keys and values in column
    /// blocks; the output is `[batch*seq, d]`. With `causal`, position 0 (the
    /// class token) attends to every position while position `i >= 1`
    /// attends only to positions `1..=i`.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let tq = self.value(qkv);
        let (rows, w3) = dims2("attention", tq)?;
        if rows != batch * seq || w3 % 3 != 0 || heads == 0 || (w3 / 3) % heads != 0 {
            return Err(invalid(
                "attention",
                format!(
                    "qkv {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                    tq.shape()
                ),
            ));
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = tq.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &src[(b * seq + i) * w3 + h * dh..][..dh];
                    let (lo, hi) = attend_range(i, seq, causal);
                    let mut max = f64::NEG_INFINITY;
                    for j in lo..hi {
                        let krow = &src[(b * seq + j) * w3 + d + h * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[lo..hi] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in lo..hi {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vrow = &src[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                        for c in 0..dh {
                            orow[c] += p * vrow[c];
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                causal,
                probs,
            },
            needs,
        ))
    }

    /// Attention probabilities `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += s * v);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = out.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC * B^T  (or dC * B when B was transposed)
                    let bs = if *trans_b { (k, 1) } else { (1, m) };
                    gemm(n, m, k, g, (m, 1), tb.data(), bs, ga, (k, 1), 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // dB [m,k] = dC^T * A
                        gemm(m, n, k, g, (1, m), ta.data(), (k, 1), gb, (k, 1), 1.0);
                    } else {
                        // dB [k,m] = A^T * dC
                        gemm(k, n, m, ta.data(), (1, k), g, (m, 1), gb, (m, 1), 1.0);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.h * geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![0.0; rows * ncols];
                if let Some(gw) = self.acc(grads, *w) {
                    for bi in 0..*batch {
                        im2col(&xd[bi * img..(bi + 1) * img], geom, &mut cols);
                        let gout = &g[bi * cout * ncols..(bi + 1) * cout * ncols];
                        gemm(
                            *cout,
                            ncols,
                            rows,
                            gout,
                            (ncols, 1),
                            &cols,
                            (1, ncols),
                            gw,
                            (rows, 1),
                            1.0,
                        );
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..*batch {
                        let gout = &g[bi * cout * ncols..(bi + 1) * cout * ncols];
                        gemm(
                            rows,
                            *cout,
                            ncols,
                            wd,
                            (1, rows),
                            gout,
                            (ncols, 1),
                            &mut cols,
                            (ncols, 1),
                            0.0,
                        );
                        col2im(&cols, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for (ci, chunk) in g.chunks(ncols).enumerate() {
                            gb[ci % cout] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.h * geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![0.0; rows * ncols];
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                if need_w || need_x {
                    for bi in 0..*batch {
                        im2col(&g[bi * img..(bi + 1) * img], geom, &mut cols);
                        let xb = &xd[bi * cin * ncols..(bi + 1) * cin * ncols];
                        if let Some(gw) = self.acc(grads, *w) {
                            // dW [cin, rows] += x_b [cin, ncols] * cols^T
                            gemm(
                                *cin,
                                ncols,
                                rows,
                                xb,
                                (ncols, 1),
                                &cols,
                                (1, ncols),
                                gw,
                                (rows, 1),
                                1.0,
                            );
                        }
                        if let Some(gx) = self.acc(grads, *x) {
                            let dst = &mut gx[bi * cin * ncols..(bi + 1) * cin * ncols];
                            gemm(
                                *cin,
                                rows,
                                ncols,
                                wd,
                                (rows, 1),
                                &cols,
                                (ncols, 1),
                                dst,
                                (ncols, 1),
                                1.0,
                            );
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        let plane = geom.h * geom.w;
                        let cout = geom.channels;
                        for (ci, chunk) in g.chunks(plane).enumerate() {
                            gb[ci % cout] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gbeta) = self.acc(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gbeta, gr);
                    }
                }
                let gamma_v = self.value(*gamma).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxh = vec![0.0; d];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gamma_v[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
                ..
            } => {
                let d = rstd.len();
                let n = xhat.len() / d;
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gbeta) = self.acc(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gbeta, gr);
                    }
                }
                let gamma_v = self.value(*gamma).data();
                if let Some(gx) = self.acc(grads, *x) {
                    if *training {
                        let mut m1 = vec![0.0; d];
                        let mut m2 = vec![0.0; d];
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let dxh = gr[j] * gamma_v[j];
                                m1[j] += dxh;
                                m2[j] += dxh * xr[j];
                            }
                        }
                        for j in 0..d {
                            m1[j] /= n as f64;
                            m2[j] /= n as f64;
                        }
                        for (i, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                let dxh = gr[j] * gamma_v[j];
                                gx[i * d + j] += rstd[j] * (dxh - m1[j] - xr[j] * m2[j]);
                            }
                        }
                    } else {
                        for (i, gr) in g.chunks(d).enumerate() {
                            for j in 0..d {
                                gx[i * d + j] += gr[j] * gamma_v[j] * rstd[j];
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += g[i] * s;
                    }
                }
            }
            Op::Softmax(x) => {
                let d = last_dim(out);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gr, yr)) in g.chunks(d).zip(out.data().chunks(d)).enumerate() {
                        let dot = dot(gr, yr);
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = last_dim(out);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gr, yr)) in g.chunks(d).zip(out.data().chunks(d)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            gx[r * d + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, &src) in g.iter().zip(index) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                causal,
                probs,
            } => {
                let src = self.value(*qkv).data();
                let Some(gq) = self.acc(grads, *qkv) else {
                    return;
                };
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = out.shape()[1];
                let w3 = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let (lo, hi) = attend_range(i, seq, *causal);
                            let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                            let grow = &g[(b * seq + i) * d + h * dh..][..dh];
                            let mut acc = 0.0;
                            for j in lo..hi {
                                let vrow = &src[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                                dp[j] = dot(grow, vrow);
                                acc += dp[j] * prow[j];
                                let gv = &mut gq[(b * seq + j) * w3 + 2 * d + h * dh..][..dh];
                                for c in 0..dh {
                                    gv[c] += prow[j] * grow[c];
                                }
                            }
                            let qoff = (b * seq + i) * w3 + h * dh;
                            for j in lo..hi {
                                let ds = prow[j] * (dp[j] - acc) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (b * seq + j) * w3 + d + h * dh;
                                for c in 0..dh {
                                    gq[qoff + c] += ds * src[koff + c];
                                    gq[koff + c] += ds * src[qoff + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn attend_range(i: usize, seq: usize, causal: bool) -> (usize, usize) {
    if causal && i > 0 {
        (1, i + 1)
    } else {
        (0, seq)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
