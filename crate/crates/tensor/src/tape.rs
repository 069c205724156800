//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its value. Nodes are created in a valid
//! topological order, so `backward` walks the tape once from the loss down to
//! the first node. Gradients are accumulated in creation order, which makes
//! the result deterministic for identical inputs.

use crate::conv::{conv2d_adjoint, conv2d_kernel_grad, conv2d_same};
use crate::error::{invalid, Result, TensorError};
use crate::svd::svd;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
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
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Log(Var),
    ClampMin(Var, f64),
    SoftThreshold {
        u: Var,
        lambda: Var,
        one_sided: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
    },
    Conv2dAdjoint {
        y: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SingularValues {
        a: Var,
        u: Tensor,
        v: Tensor,
    },
    VecColumns(Var),
    AssembleBank {
        parts: Vec<Var>,
        rows: usize,
        cols: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by [`Tape::batch_norm`], per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, suitable for running estimates.
    pub var: Vec<f64>,
}

/// Recorded computation. Single-threaded; one tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `[N, C, rest...]` split into `(N, C, prod(rest))`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(op, format!("expected [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn pool_bins(extent: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (i * extent / out, ((i + 1) * extent).div_ceil(out)))
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Elementwise square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(v) = t.data().iter().find(|v| **v < 0.0) {
            return Err(invalid("sqrt", format!("negative input {v}")));
        }
        let value = t.map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    /// Elementwise natural logarithm of positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(v) = t.data().iter().find(|v| **v <= 0.0) {
            return Err(invalid("log", format!("non-positive input {v}")));
        }
        let value = t.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    /// `max(a, lo)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let value = self.value(a).map(|v| v.max(lo));
        let rg = self.rg(&[a]);
        self.push(value, Op::ClampMin(a, lo), rg)
    }

    /// Frobenius norm `sqrt(sum(a^2))`.
    pub fn frobenius(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Soft thresholding with one threshold per channel (axis 1).
    ///
    /// Two-sided: `sign(u) * max(|u| - lambda, 0)`. One-sided:
    /// `max(u - lambda, 0)`. At the kinks the zero subgradient is used.
    pub fn soft_threshold(&mut self, u: Var, lambda: Var, one_sided: bool) -> Result<Var> {
        let (n, c, inner) = channel_layout("soft_threshold", self.shape(u))?;
        let lam = self.value(lambda);
        if lam.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "soft_threshold",
                expected: vec![c],
                got: lam.shape().to_vec(),
            });
        }
        if let Some(&neg) = lam.data().iter().find(|v| **v < 0.0) {
            return Err(TensorError::NegativeThreshold(neg));
        }
        let ut = self.value(u);
        let mut out = vec![0.0; ut.len()];
        for s in 0..n {
            for ch in 0..c {
                let l = lam.data()[ch];
                let base = (s * c + ch) * inner;
                for (o, &x) in out[base..base + inner].iter_mut().zip(&ut.data()[base..base + inner]) {
                    *o = soft_threshold_scalar(x, l, one_sided);
                }
            }
        }
        let value = Tensor::new(ut.shape().to_vec(), out)?;
        let rg = self.rg(&[u, lambda]);
        Ok(self.push(value, Op::SoftThreshold { u, lambda, one_sided }, rg))
    }

    /// Same-padded cross-correlation, see [`crate::conv::conv2d_same`].
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = conv2d_same(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w }, rg))
    }

    /// Adjoint of [`Tape::conv2d`] in its image argument.
    pub fn conv2d_adjoint(&mut self, y: Var, w: Var) -> Result<Var> {
        let value = conv2d_adjoint(self.value(y), self.value(w))?;
        let rg = self.rg(&[y, w]);
        Ok(self.push(value, Op::Conv2dAdjoint { y, w }, rg))
    }

    /// Training-mode batch normalisation over every axis but the channel axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = channel_layout("batch_norm", self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    expected: vec![c],
                    got: self.shape(p).to_vec(),
                });
            }
        }
        let m = (n * inner) as f64;
        if n * inner < 2 {
            return Err(invalid("batch_norm", "needs at least two values per channel"));
        }
        let xt = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..n {
                acc += xt[(s * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
            mean[ch] = acc / m;
            let mut sq = 0.0;
            for s in 0..n {
                for v in &xt[(s * c + ch) * inner..][..inner] {
                    sq += (v - mean[ch]) * (v - mean[ch]);
                }
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for k in base..base + inner {
                    xhat[k] = (xt[k] - mean[ch]) * inv_std[ch];
                    out[k] = g[ch] * xhat[k] + b[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * m / (m - 1.0)).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Evaluation-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, inner) = channel_layout("batch_norm_eval", self.shape(x))?;
        if mean.len() != c || var.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(invalid("batch_norm_eval", format!("statistics must have {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xt = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xt.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for k in base..base + inner {
                    out[k] = g[ch] * (xt[k] - mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    /// Bin `i` covers `[floor(i H / out), ceil((i + 1) H / out))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x)[..] else {
            return Err(invalid("adaptive_avg_pool", "expected [N, C, H, W]"));
        };
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(invalid("adaptive_avg_pool", format!("cannot pool {h}x{w} to {out_h}x{out_w}")));
        }
        let (rb, cb) = (pool_bins(h, out_h), pool_bins(w, out_w));
        let xt = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in xt.chunks(h * w) {
            for &(r0, r1) in &rb {
                for &(c0, c1) in &cb {
                    let mut acc = 0.0;
                    for i in r0..r1 {
                        acc += plane[i * w + c0..i * w + c1].iter().sum::<f64>();
                    }
                    out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AdaptiveAvgPool { x }, rg))
    }

    /// `x[N, D] + b[D]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(b) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: vec![d],
                got: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new([n, d], out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n || n == 0 {
            return Err(invalid("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let lt = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lt[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += max + z.ln() - row[label];
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Singular values of a square matrix as a 1-D tensor, nonincreasing.
    /// The backward pass uses `dA = sum_i g_i u_i v_i^T`.
    pub fn singular_values(&mut self, a: Var) -> Result<Var> {
        let dec = svd(self.value(a))?;
        let d = dec.values.len();
        let value = Tensor::new([d], dec.values)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SingularValues { a, u: dec.u, v: dec.v }, rg))
    }

    /// `[C, n, m] -> [n*m, C]` where column `c` is the column-major
    /// vectorisation of slice `c`.
    pub fn vec_columns(&mut self, basis: Var) -> Result<Var> {
        let [c, n, m] = self.shape(basis)[..] else {
            return Err(invalid("vec_columns", format!("expected [C, n, m], got {:?}", self.shape(basis))));
        };
        let src = self.value(basis).data();
        let mut out = vec![0.0; n * m * c];
        for ch in 0..c {
            for j in 0..m {
                for i in 0..n {
                    out[(j * n + i) * c + ch] = src[(ch * n + i) * m + j];
                }
            }
        }
        let value = Tensor::new([n * m, c], out)?;
        let rg = self.rg(&[basis]);
        Ok(self.push(value, Op::VecColumns(basis), rg))
    }

    /// Inverse of [`Tape::vec_columns`] for a list of `[n*m, C]` parts,
    /// stacked into a `[P, C, n, m]` filter bank in list order.
    pub fn assemble_bank(&mut self, parts: &[Var], rows: usize, cols: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("assemble_bank", "no parts"));
        };
        let [nm, c] = self.shape(first)[..] else {
            return Err(invalid("assemble_bank", "parts must be matrices"));
        };
        if nm != rows * cols {
            return Err(invalid("assemble_bank", format!("{nm} rows cannot hold {rows}x{cols} filters")));
        }
        let mut out = Vec::with_capacity(parts.len() * nm * c);
        for &p in parts {
            same_shape("assemble_bank", self.value(first), self.value(p))?;
            let src = self.value(p).data();
            for ch in 0..c {
                for i in 0..rows {
                    for j in 0..cols {
                        out.push(src[(j * rows + i) * c + ch]);
                    }
                }
            }
        }
        let value = Tensor::new([parts.len(), c, rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::AssembleBank {
                parts: parts.to_vec(),
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            // intermediate gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (r, k) = at.dims2()?;
                let (_, c) = bt.dims2()?;
                if self.wants(*a) {
                    // dA = G B^T
                    let b_t = bt.transpose()?;
                    let mut out = vec![0.0; r * k];
                    matmul_into(g.data(), b_t.data(), &mut out, r, c, k);
                    self.accumulate(grads, *a, Tensor::new([r, k], out)?)?;
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let a_t = at.transpose()?;
                    let mut out = vec![0.0; k * c];
                    matmul_into(a_t.data(), g.data(), &mut out, k, r, c);
                    self.accumulate(grads, *b, Tensor::new([k, c], out)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape)?)?;
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv))?;
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item()? / t.len().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), gv))?;
            }
            Op::Sqrt(a) => {
                let mut out = g.clone();
                for (o, y) in out.data_mut().iter_mut().zip(node.value.data()) {
                    *o = if *y > 0.0 { *o * 0.5 / y } else { 0.0 };
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::Log(a) => {
                let mut out = g.clone();
                for (o, x) in out.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *o /= x;
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::ClampMin(a, lo) => {
                let mut out = g.clone();
                for (o, x) in out.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *x < *lo {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::SoftThreshold { u, lambda, one_sided } => {
                let ut = self.value(*u);
                let (n, c, inner) = channel_layout("soft_threshold", ut.shape())?;
                let lam = self.value(*lambda).data();
                let mut du = vec![0.0; ut.len()];
                let mut dl = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            let x = ut.data()[k];
                            let l = lam[ch];
                            let slope = if *one_sided {
                                if x > l {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else if x.abs() > l {
                                1.0
                            } else {
                                0.0
                            };
                            du[k] = g.data()[k] * slope;
                            // d/dlambda of sign(x)(|x| - l) is -sign(x)
                            let dlam = if *one_sided { -slope } else { -slope * x.signum() };
                            dl[ch] += g.data()[k] * dlam;
                        }
                    }
                }
                if self.wants(*u) {
                    self.accumulate(grads, *u, Tensor::new(ut.shape().to_vec(), du)?)?;
                }
                if self.wants(*lambda) {
                    self.accumulate(grads, *lambda, Tensor::new([c], dl)?)?;
                }
            }
            Op::Conv2d { x, w } => {
                let wt = self.value(*w);
                if self.wants(*x) {
                    self.accumulate(grads, *x, conv2d_adjoint(g, wt)?)?;
                }
                if self.wants(*w) {
                    let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
                    self.accumulate(grads, *w, conv2d_kernel_grad(self.value(*x), g, kh, kw)?)?;
                }
            }
            Op::Conv2dAdjoint { y, w } => {
                let wt = self.value(*w);
                if self.wants(*y) {
                    self.accumulate(grads, *y, conv2d_same(g, wt)?)?;
                }
                if self.wants(*w) {
                    let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
                    self.accumulate(grads, *w, conv2d_kernel_grad(g, self.value(*y), kh, kw)?)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = channel_layout("batch_norm", self.shape(*x))?;
                let m = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            let k1 = gam[ch] * dbeta[ch] / m;
                            let k2 = gam[ch] * dgamma[ch] / m;
                            for k in base..base + inner {
                                dx[k] = inv_std[ch] * (gam[ch] * gd[k] - k1 - xhat[k] * k2);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new([c], dgamma)?)?;
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, Tensor::new([c], dbeta)?)?;
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, inner) = channel_layout("batch_norm_eval", self.shape(*x))?;
                let (xt, gam, gd) = (self.value(*x).data(), self.value(*gamma).data(), g.data());
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            dx[k] = gd[k] * gam[ch] * inv_std[ch];
                            dgamma[ch] += gd[k] * (xt[k] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new([c], dgamma)?)?;
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, Tensor::new([c], dbeta)?)?;
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let [_, _, h, w] = self.shape(*x)[..] else { unreachable!() };
                let [_, _, oh, ow] = node.value.shape()[..] else { unreachable!() };
                let (rb, cb) = (pool_bins(h, oh), pool_bins(w, ow));
                let mut dx = vec![0.0; self.value(*x).len()];
                for (plane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for (bi, &(r0, r1)) in rb.iter().enumerate() {
                        for (bj, &(c0, c1)) in cb.iter().enumerate() {
                            let share = gplane[bi * ow + bj] / ((r1 - r0) * (c1 - c0)) as f64;
                            for i in r0..r1 {
                                for v in &mut plane[i * w + c0..i * w + c1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*b) {
                    let d = self.shape(*b)[0];
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new([d], db)?)?;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = g.item()? / n as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new([n, k], d)?)?;
            }
            Op::SingularValues { a, u, v } => {
                let dec = crate::svd::Svd {
                    u: u.clone(),
                    values: node.value.data().to_vec(),
                    v: v.clone(),
                };
                self.accumulate(grads, *a, dec.weighted_outer(g.data()))?;
            }
            Op::VecColumns(basis) => {
                let [c, n, m] = self.shape(*basis)[..] else { unreachable!() };
                let gd = g.data();
                let mut out = vec![0.0; c * n * m];
                for ch in 0..c {
                    for j in 0..m {
                        for i in 0..n {
                            out[(ch * n + i) * m + j] = gd[(j * n + i) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *basis, Tensor::new([c, n, m], out)?)?;
            }
            Op::AssembleBank { parts, rows, cols } => {
                let c = node.value.shape()[1];
                let block = c * rows * cols;
                for (p, gp) in parts.iter().zip(g.data().chunks(block)) {
                    if !self.wants(*p) {
                        continue;
                    }
                    let mut out = vec![0.0; block];
                    for ch in 0..c {
                        for i in 0..*rows {
                            for j in 0..*cols {
                                out[(j * rows + i) * c + ch] = gp[(ch * rows + i) * cols + j];
                            }
                        }
                    }
                    self.accumulate(grads, *p, Tensor::new([rows * cols, c], out)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Scalar soft threshold used by the recorded op.
pub fn soft_threshold_scalar(x: f64, lambda: f64, one_sided: bool) -> f64 {
    if one_sided {
        (x - lambda).max(0.0)
    } else {
        x.signum() * (x.abs() - lambda).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([3], vec![1.0, -2.0, 4.0]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gives_x() {
        let mut t = Tape::new();
        let xv = Tensor::new([2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn non_scalar_and_detached_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([2]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
        let c = t.constant(Tensor::ones([2]));
        let s = t.sum(c);
        assert!(matches!(t.backward(s), Err(TensorError::Detached)));
    }

    #[test]
    fn soft_threshold_values() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::new([1, 3], vec![3.0, -3.0, 0.5]).unwrap());
        let lam = t.constant(Tensor::ones([3]));
        let two = t.soft_threshold(u, lam, false).unwrap();
        assert_eq!(t.value(two).data(), &[2.0, -2.0, 0.0]);
        let one = t.soft_threshold(u, lam, true).unwrap();
        assert_eq!(t.value(one).data(), &[2.0, 0.0, 0.0]);
        let neg = t.constant(Tensor::full([3], -0.1));
        assert!(matches!(t.soft_threshold(u, neg, true), Err(TensorError::NegativeThreshold(_))));
    }

    #[test]
    fn vec_columns_order_is_column_major() {
        let mut t = Tape::new();
        let b = t.constant(Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = t.vec_columns(b).unwrap();
        assert_eq!(t.value(v).data(), &[1.0, 3.0, 2.0, 4.0]);
        let bank = t.assemble_bank(&[v, v], 2, 2).unwrap();
        assert_eq!(t.value(bank).shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.value(bank).data()[..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn adaptive_pool_exact_bins() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 1, 2, 4], (0..8).map(f64::from).collect()).unwrap());
        let p = t.adaptive_avg_pool(x, 1, 2).unwrap();
        assert_eq!(t.value(p).data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros([2, 10]));
        let ce = t.cross_entropy(l, &[3, 7]).unwrap();
        assert!((t.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-14);
        assert!(t.cross_entropy(l, &[3, 10]).is_err());
    }
}
