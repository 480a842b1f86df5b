use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Per-channel statistics of one batch-norm call in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalisation source for [`Graph::batchnorm1d`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// The nine per-layer tensors of a GRU cell, in the order
/// `U_z, U_r, U_h, W_z, W_r, W_h, b_z, b_r, b_h`.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub u: [Var; 3],
    pub w: [Var; 3],
    pub b: [Var; 3],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Act(Var, Activation),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    StackTime(Vec<Var>),
    Concat(Vec<Var>),
    Gru {
        x: Var,
        s: Var,
        p: GruVars,
        z: Vec<f64>,
        r: Vec<f64>,
        h: Vec<f64>,
        q: Vec<f64>,
    },
    Scores {
        keys: Var,
        query: Var,
        scale: f64,
    },
    WeightedSum {
        weights: Var,
        values: Var,
    },
    TimeMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape for one forward pass. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that depends on a
/// trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
}

fn expect_len(op: &'static str, t: &Tensor, n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::shape(op, format!("expected {n} values, got {:?}", t.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        expect_len("add_bias", tb, n)?;
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine(x, scale), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut c = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let t = Tensor::new(vec![m, n], c)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.len() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// Cross-correlation along time of `x[batch, T, C_in]` with
    /// `w[k, C_in, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (batch, t_in, c_in) = dims3("conv1d", self.value(x))?;
        let (kernel, wc_in, c_out) = dims3("conv1d", self.value(w))?;
        if wc_in != c_in {
            return Err(Error::shape("conv1d", format!("input has {c_in} channels, kernel expects {wc_in}")));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::shape("conv1d", "stride and kernel must be positive"));
        }
        if let Some(b) = bias {
            expect_len("conv1d bias", self.value(b), c_out)?;
        }
        let (t_out, pad_left) = match padding {
            Padding::Same => {
                let t_out = t_in.div_ceil(stride);
                let total = ((t_out.saturating_sub(1)) * stride + kernel).saturating_sub(t_in);
                (t_out, total / 2)
            }
            Padding::Valid => {
                if kernel > t_in {
                    return Err(Error::shape("conv1d", format!("kernel {kernel} longer than input {t_in}")));
                }
                ((t_in - kernel) / stride + 1, 0)
            }
        };
        let geom = ConvGeom {
            batch,
            t_in,
            t_out,
            c_in,
            c_out,
            kernel,
            stride,
            pad_left,
        };
        let y = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![batch, t_out, c_out], y)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(t, Op::Conv1d { x, w, b: bias, geom }, &parents))
    }

    /// Batch normalisation over every axis but the last. In train mode the
    /// statistics of this batch are returned so the caller can update its
    /// running estimates.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        let c = tx.last_dim();
        expect_len("batchnorm gamma", self.value(gamma), c)?;
        expect_len("batchnorm beta", self.value(beta), c)?;
        let rows = tx.len() / c.max(1);
        let batch = tx.shape().first().copied().unwrap_or(0);
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if batch < 2 {
                    return Err(Error::DegenerateBatch(batch));
                }
                let mut mean = vec![0.0; c];
                for row in tx.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in tx.data().chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm running stats", format!("expected {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = tx.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let var_out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: matches!(mode, NormMode::Train),
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. With `rng` absent
    /// (eval mode) or `p == 0` this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} not in [0, 1)")));
        }
        let Some(rng) = rng.filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, classes) = dims2("softmax_cross_entropy", self.value(logits))?;
        if targets.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{batch} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::IndexOutOfRange { index: bad, classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, (&target, logit_row)) in probs
            .chunks_mut(classes)
            .zip(targets.iter().zip(self.value(logits).data().chunks(classes)))
        {
            let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += (max - logit_row[target]) + log_sum;
            softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape("mse_loss", tp, tt)?;
        let n = tp.len() as f64;
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), &[pred, target]))
    }

    /// Stack `T` tensors of shape `[B, d]` into `[B, T, d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::shape("stack_time", "no steps"))?;
        let (batch, d) = dims2("stack_time", self.value(*first))?;
        let t_len = steps.len();
        let mut out = vec![0.0; batch * t_len * d];
        for (t, s) in steps.iter().enumerate() {
            let ts = self.value(*s);
            if ts.shape() != [batch, d] {
                return Err(Error::shape("stack_time", format!("step {t} has shape {:?}", ts.shape())));
            }
            for b in 0..batch {
                out[(b * t_len + t) * d..(b * t_len + t + 1) * d].copy_from_slice(&ts.data()[b * d..(b + 1) * d]);
            }
        }
        let t = Tensor::new(vec![batch, t_len, d], out)?;
        Ok(self.push(t, Op::StackTime(steps.to_vec()), steps))
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead: Vec<usize> = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// One GRU step on a batch:
    ///
    /// ```text
    /// z   = σ(x U_z + s W_z + b_z)
    /// r   = σ(x U_r + s W_r + b_r)
    /// h   = tanh(x U_h + (s ∘ r) W_h + b_h)
    /// out = (1 - z) ∘ h + z ∘ s
    /// ```
    pub fn gru_cell(&mut self, x: Var, s: Var, p: GruVars) -> Result<Var> {
        let (batch, d_in) = dims2("gru_cell input", self.value(x))?;
        let (sb, d_h) = dims2("gru_cell state", self.value(s))?;
        if sb != batch {
            return Err(Error::shape("gru_cell", format!("input batch {batch} vs state batch {sb}")));
        }
        for u in p.u {
            if self.value(u).shape() != [d_in, d_h] {
                return Err(Error::shape("gru_cell U", format!("expected [{d_in}, {d_h}], got {:?}", self.value(u).shape())));
            }
        }
        for w in p.w {
            if self.value(w).shape() != [d_h, d_h] {
                return Err(Error::shape("gru_cell W", format!("expected [{d_h}, {d_h}], got {:?}", self.value(w).shape())));
            }
        }
        for b in p.b {
            expect_len("gru_cell bias", self.value(b), d_h)?;
        }
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let n = batch * d_h;
        let gate = |g: &Graph, ui: usize, input: &[f64], wi: usize, act: Activation| -> Vec<f64> {
            let mut a = vec![0.0; n];
            for row in a.chunks_mut(d_h) {
                row.copy_from_slice(g.value(p.b[ui]).data());
            }
            kernels::matmul_acc(xs, g.value(p.u[ui]).data(), &mut a, batch, d_in, d_h);
            kernels::matmul_acc(input, g.value(p.w[wi]).data(), &mut a, batch, d_h, d_h);
            a.iter_mut().for_each(|v| *v = act.apply(*v));
            a
        };
        let z = gate(self, 0, ss, 0, Activation::Sigmoid);
        let r = gate(self, 1, ss, 1, Activation::Sigmoid);
        let q: Vec<f64> = ss.iter().zip(&r).map(|(a, b)| a * b).collect();
        let h = gate(self, 2, &q, 2, Activation::Tanh);
        let out: Vec<f64> = (0..n).map(|i| (1.0 - z[i]) * h[i] + z[i] * ss[i]).collect();
        let t = Tensor::new(vec![batch, d_h], out)?;
        let mut parents = vec![x, s];
        parents.extend(p.u);
        parents.extend(p.w);
        parents.extend(p.b);
        Ok(self.push(t, Op::Gru { x, s, p, z, r, h, q }, &parents))
    }

    /// `out[b, t] = scale * <keys[b, t, :], query[b, :]>`
    pub fn attention_scores(&mut self, keys: Var, query: Var, scale: f64) -> Result<Var> {
        let (batch, t_len, d) = dims3("attention_scores keys", self.value(keys))?;
        if self.value(query).shape() != [batch, d] {
            return Err(Error::shape(
                "attention_scores",
                format!("query {:?} vs keys {:?}", self.value(query).shape(), [batch, t_len, d]),
            ));
        }
        let (k, q) = (self.value(keys).data(), self.value(query).data());
        let mut out = vec![0.0; batch * t_len];
        for b in 0..batch {
            let qrow = &q[b * d..(b + 1) * d];
            for t in 0..t_len {
                out[b * t_len + t] = scale * kernels::dot(&k[(b * t_len + t) * d..(b * t_len + t + 1) * d], qrow);
            }
        }
        let t = Tensor::new(vec![batch, t_len], out)?;
        Ok(self.push(t, Op::Scores { keys, query, scale }, &[keys, query]))
    }

    /// `out[b, :] = Σ_t weights[b, t] * values[b, t, :]`
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (batch, t_len, d) = dims3("weighted_sum values", self.value(values))?;
        if self.value(weights).shape() != [batch, t_len] {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} vs values {:?}", self.value(weights).shape(), [batch, t_len, d]),
            ));
        }
        let (w, v) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let orow = &mut out[b * d..(b + 1) * d];
            for t in 0..t_len {
                let wt = w[b * t_len + t];
                for (o, x) in orow.iter_mut().zip(&v[(b * t_len + t) * d..(b * t_len + t + 1) * d]) {
                    *o += wt * x;
                }
            }
        }
        let t = Tensor::new(vec![batch, d], out)?;
        Ok(self.push(t, Op::WeightedSum { weights, values }, &[weights, values]))
    }

    /// Average over the time axis: `[B, T, C] -> [B, C]`.
    pub fn time_mean(&mut self, x: Var) -> Result<Var> {
        let (batch, t_len, c) = dims3("time_mean", self.value(x))?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            let orow = &mut out[b * c..(b + 1) * c];
            for t in 0..t_len {
                for (o, v) in orow.iter_mut().zip(&xs[(b * t_len + t) * c..(b * t_len + t + 1) * c]) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= t_len as f64);
        }
        let t = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(t, Op::TimeMean(x), &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:block) => {
                if needs($v) {
                    let len = self.nodes[$v.0].value.len();
                    let $d: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d| { add_into(d, g) });
                acc!(*b, |d| { add_into(d, g) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| { add_into(d, g) });
                acc!(*b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc!(*b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc!(*x, |d| { add_into(d, g) });
                acc!(*b, |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc!(*x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g);
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                acc!(*a, |d| { kernels::matmul_grad_a(g, val(*b), d, m, k, n) });
                acc!(*b, |d| { kernels::matmul_grad_b(val(*a), g, d, m, k, n) });
            }
            Op::Act(x, kind) => {
                let y = node.value.data();
                acc!(*x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kind.derivative_from_output(y[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc!(*x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = kernels::dot(yrow, grow);
                        for i in 0..n {
                            drow[i] += yrow[i] * (grow[i] - s);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |d| {
                    d.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::Mean(x) => {
                acc!(*x, |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut dx = self.take_grad(grads, *x);
                let mut dw = self.take_grad(grads, *w);
                let mut db = b.and_then(|b| self.take_grad(grads, b));
                kernels::conv1d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_grad(grads, *x, dx);
                put_grad(grads, *w, dw);
                if let Some(b) = b {
                    put_grad(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = val(*gamma);
                acc!(*gamma, |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc!(*beta, |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                if needs(*x) {
                    acc!(*x, |d| {
                        if *train {
                            let mut sum_dxhat = vec![0.0; c];
                            let mut sum_dxhat_xhat = vec![0.0; c];
                            for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    let dxh = grow[j] * gam[j];
                                    sum_dxhat[j] += dxh;
                                    sum_dxhat_xhat[j] += dxh * xrow[j];
                                }
                            }
                            let nf = rows as f64;
                            for ((drow, grow), xrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    let dxh = grow[j] * gam[j];
                                    drow[j] += inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                                }
                            }
                        } else {
                            for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                                for j in 0..c {
                                    drow[j] += grow[j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                acc!(*x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let batch = targets.len();
                let classes = probs.len() / batch;
                acc!(*logits, |d| {
                    let s = g[0] / batch as f64;
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[b * classes + j] += s * (probs[b * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (val(*p), val(*t));
                let s = 2.0 * g[0] / vp.len() as f64;
                acc!(*p, |d| {
                    for i in 0..d.len() {
                        d[i] += s * (vp[i] - vt[i]);
                    }
                });
                acc!(*t, |d| {
                    for i in 0..d.len() {
                        d[i] -= s * (vp[i] - vt[i]);
                    }
                });
            }
            Op::StackTime(steps) => {
                let (batch, t_len, dim) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                for (t, s) in steps.iter().enumerate() {
                    acc!(*s, |d| {
                        for b in 0..batch {
                            let src = &g[(b * t_len + t) * dim..(b * t_len + t + 1) * dim];
                            add_into(&mut d[b * dim..(b + 1) * dim], src);
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    acc!(*p, |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gru { x, s, p, z, r, h, q } => self.gru_backward(*x, *s, p, z, r, h, q, g, grads),
            Op::Scores { keys, query, scale } => {
                let (batch, t_len, dim) = {
                    let s = self.nodes[keys.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let (k, qv) = (val(*keys), val(*query));
                acc!(*keys, |d| {
                    for b in 0..batch {
                        for t in 0..t_len {
                            let gs = scale * g[b * t_len + t];
                            let off = (b * t_len + t) * dim;
                            for i in 0..dim {
                                d[off + i] += gs * qv[b * dim + i];
                            }
                        }
                    }
                });
                acc!(*query, |d| {
                    for b in 0..batch {
                        for t in 0..t_len {
                            let gs = scale * g[b * t_len + t];
                            let off = (b * t_len + t) * dim;
                            for i in 0..dim {
                                d[b * dim + i] += gs * k[off + i];
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { weights, values } => {
                let (batch, t_len, dim) = {
                    let s = self.nodes[values.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let (w, v) = (val(*weights), val(*values));
                acc!(*weights, |d| {
                    for b in 0..batch {
                        for t in 0..t_len {
                            let off = (b * t_len + t) * dim;
                            d[b * t_len + t] += kernels::dot(&g[b * dim..(b + 1) * dim], &v[off..off + dim]);
                        }
                    }
                });
                acc!(*values, |d| {
                    for b in 0..batch {
                        for t in 0..t_len {
                            let wt = w[b * t_len + t];
                            let off = (b * t_len + t) * dim;
                            for i in 0..dim {
                                d[off + i] += wt * g[b * dim + i];
                            }
                        }
                    }
                });
            }
            Op::TimeMean(x) => {
                let s = self.nodes[x.0].value.shape();
                let (batch, t_len, c) = (s[0], s[1], s[2]);
                acc!(*x, |d| {
                    for b in 0..batch {
                        for t in 0..t_len {
                            for j in 0..c {
                                d[(b * t_len + t) * c + j] += g[b * c + j] / t_len as f64;
                            }
                        }
                    }
                });
            }
        }
    }

    fn take_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        node.needs_grad
            .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; node.value.len()]))
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        x: Var,
        s: Var,
        p: &GruVars,
        z: &[f64],
        r: &[f64],
        h: &[f64],
        q: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.nodes[x.0].value.data();
        let ss = self.nodes[s.0].value.data();
        let (batch, d_in) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
        let d_h = self.nodes[s.0].value.shape()[1];
        let n = batch * d_h;

        // Pre-activation gradients of the three gates.
        let mut da_h = vec![0.0; n];
        let mut da_z = vec![0.0; n];
        for i in 0..n {
            da_h[i] = g[i] * (1.0 - z[i]) * (1.0 - h[i] * h[i]);
            da_z[i] = g[i] * (ss[i] - h[i]) * z[i] * (1.0 - z[i]);
        }
        let mut dq = vec![0.0; n];
        kernels::matmul_grad_a(&da_h, self.nodes[p.w[2].0].value.data(), &mut dq, batch, d_h, d_h);
        let da_r: Vec<f64> = (0..n).map(|i| dq[i] * ss[i] * r[i] * (1.0 - r[i])).collect();

        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        let gates = [&da_z, &da_r, &da_h];
        for (k, da) in gates.iter().enumerate() {
            acc(p.u[k], &mut |d| kernels::matmul_grad_b(xs, da, d, batch, d_in, d_h));
            let input = if k == 2 { q } else { ss };
            acc(p.w[k], &mut |d| kernels::matmul_grad_b(input, da, d, batch, d_h, d_h));
            acc(p.b[k], &mut |d| {
                for row in da.chunks(d_h) {
                    add_into(d, row);
                }
            });
            acc(x, &mut |d| kernels::matmul_grad_a(da, self.nodes[p.u[k].0].value.data(), d, batch, d_in, d_h));
        }
        acc(s, &mut |d| {
            for i in 0..n {
                d[i] += g[i] * z[i] + dq[i] * r[i];
            }
            kernels::matmul_grad_a(&da_z, self.nodes[p.w[0].0].value.data(), d, batch, d_h, d_h);
            kernels::matmul_grad_a(&da_r, self.nodes[p.w[1].0].value.data(), d, batch, d_h, d_h);
        });
    }
}

fn put_grad(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot => *slot = Some(g),
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
