//! 1-D convolution, batch normalisation and the residual block built from
//! them.

use super::param::{Ctx, Param, Parameterized};
use crate::autodiff::{BatchStats, Graph, NormMode, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution kernel `[k, C_in, C_out]` with optional bias, "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
}

impl Conv1d {
    /// He-normal kernel.
    pub fn new(prefix: &str, kernel: usize, c_in: usize, c_out: usize, stride: usize, with_bias: bool, rng: &mut SeededRng) -> Self {
        let std = (2.0 / (kernel * c_in) as f64).sqrt();
        Self {
            weight: Param::normal(format!("{prefix}.weight"), &[kernel, c_in, c_out], std, rng),
            bias: with_bias.then(|| Param::zeros(format!("{prefix}.bias"), &[c_out])),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.conv1d(x, vars[0], self.bias.as_ref().map(|_| vars[1]), self.stride, Padding::Same)
    }
}

impl Parameterized for Conv1d {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Batch normalisation with running statistics (stored as frozen params so
/// they travel with checkpoints).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
            beta: Param::zeros(format!("{prefix}.beta"), &[channels]),
            running_mean: Param::frozen(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::frozen(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let mode = if ctx.train {
            NormMode::Train
        } else {
            NormMode::Eval {
                mean: self.running_mean.value.data(),
                var: self.running_var.value.data(),
            }
        };
        let (y, stats) = g.batchnorm1d(x, vars[0], vars[1], mode, BN_EPS)?;
        ctx.batch_stats.extend(stats);
        Ok(y)
    }

    /// Exponential moving average update; the variance estimate is
    /// bias-corrected by `n / (n - 1)`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

impl Parameterized for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

/// `y = relu(BN(conv2(dropout(relu(BN(conv1(x)))))) + skip(x))` where `skip`
/// is the identity or a strided 1×1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub dropout: f64,
    pub projection: Option<Conv1d>,
}

impl ResidualBlockParams {
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let projection = (c_in != c_out || stride > 1)
            .then(|| Conv1d::new(&format!("{prefix}.proj"), 1, c_in, c_out, stride, true, rng));
        Self {
            conv1: Conv1d::new(&format!("{prefix}.conv1"), kernel, c_in, c_out, stride, false, rng),
            bn1: BatchNorm::new(&format!("{prefix}.bn1"), c_out),
            conv2: Conv1d::new(&format!("{prefix}.conv2"), kernel, c_out, c_out, 1, false, rng),
            bn2: BatchNorm::new(&format!("{prefix}.bn2"), c_out),
            dropout,
            projection,
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv1.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out()
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    pub fn conv_count(&self) -> usize {
        2 + usize::from(self.projection.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv2.c_in() != self.conv1.c_out() {
            return Err(Error::shape("residual block", "conv2 input does not match conv1 output"));
        }
        let needs_projection = self.c_in() != self.c_out() || self.stride() > 1;
        if needs_projection != self.projection.is_some() {
            return Err(Error::shape("residual block", "projection present iff channels change or stride > 1"));
        }
        Ok(())
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.bn1, &mut self.bn2]
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let c_in = g.value(x).last_dim();
        if c_in != self.c_in() {
            return Err(Error::shape("residual block", format!("input has {c_in} channels, block expects {}", self.c_in())));
        }
        let (v_conv1, rest) = vars.split_at(self.conv1.param_count());
        let (v_bn1, rest) = rest.split_at(4);
        let (v_conv2, rest) = rest.split_at(self.conv2.param_count());
        let (v_bn2, v_proj) = rest.split_at(4);

        let h = self.conv1.forward(g, v_conv1, x)?;
        let h = self.bn1.forward(g, v_bn1, h, ctx)?;
        let h = g.relu(h);
        let rng = if ctx.train { ctx.rng.as_deref_mut() } else { None };
        let h = g.dropout(h, self.dropout, rng)?;
        let h = self.conv2.forward(g, v_conv2, h)?;
        let h = self.bn2.forward(g, v_bn2, h, ctx)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, v_proj, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

impl Parameterized for ResidualBlockParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }
}

/// Evaluate one block on a plain `[batch, T, C_in]` tensor.
pub fn residual_block(x: &Tensor, p: &ResidualBlockParams, train: bool, rng: Option<&mut SeededRng>) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = super::param::bind_frozen(&mut g, p);
    let xv = g.constant(x.clone());
    let mut ctx = Ctx {
        train,
        rng,
        batch_stats: Vec::new(),
    };
    let y = p.forward(&mut g, &vars, xv, &mut ctx)?;
    Ok(g.value(y).clone())
}
