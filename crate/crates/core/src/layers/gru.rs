//! Gated recurrent units.
//!
//! One step of a layer computes
//!
//! ```text
//! z   = σ(x_t U_z + s_{t-1} W_z + b_z)          update gate
//! r   = σ(x_t U_r + s_{t-1} W_r + b_r)          reset gate
//! h   = tanh(x_t U_h + (s_{t-1} ∘ r) W_h + b_h) candidate state
//! s_t = (1 - z) ∘ h + z ∘ s_{t-1}
//! ```
//!
//! Row-vector convention: `U_*` are `d_in × d_h`, `W_*` are `d_h × d_h`.
//! With `freeze_biases` the three bias vectors stay at zero and are never
//! trained, which gives the bias-free form of the cell.

use super::param::{bind_frozen, Param, Parameterized};
use crate::autodiff::{Graph, GruVars, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const GATES: [&str; 3] = ["z", "r", "h"];

/// Parameters of one GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Input-to-hidden matrices `U_z, U_r, U_h`.
    pub u: [Param; 3],
    /// Hidden-to-hidden matrices `W_z, W_r, W_h`.
    pub w: [Param; 3],
    /// Gate biases `b_z, b_r, b_h`.
    pub b: [Param; 3],
}

impl GruParams {
    /// Gate matrices uniform in ±√(1/d_h), biases zero.
    pub fn new(prefix: &str, d_in: usize, d_h: usize, freeze_biases: bool, rng: &mut SeededRng) -> Self {
        let bound = (1.0 / d_h as f64).sqrt();
        let u = GATES.map(|gate| Param::uniform(format!("{prefix}.U_{gate}"), &[d_in, d_h], bound, rng));
        let w = GATES.map(|gate| Param::uniform(format!("{prefix}.W_{gate}"), &[d_h, d_h], bound, rng));
        let b = GATES.map(|gate| {
            let name = format!("{prefix}.b_{gate}");
            if freeze_biases {
                Param::frozen(name, Tensor::zeros(&[d_h]))
            } else {
                Param::zeros(name, &[d_h])
            }
        });
        Self { u, w, b }
    }

    /// All-zero layer (used by tests and as a neutral starting point).
    pub fn zeros(prefix: &str, d_in: usize, d_h: usize) -> Self {
        let mut p = Self::new(prefix, d_in, d_h, false, &mut SeededRng::new(0));
        for param in p.params_mut() {
            param.value.data_mut().fill(0.0);
        }
        p
    }

    pub fn d_in(&self) -> usize {
        self.u[0].value.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.w[0].value.shape()[0]
    }

    pub fn biases_frozen(&self) -> bool {
        self.b.iter().all(|b| !b.trainable)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_h) = (self.d_in(), self.d_h());
        for u in &self.u {
            if u.value.shape() != [d_in, d_h] {
                return Err(Error::shape("GruParams", format!("{} has shape {:?}", u.name, u.value.shape())));
            }
        }
        for w in &self.w {
            if w.value.shape() != [d_h, d_h] {
                return Err(Error::shape("GruParams", format!("{} has shape {:?}", w.name, w.value.shape())));
            }
        }
        for b in &self.b {
            if b.value.len() != d_h {
                return Err(Error::shape("GruParams", format!("{} has shape {:?}", b.name, b.value.shape())));
            }
        }
        if self.params().iter().any(|p| !p.value.all_finite()) {
            return Err(Error::InvalidConfig("non-finite GRU parameter".into()));
        }
        Ok(())
    }

    fn vars(vars: &[Var]) -> GruVars {
        GruVars {
            u: [vars[0], vars[1], vars[2]],
            w: [vars[3], vars[4], vars[5]],
            b: [vars[6], vars[7], vars[8]],
        }
    }

    /// One step on a batch: `x [B, d_in]`, `s [B, d_h]` -> `[B, d_h]`.
    pub fn step(&self, g: &mut Graph, vars: &[Var], x: Var, s: Var) -> Result<Var> {
        g.gru_cell(x, s, Self::vars(vars))
    }
}

impl Parameterized for GruParams {
    fn params(&self) -> Vec<&Param> {
        self.u.iter().chain(&self.w).chain(&self.b).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.u.iter_mut().chain(self.w.iter_mut()).chain(self.b.iter_mut()).collect()
    }
}

/// Evaluate a single cell step on plain vectors.
pub fn gru_cell_step(x_t: &[f64], s_prev: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    if x_t.len() != p.d_in() || s_prev.len() != p.d_h() {
        return Err(Error::shape(
            "gru_cell_step",
            format!("x has {} (want {}), s has {} (want {})", x_t.len(), p.d_in(), s_prev.len(), p.d_h()),
        ));
    }
    let mut g = Graph::new();
    let vars = bind_frozen(&mut g, p);
    let x = g.constant(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
    let s = g.constant(Tensor::new(vec![1, s_prev.len()], s_prev.to_vec())?);
    let out = p.step(&mut g, &vars, x, s)?;
    Ok(g.value(out).data().to_vec())
}

/// A stack of GRU layers; layer `ℓ` consumes the hidden sequence of layer
/// `ℓ - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack {
    pub layers: Vec<GruParams>,
}

impl GruStack {
    pub fn new(prefix: &str, d_in: usize, d_h: usize, n_layers: usize, freeze_biases: bool, rng: &mut SeededRng) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let input = if i == 0 { d_in } else { d_h };
                GruParams::new(&format!("{prefix}.gru{i}"), input, d_h, freeze_biases, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<GruParams>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].d_in() != pair[0].d_h() {
                return Err(Error::shape(
                    "GruStack",
                    format!("layer input {} does not match previous hidden {}", pair[1].d_in(), pair[0].d_h()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_h(&self) -> usize {
        self.layers.last().map_or(0, GruParams::d_h)
    }

    fn layer_vars<'v>(&self, vars: &'v [Var], layer: usize) -> &'v [Var] {
        &vars[layer * 9..(layer + 1) * 9]
    }

    /// Zero initial states, one per layer.
    pub fn zero_states(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        self.layers.iter().map(|l| g.constant(Tensor::zeros(&[batch, l.d_h()]))).collect()
    }

    /// Advance every layer by one time step, updating `states` in place.
    /// Returns the top layer's new state.
    pub fn step(&self, g: &mut Graph, vars: &[Var], x: Var, states: &mut [Var]) -> Result<Var> {
        let mut input = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let s = layer.step(g, self.layer_vars(vars, i), input, states[i])?;
            states[i] = s;
            input = s;
        }
        Ok(input)
    }

    /// Run over a whole sequence of `[B, d_in]` steps. Returns the top
    /// layer's hidden sequence and the final state of every layer.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], seq: &[Var], initial: Option<&[Var]>) -> Result<(Vec<Var>, Vec<Var>)> {
        let first = seq.first().ok_or_else(|| Error::shape("GruStack::forward", "empty sequence"))?;
        let batch = g.value(*first).shape()[0];
        let mut states = match initial {
            Some(init) if init.len() == self.depth() => init.to_vec(),
            Some(init) => {
                return Err(Error::shape(
                    "GruStack::forward",
                    format!("{} initial states for {} layers", init.len(), self.depth()),
                ))
            }
            None => self.zero_states(g, batch),
        };
        let mut top = Vec::with_capacity(seq.len());
        for &x in seq {
            top.push(self.step(g, vars, x, &mut states)?);
        }
        Ok((top, states))
    }
}

impl Parameterized for GruStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Evaluate a stack over a `T × d_in` sequence held as rows of plain
/// vectors. Returns the top hidden sequence and every layer's final state.
pub fn gru_stack_forward(
    seq: &[Vec<f64>],
    stack: &GruStack,
    initial: Option<&[Vec<f64>]>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = bind_frozen(&mut g, stack);
    let steps = seq
        .iter()
        .map(|row| Ok(g.constant(Tensor::new(vec![1, row.len()], row.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let init = initial
        .map(|states| {
            states
                .iter()
                .map(|s| Ok(g.constant(Tensor::new(vec![1, s.len()], s.clone())?)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let (top, finals) = stack.forward(&mut g, &vars, &steps, init.as_deref())?;
    let rows = |vs: &[Var]| vs.iter().map(|v| g.value(*v).data().to_vec()).collect::<Vec<_>>();
    Ok((rows(&top), rows(&finals)))
}
