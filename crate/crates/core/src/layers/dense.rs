use super::param::{Param, Parameterized};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::SeededRng;

/// Affine map `x W + b` on `[batch, in]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{prefix}.weight"), &[d_in, d_out], bound, rng),
            bias: Param::zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, vars[0])?;
        g.add_bias(y, vars[1])
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
