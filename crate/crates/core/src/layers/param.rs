use crate::autodiff::{BatchStats, Graph, Tensor, Var};
use crate::rng::SeededRng;

/// A named tensor owned by a model. Non-trainable params (running
/// statistics, zero-frozen biases) are bound as constants and skipped by the
/// optimizer, but are still saved in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }
}

/// Anything that owns parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Number of trainable scalars.
    fn scalar_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Insert every parameter into `g` as a leaf, in `params()` order.
pub fn bind<P: Parameterized + ?Sized>(g: &mut Graph, module: &P) -> Vec<Var> {
    module
        .params()
        .into_iter()
        .map(|p| {
            if p.trainable {
                g.param(p.value.clone())
            } else {
                g.constant(p.value.clone())
            }
        })
        .collect()
}

/// Bind every parameter as a constant (inference or frozen sub-models).
pub fn bind_frozen<P: Parameterized + ?Sized>(g: &mut Graph, module: &P) -> Vec<Var> {
    module.params().into_iter().map(|p| g.constant(p.value.clone())).collect()
}

/// Forward-pass context: train/eval switch, dropout randomness, and the
/// batch statistics produced by batch-norm layers in train mode (in
/// forward order).
pub struct Ctx<'r> {
    pub train: bool,
    pub rng: Option<&'r mut SeededRng>,
    pub batch_stats: Vec<BatchStats>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
            batch_stats: Vec::new(),
        }
    }

    pub fn train(rng: &'r mut SeededRng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
            batch_stats: Vec::new(),
        }
    }
}
