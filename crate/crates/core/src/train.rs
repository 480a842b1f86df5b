//! Adam, mini-batch loops, and the two training procedures.

use std::time::Instant;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Param, Parameterized};
use crate::models::{
    bind_module, features_graph, time_steps, ClassifierConfig, ClassifierInput, ClassifierModel, ImputerConfig, ImputerModel, ResNetPlusPlus,
};
use crate::preprocess::{select_columns, ChannelConfig, FrameDataset};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    /// Stop after this many epochs without validation improvement and
    /// restore the best weights.
    pub patience: Option<usize>,
    /// Fraction of frames held out for early stopping; ignored without
    /// `patience`.
    pub validation_fraction: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Stop once an epoch's mean training loss is at or below this.
    pub target_loss: Option<f64>,
}

impl TrainConfig {
    pub fn imputer_defaults() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            patience: Some(10),
            validation_fraction: 0.1,
            clip_norm: Some(5.0),
            target_loss: None,
        }
    }

    pub fn classifier_defaults() -> Self {
        Self {
            epochs: 50,
            clip_norm: None,
            ..Self::imputer_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update over the trainable entries of `params`. `grads[i]` is
/// the gradient of `params[i]`; `None` counts as zero.
pub fn adam_step(params: &mut [&mut Param], grads: &[Option<Tensor>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if state.m[i].len() != p.value.len() {
            return Err(Error::shape("adam_step", format!("moment size differs for {}", p.name)));
        }
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", format!("gradient shape {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let delta = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            if delta != 0.0 {
                *w -= delta;
            }
        }
    }
    Ok(())
}

/// Scale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

fn collect_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|v| grads.take(*v)).collect()
}

/// Shuffled (or ordered) mini-batches. The last partial batch is kept; a
/// trailing batch of one frame is merged into its predecessor so batch
/// statistics stay defined.
pub fn minibatches(n: usize, batch_size: usize, shuffle: bool, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Deterministic train/validation split of `0..n`.
pub fn holdout_split(n: usize, fraction: f64, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_val = ((n as f64) * fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept when early stopping restored them.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Line-oriented log: `epoch=<n> split=<train|val> loss=<x> elapsed=<s>`.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!("epoch={} split=train loss={:.9e} elapsed={:.3}\n", e.epoch, e.train_loss, e.elapsed_secs));
            if let Some(v) = e.val_loss {
                out.push_str(&format!("epoch={} split=val loss={:.9e} elapsed={:.3}\n", e.epoch, v, e.elapsed_secs));
            }
        }
        out
    }
}

/// Called after every epoch with the record and the current parameters.
pub type EpochHook<'h> = dyn FnMut(&EpochRecord, &[&Param]) -> Result<()> + 'h;

fn snapshot(params: &[&Param]) -> Vec<Tensor> {
    params.iter().map(|p| p.value.clone()).collect()
}

fn restore(params: Vec<&mut Param>, values: Vec<Tensor>) {
    for (p, v) in params.into_iter().zip(values) {
        p.value = v;
    }
}

struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    best_params: Option<Vec<Tensor>>,
}

impl EarlyStop {
    fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
        }
    }

    /// Record a validation loss; returns true when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, params: &[&Param]) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.best_params = Some(snapshot(params));
            false
        } else {
            self.patience.is_some_and(|p| epoch - self.best_epoch >= p)
        }
    }
}

fn imputer_batch_loss(model: &ImputerModel, x: &Tensor, trainable: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = bind_module(&mut g, model, trainable);
    let x_hat = select_columns(x, &model.channels.indices);
    let steps = time_steps(&mut g, &x_hat)?;
    let out = model.forward_graph(&mut g, &vars, &steps)?;
    let pred = g.stack_time(&out.outputs)?;
    let target = g.constant(x.clone());
    let loss = g.mse_loss(pred, target)?;
    Ok((g, vars, loss))
}

/// Mean imputation loss over `indices`, evaluated in batches.
pub fn imputer_loss(model: &ImputerModel, dataset: &FrameDataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (g, _, loss) = imputer_batch_loss(model, &dataset.batch(chunk), false)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}

fn check_twelve_leads(dataset: &FrameDataset) -> Result<()> {
    if dataset.k != crate::models::FULL_CHANNELS {
        return Err(Error::InvalidConfig(format!("imputer targets need 12 channels, dataset has {}", dataset.k)));
    }
    Ok(())
}

/// Fit an imputer to reconstruct all twelve leads from `channels`.
/// Labels are ignored.
pub fn train_imputer(
    dataset: &FrameDataset,
    channels: &ChannelConfig,
    model_config: &ImputerConfig,
    cfg: &TrainConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<(ImputerModel, History)> {
    cfg.validate()?;
    if dataset.n == 0 {
        return Err(Error::EmptyDataset);
    }
    check_twelve_leads(dataset)?;
    let channels = ChannelConfig::resolve(&channels.leads, &dataset.channel_names)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = ImputerModel::new(channels, model_config.clone(), &mut rng.fork());
    let (train_idx, val_idx) = if cfg.patience.is_some() {
        holdout_split(dataset.n, cfg.validation_fraction, &mut rng)
    } else {
        ((0..dataset.n).collect(), Vec::new())
    };
    let mut adam = AdamState::new(&model.params());
    let mut stop = EarlyStop::new(cfg.patience);
    let mut history = History::default();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches(train_idx.len(), cfg.batch_size, cfg.shuffle, &mut rng) {
            let rows: Vec<usize> = batch.iter().map(|&i| train_idx[i]).collect();
            let (g, vars, loss) = imputer_batch_loss(&model, &dataset.batch(&rows), true)?;
            total += g.value(loss).item() * rows.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut grads = collect_grads(&mut grads, &vars);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam, cfg)?;
        }
        let train_loss = total / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::InvalidConfig(format!("imputer loss diverged at epoch {epoch}")));
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(imputer_loss(&model, dataset, &val_idx, cfg.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(h) = hook.as_mut() {
            h(&record, &model.params())?;
        }
        history.epochs.push(record);
        if let Some(v) = val_loss {
            if stop.observe(epoch, v, &model.params()) {
                break;
            }
        }
        if cfg.target_loss.is_some_and(|t| train_loss <= t) {
            break;
        }
    }
    if let (Some(_), Some(best)) = (cfg.patience, stop.best_params.take()) {
        if stop.best_epoch != history.epochs.len() {
            restore(model.params_mut(), best);
        }
        history.best_epoch = Some(stop.best_epoch);
    }
    Ok((model, history))
}

/// Where classifier inputs come from during training.
enum Features<'a> {
    /// Fixed `[N, T, C]` inputs (raw leads or a frozen imputer's output).
    Fixed(Tensor),
    /// Computed through a trainable imputer.
    Joint { model: &'a mut ImputerModel, mode: ClassifierInput },
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let (t, c) = (x.shape()[1], x.shape()[2]);
    let mut data = Vec::with_capacity(rows.len() * t * c);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * t * c..(r + 1) * t * c]);
    }
    Tensor::new(vec![rows.len(), t, c], data).expect("gather shape")
}

/// Binary targets after checking both classes are present.
pub fn binary_targets(dataset: &FrameDataset) -> Result<Vec<usize>> {
    if dataset.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let y = dataset.binary_targets();
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::SingleClassDataset);
    }
    Ok(y)
}

fn batched<F: Fn(&Tensor) -> Result<Tensor>>(x: &Tensor, batch_size: usize, f: F) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut data = Vec::new();
    let mut tail = Vec::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let rows: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let y = f(&gather(x, &rows))?;
        tail = y.shape()[1..].to_vec();
        data.extend_from_slice(y.data());
    }
    let mut shape = vec![n];
    shape.extend(tail);
    Tensor::new(shape, data)
}

fn fit_classifier(
    model: &mut ClassifierModel,
    mut features: Features<'_>,
    targets: &[usize],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    x_raw: &Tensor,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<History> {
    let n = targets.len();
    let mut history = History::default();
    let (train_idx, val_idx) = if cfg.patience.is_some() {
        holdout_split(n, cfg.validation_fraction, rng)
    } else {
        ((0..n).collect(), Vec::new())
    };
    let n_clf = model.params().len();
    let mut adam = match &features {
        Features::Fixed(_) => AdamState::new(&model.params()),
        Features::Joint { model: imp, .. } => {
            let mut all = model.params();
            all.extend(imp.params());
            AdamState::new(&all)
        }
    };
    let mut stop = EarlyStop::new(cfg.patience);
    let start = Instant::now();
    let mut dropout_rng = rng.fork();

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches(train_idx.len(), cfg.batch_size, cfg.shuffle, rng) {
            let rows: Vec<usize> = batch.iter().map(|&i| train_idx[i]).collect();
            let y: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
            let mut g = Graph::new();
            let clf_vars = bind_module(&mut g, &*model, true);
            let (input, imp_vars) = match &features {
                Features::Fixed(x) => (g.constant(gather(x, &rows)), Vec::new()),
                Features::Joint { model: imp, mode } => {
                    let imp_vars = bind_module(&mut g, &**imp, true);
                    let x_hat = select_columns(&gather(x_raw, &rows), &imp.channels.indices);
                    (features_graph(imp, *mode, &mut g, &imp_vars, &x_hat)?, imp_vars)
                }
            };
            let mut ctx = Ctx::train(&mut dropout_rng);
            let logits = model.logits_graph(&mut g, &clf_vars, input, &mut ctx)?;
            let stats = std::mem::take(&mut ctx.batch_stats);
            let loss = g.softmax_cross_entropy(logits, &y)?;
            total += g.value(loss).item() * rows.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut all_vars = clf_vars;
            all_vars.extend(imp_vars);
            let mut grads = collect_grads(&mut grads, &all_vars);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            match &mut features {
                Features::Fixed(_) => adam_step(&mut model.params_mut(), &grads, &mut adam, cfg)?,
                Features::Joint { model: imp, .. } => {
                    let mut all = model.params_mut();
                    all.extend(imp.params_mut());
                    adam_step(&mut all, &grads, &mut adam, cfg)?;
                }
            }
            model.update_running_stats(&stats)?;
        }
        let train_loss = total / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::InvalidConfig(format!("classifier loss diverged at epoch {epoch}")));
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let x_val = match &features {
                Features::Fixed(x) => gather(x, &val_idx),
                Features::Joint { model: imp, mode } => {
                    let x_hat = select_columns(&gather(x_raw, &val_idx), &imp.channels.indices);
                    let mut g = Graph::new();
                    let vars = bind_module(&mut g, &**imp, false);
                    let f = features_graph(imp, *mode, &mut g, &vars, &x_hat)?;
                    g.value(f).clone()
                }
            };
            let p = batched(&x_val, cfg.batch_size, |b| model.classify(b))?;
            let y: Vec<usize> = val_idx.iter().map(|&r| targets[r]).collect();
            Some(cross_entropy(&p, &y))
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(h) = hook.as_mut() {
            h(&record, &model.params())?;
        }
        history.epochs.push(record);
        let mut all = model.params();
        if let Features::Joint { model: imp, .. } = &features {
            all.extend(imp.params());
        }
        if let Some(v) = val_loss {
            if stop.observe(epoch, v, &all) {
                break;
            }
        }
        if cfg.target_loss.is_some_and(|t| train_loss <= t) {
            break;
        }
    }
    if let (Some(_), Some(best)) = (cfg.patience, stop.best_params.take()) {
        if stop.best_epoch != history.epochs.len() {
            let mut best = best;
            let imp_values = best.split_off(n_clf);
            restore(model.params_mut(), best);
            if let Features::Joint { model: imp, .. } = features {
                restore(imp.params_mut(), imp_values);
            }
        }
        history.best_epoch = Some(stop.best_epoch);
    }
    Ok(history)
}

fn cross_entropy(probs: &Tensor, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.data()[2 * i + t].max(1e-300).ln())
        .sum();
    total / targets.len() as f64
}

/// Train the stage 2 classifier on top of `imputer`. The imputer is
/// untouched unless `fine_tune` is set.
pub fn train_classifier(
    dataset: &FrameDataset,
    imputer: ImputerModel,
    model_config: &ClassifierConfig,
    input_mode: ClassifierInput,
    fine_tune: bool,
    cfg: &TrainConfig,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<(ResNetPlusPlus, History)> {
    cfg.validate()?;
    let targets = binary_targets(dataset)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut config = model_config.clone();
    config.in_channels = input_mode.channels(&imputer);
    let mut classifier = ClassifierModel::new(config, &mut rng.fork());
    let x_raw = dataset.batch(&(0..dataset.n).collect::<Vec<_>>());
    let mut imputer = imputer;
    let history = if fine_tune {
        let features = Features::Joint {
            model: &mut imputer,
            mode: input_mode,
        };
        fit_classifier(&mut classifier, features, &targets, cfg, &mut rng, &x_raw, hook)?
    } else {
        let probe = ResNetPlusPlus::new(imputer.clone(), classifier.clone(), input_mode)?;
        let x_hat = select_columns(&x_raw, &imputer.channels.indices);
        let fixed = batched(&x_hat, 64, |b| probe.features(b))?;
        fit_classifier(&mut classifier, Features::Fixed(fixed), &targets, cfg, &mut rng, &x_raw, hook)?
    };
    Ok((ResNetPlusPlus::new(imputer, classifier, input_mode)?, history))
}

/// Train the baseline network directly on the `channels` leads.
pub fn train_baseline(
    dataset: &FrameDataset,
    channels: &ChannelConfig,
    model_config: &ClassifierConfig,
    cfg: &TrainConfig,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<(ClassifierModel, History)> {
    cfg.validate()?;
    let targets = binary_targets(dataset)?;
    let channels = ChannelConfig::resolve(&channels.leads, &dataset.channel_names)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut config = model_config.clone();
    config.in_channels = channels.len();
    let mut model = ClassifierModel::new(config, &mut rng.fork());
    let x_raw = dataset.batch(&(0..dataset.n).collect::<Vec<_>>());
    let x_hat = select_columns(&x_raw, &channels.indices);
    let history = fit_classifier(&mut model, Features::Fixed(x_hat), &targets, cfg, &mut rng, &x_raw, hook)?;
    Ok((model, history))
}

/// Eval-mode probabilities for every frame, computed in batches.
pub fn predict_batched(x: &Tensor, batch_size: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    batched(x, batch_size, f)
}
