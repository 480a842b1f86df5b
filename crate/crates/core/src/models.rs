//! Stage 1 imputer, stage 2 classifier, their composition, and the
//! baseline residual network.

use crate::autodiff::{BatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{attend, bind, bind_frozen, BatchNorm, Conv1d, Ctx, Dense, GruStack, Param, Parameterized, ResidualBlockParams};
use crate::preprocess::ChannelConfig;
use crate::rng::SeededRng;

/// Number of output channels of the imputer.
pub const FULL_CHANNELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// The encoder's final top-layer state, fed to every decoder step.
    LastStep,
    /// The whole top-layer state sequence; decoder step `t` reads state `t`.
    ConcatAll,
}

impl LatentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentMode::LastStep => "last_step",
            LatentMode::ConcatAll => "concat_all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last_step" => Ok(LatentMode::LastStep),
            "concat_all" => Ok(LatentMode::ConcatAll),
            _ => Err(Error::Config(format!("unknown latent mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub latent_mode: LatentMode,
    pub attention: bool,
    /// Zero-freeze the GRU biases.
    pub freeze_biases: bool,
    /// Initial update-gate bias of every GRU layer. Negative values start
    /// each layer closer to passing its candidate state straight through.
    pub update_bias: f64,
    /// Multiplier on the initial GRU gate matrices.
    pub init_scale: f64,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 5,
            latent_mode: LatentMode::ConcatAll,
            attention: false,
            freeze_biases: false,
            update_bias: 0.0,
            init_scale: 1.0,
        }
    }
}

/// Encoder output: the top-layer state sequence and every layer's final
/// state, batched.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub mode: LatentMode,
    /// `[B, T, d_h]`
    pub sequence: Tensor,
    /// One `[B, d_h]` per encoder layer.
    pub finals: Vec<Tensor>,
}

impl Latent {
    /// The fixed-length latent vector of frame `b`: `d_h` values in
    /// last-step mode, `T·d_h` in concat-all mode.
    pub fn vector(&self, b: usize) -> Vec<f64> {
        let (t, d) = (self.sequence.shape()[1], self.sequence.shape()[2]);
        let frame = &self.sequence.data()[b * t * d..(b + 1) * t * d];
        match self.mode {
            LatentMode::LastStep => frame[(t - 1) * d..].to_vec(),
            LatentMode::ConcatAll => frame.to_vec(),
        }
    }
}

/// GRU encoder-decoder mapping `K̂` observed leads to all twelve.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputerModel {
    pub config: ImputerConfig,
    pub channels: ChannelConfig,
    pub encoder: GruStack,
    pub latent_proj: Dense,
    pub decoder: GruStack,
    pub head: Dense,
}

/// Graph handles produced by one imputer forward pass.
pub struct ImputerVars {
    /// Per-step `[B, 12]` predictions.
    pub outputs: Vec<Var>,
    /// Per-step `[B, d_h]` encoder top states.
    pub encoder_states: Vec<Var>,
    pub encoder_finals: Vec<Var>,
}

/// Split a `[B, T, C]` tensor into `T` constant `[B, C]` graph leaves.
pub fn time_steps(g: &mut Graph, x: &Tensor) -> Result<Vec<Var>> {
    if x.rank() != 3 {
        return Err(Error::shape("time_steps", format!("expected [B, T, C], got {:?}", x.shape())));
    }
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    (0..t)
        .map(|s| {
            let mut step = Vec::with_capacity(b * c);
            for i in 0..b {
                step.extend_from_slice(&d[(i * t + s) * c..(i * t + s + 1) * c]);
            }
            Ok(g.constant(Tensor::new(vec![b, c], step)?))
        })
        .collect()
}

impl ImputerModel {
    pub fn new(channels: ChannelConfig, config: ImputerConfig, rng: &mut SeededRng) -> Self {
        let h = config.hidden;
        let k_in = channels.len();
        let dec_in = if config.attention { 2 * h } else { h };
        let mut encoder = GruStack::new("encoder", k_in, h, config.layers, config.freeze_biases, rng);
        let latent_proj = Dense::new("latent", h, h, rng);
        let mut decoder = GruStack::new("decoder", dec_in, h, config.layers, config.freeze_biases, rng);
        if !config.freeze_biases {
            for layer in encoder.layers.iter_mut().chain(decoder.layers.iter_mut()) {
                layer.b[0].value.data_mut().fill(config.update_bias);
            }
        }
        if config.init_scale != 1.0 {
            for layer in encoder.layers.iter_mut().chain(decoder.layers.iter_mut()) {
                for p in layer.u.iter_mut().chain(layer.w.iter_mut()) {
                    p.value.data_mut().iter_mut().for_each(|v| *v *= config.init_scale);
                }
            }
        }
        Self {
            encoder,
            latent_proj,
            decoder,
            head: Dense::new("head", h, FULL_CHANNELS, rng),
            channels,
            config,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn gru_layer_counts(&self) -> (usize, usize) {
        (self.encoder.depth(), self.decoder.depth())
    }

    fn split_vars<'v>(&self, vars: &'v [Var]) -> [&'v [Var]; 4] {
        let (enc, rest) = vars.split_at(self.encoder.param_count());
        let (proj, rest) = rest.split_at(self.latent_proj.param_count());
        let (dec, head) = rest.split_at(self.decoder.param_count());
        [enc, proj, dec, head]
    }

    fn check_input(&self, g: &Graph, steps: &[Var]) -> Result<()> {
        let first = steps.first().ok_or_else(|| Error::shape("imputer", "empty sequence"))?;
        let k = g.value(*first).last_dim();
        if k != self.input_channels() {
            return Err(Error::shape("imputer", format!("input has {k} channels, model expects {}", self.input_channels())));
        }
        Ok(())
    }

    /// Encoder half: top-layer states and final states of every layer.
    pub fn encode_graph(&self, g: &mut Graph, vars: &[Var], steps: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_input(g, steps)?;
        let [enc, ..] = self.split_vars(vars);
        self.encoder.forward(g, enc, steps, None)
    }

    /// Decoder half, unrolled for `steps` steps without feeding back its
    /// own predictions. The decoder starts from the encoder's final states.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        encoder_states: &[Var],
        encoder_finals: &[Var],
        steps: usize,
    ) -> Result<Vec<Var>> {
        let [_, proj, dec, head] = self.split_vars(vars);
        if self.config.latent_mode == LatentMode::ConcatAll && encoder_states.len() != steps {
            return Err(Error::shape(
                "decode",
                format!("concat-all latent holds {} steps, asked for {steps}", encoder_states.len()),
            ));
        }
        let memory = if self.config.attention { Some(g.stack_time(encoder_states)?) } else { None };
        let last_latent = match self.config.latent_mode {
            LatentMode::LastStep => {
                let last = *encoder_states.last().ok_or_else(|| Error::shape("decode", "empty latent"))?;
                Some(self.latent_proj.forward(g, proj, last)?)
            }
            LatentMode::ConcatAll => None,
        };
        let mut states = encoder_finals.to_vec();
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut input = match last_latent {
                Some(l) => l,
                None => self.latent_proj.forward(g, proj, encoder_states[t])?,
            };
            if let Some(mem) = memory {
                let query = *states.last().expect("decoder depth");
                let (context, _) = attend(g, query, mem)?;
                input = g.concat(&[input, context])?;
            }
            let top = self.decoder.step(g, dec, input, &mut states)?;
            outputs.push(self.head.forward(g, head, top)?);
        }
        Ok(outputs)
    }

    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], steps: &[Var]) -> Result<ImputerVars> {
        let (encoder_states, encoder_finals) = self.encode_graph(g, vars, steps)?;
        let outputs = self.decode_graph(g, vars, &encoder_states, &encoder_finals, steps.len())?;
        Ok(ImputerVars {
            outputs,
            encoder_states,
            encoder_finals,
        })
    }

    /// Encode a `[B, T, K̂]` batch.
    pub fn encode(&self, x_hat: &Tensor) -> Result<Latent> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, self);
        let steps = time_steps(&mut g, x_hat)?;
        let (states, finals) = self.encode_graph(&mut g, &vars, &steps)?;
        let sequence = g.stack_time(&states)?;
        Ok(Latent {
            mode: self.config.latent_mode,
            sequence: g.value(sequence).clone(),
            finals: finals.iter().map(|v| g.value(*v).clone()).collect(),
        })
    }

    /// Decode a latent into a `[B, steps, 12]` prediction.
    pub fn decode(&self, latent: &Latent, steps: usize) -> Result<Tensor> {
        let h = self.config.hidden;
        let seq = &latent.sequence;
        if seq.rank() != 3 || seq.shape()[2] != h || latent.finals.len() != self.decoder.depth() {
            return Err(Error::shape("decode", "latent does not come from a matching encoder"));
        }
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, self);
        let states = time_steps(&mut g, seq)?;
        let finals: Vec<Var> = latent.finals.iter().map(|f| g.constant(f.clone())).collect();
        let outputs = self.decode_graph(&mut g, &vars, &states, &finals, steps)?;
        let y = g.stack_time(&outputs)?;
        Ok(g.value(y).clone())
    }

    /// `[B, T, K̂] → [B, T, 12]`.
    pub fn impute(&self, x_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, self);
        let steps = time_steps(&mut g, x_hat)?;
        let out = self.forward_graph(&mut g, &vars, &steps)?;
        let y = g.stack_time(&out.outputs)?;
        Ok(g.value(y).clone())
    }

    /// Encoder top-state sequence `[B, T, d_h]`.
    pub fn latent_sequence(&self, x_hat: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x_hat)?.sequence)
    }
}

impl Parameterized for ImputerModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.latent_proj.params());
        v.extend(self.decoder.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.latent_proj.params_mut());
        v.extend(self.decoder.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub kernel: usize,
    pub blocks: Vec<BlockSpec>,
    pub dropout: f64,
}

impl ClassifierConfig {
    /// Stage 2 network: stem plus two projected blocks, 7 convolutions.
    pub fn stage2(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem_width: 32,
            kernel: 16,
            blocks: vec![BlockSpec { width: 64, stride: 2 }, BlockSpec { width: 128, stride: 2 }],
            dropout: 0.2,
        }
    }

    /// Baseline network: stem plus five blocks, 13 convolutions.
    pub fn baseline(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem_width: 32,
            kernel: 16,
            blocks: vec![
                BlockSpec { width: 32, stride: 1 },
                BlockSpec { width: 64, stride: 2 },
                BlockSpec { width: 64, stride: 1 },
                BlockSpec { width: 128, stride: 2 },
                BlockSpec { width: 128, stride: 1 },
            ],
            dropout: 0.2,
        }
    }

    /// Same layout with every width divided by `factor` (at least 1) and a
    /// different kernel size.
    pub fn narrowed(mut self, factor: usize, kernel: usize) -> Self {
        let f = factor.max(1);
        self.stem_width = (self.stem_width / f).max(1);
        for b in &mut self.blocks {
            b.width = (b.width / f).max(1);
        }
        self.kernel = kernel;
        self
    }

    /// Convolution layers counting the stem, both convolutions of every
    /// block, and each projection shortcut.
    pub fn conv_layers(&self) -> usize {
        let mut c_in = self.stem_width;
        let mut n = 1;
        for b in &self.blocks {
            n += 2 + usize::from(b.width != c_in || b.stride > 1);
            c_in = b.width;
        }
        n
    }
}

/// 1-D residual network with global average pooling and a two-class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub stem: Conv1d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlockParams>,
    pub head: Dense,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, rng: &mut SeededRng) -> Self {
        let stem = Conv1d::new("stem.conv", config.kernel, config.in_channels, config.stem_width, 1, false, rng);
        let stem_bn = BatchNorm::new("stem.bn", config.stem_width);
        let mut c_in = config.stem_width;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let block = ResidualBlockParams::new(&format!("block{i}"), c_in, b.width, config.kernel, b.stride, config.dropout, rng);
                c_in = b.width;
                block
            })
            .collect();
        let head = Dense::new("fc", c_in, 2, rng);
        Self {
            config,
            stem,
            stem_bn,
            blocks,
            head,
        }
    }

    /// Convolution layers actually present in the built network.
    pub fn conv_layer_count(&self) -> usize {
        1 + self.blocks.iter().map(ResidualBlockParams::conv_count).sum::<usize>()
    }

    pub fn in_channels(&self) -> usize {
        self.stem.c_in()
    }

    /// `[B, T, C]` → `[B, 2]` logits.
    pub fn logits_graph(&self, g: &mut Graph, vars: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let c = g.value(x).last_dim();
        if g.value(x).rank() != 3 || c != self.in_channels() {
            return Err(Error::shape(
                "classifier",
                format!("input {:?}, expected [B, T, {}]", g.value(x).shape(), self.in_channels()),
            ));
        }
        let (v_stem, rest) = vars.split_at(self.stem.param_count());
        let (v_bn, mut rest) = rest.split_at(self.stem_bn.param_count());
        let h = self.stem.forward(g, v_stem, x)?;
        let h = self.stem_bn.forward(g, v_bn, h, ctx)?;
        let mut h = g.relu(h);
        for block in &self.blocks {
            let (vb, r) = rest.split_at(block.param_count());
            h = block.forward(g, vb, h, ctx)?;
            rest = r;
        }
        let pooled = g.time_mean(h)?;
        self.head.forward(g, rest, pooled)
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// statistics, in forward order.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut bns: Vec<&mut BatchNorm> = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            bns.extend(b.batchnorms_mut());
        }
        if bns.len() != stats.len() {
            return Err(Error::shape("batch norm update", format!("{} layers, {} statistics", bns.len(), stats.len())));
        }
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    /// Eval-mode class probabilities, `[B, T, C]` → `[B, 2]`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, self);
        let xv = g.constant(x.clone());
        let logits = self.logits_graph(&mut g, &vars, xv, &mut Ctx::eval())?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }
}

impl Parameterized for ClassifierModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        v.extend(self.stem_bn.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierInput {
    /// The imputer's twelve-channel prediction.
    ImputedSignal,
    /// The encoder's top-layer state sequence.
    LatentSequence,
}

impl ClassifierInput {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierInput::ImputedSignal => "imputed_signal",
            ClassifierInput::LatentSequence => "latent_sequence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "imputed_signal" => Ok(ClassifierInput::ImputedSignal),
            "latent_sequence" => Ok(ClassifierInput::LatentSequence),
            _ => Err(Error::Config(format!("unknown classifier input {s:?}"))),
        }
    }

    /// Channel count the classifier sees for a given imputer.
    pub fn channels(self, imputer: &ImputerModel) -> usize {
        match self {
            ClassifierInput::ImputedSignal => FULL_CHANNELS,
            ClassifierInput::LatentSequence => imputer.config.hidden,
        }
    }
}

/// Imputer followed by the stage 2 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNetPlusPlus {
    pub imputer: ImputerModel,
    pub classifier: ClassifierModel,
    pub input_mode: ClassifierInput,
}

impl ResNetPlusPlus {
    pub fn new(imputer: ImputerModel, classifier: ClassifierModel, input_mode: ClassifierInput) -> Result<Self> {
        if classifier.in_channels() != input_mode.channels(&imputer) {
            return Err(Error::shape(
                "ResNet++",
                format!("classifier takes {} channels, {} mode yields {}", classifier.in_channels(), input_mode.as_str(), input_mode.channels(&imputer)),
            ));
        }
        Ok(Self {
            imputer,
            classifier,
            input_mode,
        })
    }

    /// What the classifier consumes for a `[B, T, K̂]` batch.
    pub fn features(&self, x_hat: &Tensor) -> Result<Tensor> {
        match self.input_mode {
            ClassifierInput::ImputedSignal => self.imputer.impute(x_hat),
            ClassifierInput::LatentSequence => self.imputer.latent_sequence(x_hat),
        }
    }

    /// Classifier input built inside `g`, so gradients can reach the
    /// imputer when its parameters are bound as trainable.
    pub fn features_graph(&self, g: &mut Graph, imputer_vars: &[Var], x_hat: &Tensor) -> Result<Var> {
        features_graph(&self.imputer, self.input_mode, g, imputer_vars, x_hat)
    }

    pub fn predict(&self, x_hat: &Tensor) -> Result<Tensor> {
        self.classifier.classify(&self.features(x_hat)?)
    }
}

/// Classifier input for `x_hat` computed by `imputer` inside `g`.
pub fn features_graph(imputer: &ImputerModel, mode: ClassifierInput, g: &mut Graph, imputer_vars: &[Var], x_hat: &Tensor) -> Result<Var> {
    let steps = time_steps(g, x_hat)?;
    match mode {
        ClassifierInput::ImputedSignal => {
            let out = imputer.forward_graph(g, imputer_vars, &steps)?;
            g.stack_time(&out.outputs)
        }
        ClassifierInput::LatentSequence => {
            let (states, _) = imputer.encode_graph(g, imputer_vars, &steps)?;
            g.stack_time(&states)
        }
    }
}

/// Class probabilities of a composed model for `[B, T, K̂]` input.
pub fn resnetpp_predict(model: &ResNetPlusPlus, x_hat: &Tensor) -> Result<Tensor> {
    model.predict(x_hat)
}

/// Class probabilities of the baseline, applied directly to `[B, T, K̂]`.
pub fn baseline_resnet_predict(model: &ClassifierModel, x_hat: &Tensor) -> Result<Tensor> {
    model.classify(x_hat)
}

/// Bind a module as trainable or frozen.
pub fn bind_module<P: Parameterized + ?Sized>(g: &mut Graph, module: &P, trainable: bool) -> Vec<Var> {
    if trainable {
        bind(g, module)
    } else {
        bind_frozen(g, module)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channels() -> ChannelConfig {
        ChannelConfig::standard(&["II", "III", "aVF"]).unwrap()
    }

    fn small_imputer(mode: LatentMode, attention: bool, seed: u64) -> ImputerModel {
        let cfg = ImputerConfig {
            hidden: 6,
            layers: 2,
            latent_mode: mode,
            attention,
            freeze_biases: false,
            update_bias: 0.0,
            init_scale: 1.0,
        };
        ImputerModel::new(channels(), cfg, &mut SeededRng::new(seed))
    }

    fn zero_all<P: Parameterized>(m: &mut P) {
        for p in m.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn random_input(b: usize, t: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::new(vec![b, t, k], (0..b * t * k).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let m = ImputerModel::new(channels(), ImputerConfig::default(), &mut SeededRng::new(0));
        assert_eq!(m.gru_layer_counts(), (5, 5));
        let x = random_input(1, 192, 3, 1);
        let latent = m.encode(&x).unwrap();
        assert_eq!(latent.vector(0).len(), 192 * 64);
        let last = Latent { mode: LatentMode::LastStep, ..latent };
        assert_eq!(last.vector(0).len(), 64);
        assert_eq!(m.impute(&x).unwrap().shape(), &[1, 192, 12]);
    }

    #[test]
    fn zero_weights_give_zero_latent_and_output() {
        for mode in [LatentMode::LastStep, LatentMode::ConcatAll] {
            let mut m = small_imputer(mode, false, 3);
            zero_all(&mut m);
            let x = random_input(2, 7, 3, 4);
            let latent = m.encode(&x).unwrap();
            assert!(latent.sequence.data().iter().all(|v| *v == 0.0));
            let y = m.decode(&latent, 7).unwrap();
            assert_eq!(y.shape(), &[2, 7, 12]);
            assert!(y.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn impute_is_decode_of_encode() {
        for (mode, att) in [(LatentMode::LastStep, false), (LatentMode::ConcatAll, true)] {
            let m = small_imputer(mode, att, 5);
            let x = random_input(3, 9, 3, 6);
            let direct = m.impute(&x).unwrap();
            let staged = m.decode(&m.encode(&x).unwrap(), 9).unwrap();
            assert!(direct.max_abs_diff(&staged) < 1e-12);
        }
    }

    #[test]
    fn last_step_decodes_any_length() {
        let m = small_imputer(LatentMode::LastStep, false, 7);
        let latent = m.encode(&random_input(1, 5, 3, 8)).unwrap();
        assert_eq!(m.decode(&latent, 11).unwrap().shape(), &[1, 11, 12]);
        let c = small_imputer(LatentMode::ConcatAll, false, 7);
        let latent = c.encode(&random_input(1, 5, 3, 8)).unwrap();
        assert!(matches!(c.decode(&latent, 11), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_state_attention_feeds_that_state() {
        // With one encoder state, the context is that state, so the decoder
        // input is [proj(h), h] at every step.
        let m = small_imputer(LatentMode::LastStep, true, 9);
        let x = random_input(2, 1, 3, 10);
        let with_attention = m.impute(&x).unwrap();

        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &m);
        let steps = time_steps(&mut g, &x).unwrap();
        let (states, finals) = m.encode_graph(&mut g, &vars, &steps).unwrap();
        let [_, proj, dec, head] = m.split_vars(&vars);
        let latent = m.latent_proj.forward(&mut g, proj, states[0]).unwrap();
        let input = g.concat(&[latent, states[0]]).unwrap();
        let mut s = finals.clone();
        let top = m.decoder.step(&mut g, dec, input, &mut s).unwrap();
        let y = m.head.forward(&mut g, head, top).unwrap();
        let manual = g.value(y).data().to_vec();
        assert!(with_attention.data().iter().zip(&manual).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = small_imputer(LatentMode::ConcatAll, false, 11);
        assert!(matches!(m.impute(&random_input(1, 4, 2, 1)), Err(Error::ShapeMismatch { .. })));
        let c = ClassifierModel::new(ClassifierConfig::stage2(12).narrowed(8, 3), &mut SeededRng::new(0));
        assert!(matches!(c.classify(&random_input(1, 8, 3, 1)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_counts() {
        let mut rng = SeededRng::new(0);
        let s2 = ClassifierModel::new(ClassifierConfig::stage2(12), &mut rng);
        let base = ClassifierModel::new(ClassifierConfig::baseline(3), &mut rng);
        assert_eq!(s2.conv_layer_count(), 7);
        assert_eq!(s2.config.conv_layers(), 7);
        assert_eq!(base.conv_layer_count(), 13);
        assert_eq!(base.config.conv_layers(), 13);
        assert!(base.scalar_count() > s2.scalar_count());
        let narrow = ClassifierModel::new(ClassifierConfig::baseline(3).narrowed(4, 5), &mut rng);
        assert_eq!(narrow.conv_layer_count(), 13);
    }

    #[test]
    fn probabilities_sum_to_one_and_zero_head_is_uniform() {
        let mut rng = SeededRng::new(2);
        let mut c = ClassifierModel::new(ClassifierConfig::baseline(3).narrowed(8, 5), &mut rng);
        let x = random_input(4, 20, 3, 3);
        let p = c.classify(&x).unwrap();
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        zero_all(&mut c.head);
        let p = c.classify(&x).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn eval_predictions_are_batch_size_invariant() {
        let mut rng = SeededRng::new(4);
        let imputer = small_imputer(LatentMode::ConcatAll, false, 12);
        let classifier = ClassifierModel::new(ClassifierConfig::stage2(12).narrowed(8, 5), &mut rng);
        let model = ResNetPlusPlus::new(imputer, classifier, ClassifierInput::ImputedSignal).unwrap();
        let x = random_input(5, 16, 3, 13);
        let batch = model.predict(&x).unwrap();
        for b in 0..5 {
            let one = Tensor::new(vec![1, 16, 3], x.data()[b * 48..(b + 1) * 48].to_vec()).unwrap();
            let p = model.predict(&one).unwrap();
            assert!((p.data()[0] - batch.data()[2 * b]).abs() < 1e-6);
            assert_eq!(model.predict(&one).unwrap(), p);
        }
    }

    #[test]
    fn latent_sequence_mode_uses_hidden_width() {
        let mut rng = SeededRng::new(5);
        let imputer = small_imputer(LatentMode::ConcatAll, false, 14);
        let classifier = ClassifierModel::new(ClassifierConfig::stage2(6).narrowed(8, 3), &mut rng);
        let model = ResNetPlusPlus::new(imputer.clone(), classifier, ClassifierInput::LatentSequence).unwrap();
        assert_eq!(model.predict(&random_input(2, 10, 3, 1)).unwrap().shape(), &[2, 2]);
        let wrong = ClassifierModel::new(ClassifierConfig::stage2(12).narrowed(8, 3), &mut rng);
        assert!(ResNetPlusPlus::new(imputer, wrong, ClassifierInput::LatentSequence).is_err());
    }

    #[test]
    fn outputs_stay_finite_on_large_inputs() {
        let m = small_imputer(LatentMode::ConcatAll, true, 15);
        let x = random_input(2, 12, 3, 16).map(|v| (v * 10.0).clamp(-10.0, 10.0));
        assert!(m.impute(&x).unwrap().all_finite());
    }
}
