//! Run configuration: a sectioned `key = value` file, every field optional.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::checkpoint::ImputerSection;
use crate::error::{Error, Result};
use crate::experiments::{Benchmark, ComparisonConfig, ScenarioOptions, SyntheticClass, SyntheticSpec, ANTERO_MI, HELD_OUT_CLASS, INFERIOR_MI};
use crate::models::{ClassifierConfig, ClassifierInput, ImputerConfig};
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;

pub const DATA_DIR_ENV: &str = "LIMBCHAN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Empty means `LIMBCHAN_DATA_DIR`.
    pub data_dir: String,
    pub preprocess: PreprocessSection,
    pub split: SplitSection,
    pub synthetic: SyntheticSection,
    pub imputer: ImputerSection,
    pub classifier: ClassifierSection,
    pub baseline: ClassifierSection,
    pub train_imputer: TrainSection,
    pub train_classifier: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub target_rate: f64,
    pub frame_len: usize,
    pub stride: usize,
    pub remove_baseline: bool,
    pub baseline_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub scenario: u32,
    pub train_fraction: f64,
    pub group_by_patient: bool,
    /// Comma-separated class names trained on in scenario 2.
    pub antero_classes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_frames: usize,
    pub frame_len: usize,
    pub components: usize,
    pub independent_scale: f64,
    pub noise: f64,
    pub evidence_lead: String,
    pub evidence_gain: f64,
    pub tie_bumped_leads: bool,
    pub bump_amplitude: f64,
    pub bump_width: f64,
    /// Share of frames in the trained class (bump on II).
    pub trained_fraction: f64,
    /// Share of frames in the held-out class (bump on III).
    pub held_out_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Every convolution width is divided by this.
    pub width_divisor: usize,
    pub kernel: usize,
    pub dropout: f64,
    /// `imputed_signal` or `latent_sequence`; ignored for the baseline.
    pub input: String,
    /// Train the imputer jointly with the classifier.
    pub fine_tune: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    /// 0 disables the target-loss stop.
    pub target_loss: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: Benchmark::cross_distribution().seed,
            data_dir: String::new(),
            preprocess: PreprocessSection::default(),
            split: SplitSection::default(),
            synthetic: SyntheticSection::default(),
            imputer: ImputerSection::from_config(&ImputerConfig::default()),
            classifier: ClassifierSection::default(),
            baseline: ClassifierSection::default(),
            train_imputer: TrainSection::from_config(&TrainConfig::imputer_defaults()),
            train_classifier: TrainSection::from_config(&TrainConfig::classifier_defaults()),
        }
    }
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            target_rate: p.target_rate,
            frame_len: p.frame_len,
            stride: p.stride,
            remove_baseline: p.remove_baseline,
            baseline_window: p.baseline_window,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            scenario: 1,
            train_fraction: 0.8,
            group_by_patient: false,
            antero_classes: ANTERO_MI.join(","),
        }
    }
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = Benchmark::cross_distribution().data;
        Self {
            n_frames: d.n_frames,
            frame_len: d.t,
            components: d.components,
            independent_scale: d.independent_scale,
            noise: d.noise,
            evidence_lead: d.evidence_lead.unwrap_or_default(),
            evidence_gain: d.evidence_gain,
            tie_bumped_leads: d.tie_bumped_leads,
            bump_amplitude: d.bump_amplitude,
            bump_width: d.bump_width,
            trained_fraction: d.classes.first().map_or(0.25, |c| c.fraction),
            held_out_fraction: d.classes.get(1).map_or(0.25, |c| c.fraction),
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            kernel: 16,
            dropout: 0.2,
            input: ClassifierInput::ImputedSignal.as_str().into(),
            fine_tune: false,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_config(&TrainConfig::classifier_defaults())
    }
}

impl ClassifierSection {
    fn shape(&self, base: ClassifierConfig) -> Result<ClassifierConfig> {
        if self.width_divisor == 0 || self.kernel == 0 {
            return Err(Error::Config("width_divisor and kernel must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        let mut c = base.narrowed(self.width_divisor, self.kernel);
        c.dropout = self.dropout;
        Ok(c)
    }

    /// Stage 2 layout; input channels are fixed at training time.
    pub fn stage2(&self) -> Result<ClassifierConfig> {
        self.shape(ClassifierConfig::stage2(12))
    }

    pub fn baseline(&self, leads: usize) -> Result<ClassifierConfig> {
        self.shape(ClassifierConfig::baseline(leads))
    }

    pub fn input_mode(&self) -> Result<ClassifierInput> {
        ClassifierInput::parse(&self.input)
    }
}

impl TrainSection {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            patience: c.patience.unwrap_or(0),
            validation_fraction: c.validation_fraction,
            clip_norm: c.clip_norm.unwrap_or(0.0),
            target_loss: c.target_loss.unwrap_or(0.0),
        }
    }

    pub fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let positive = |v: f64| (v > 0.0).then_some(v);
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            patience: (self.patience > 0).then_some(self.patience),
            validation_fraction: self.validation_fraction,
            clip_norm: positive(self.clip_norm),
            target_loss: positive(self.target_loss),
            ..TrainConfig::imputer_defaults()
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// SHA-256 of the effective configuration text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check every section converts.
    pub fn validate(&self) -> Result<()> {
        self.preprocess()?;
        self.scenario_options()?;
        self.synthetic_spec()?.validate()?;
        self.comparison()?;
        Ok(())
    }

    pub fn data_dir(&self) -> Option<std::path::PathBuf> {
        if !self.data_dir.is_empty() {
            return Some(self.data_dir.clone().into());
        }
        std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(Into::into)
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        let p = &self.preprocess;
        if !(p.target_rate > 0.0) || p.frame_len == 0 || p.stride == 0 || !(p.baseline_window > 0.0) {
            return Err(Error::Config("preprocess rates, lengths and window must be positive".into()));
        }
        Ok(PreprocessConfig {
            target_rate: p.target_rate,
            frame_len: p.frame_len,
            stride: p.stride,
            remove_baseline: p.remove_baseline,
            baseline_window: p.baseline_window,
        })
    }

    pub fn scenario_options(&self) -> Result<ScenarioOptions> {
        let s = &self.split;
        if !(0.0..=1.0).contains(&s.train_fraction) {
            return Err(Error::Config(format!("train_fraction {} not in [0, 1]", s.train_fraction)));
        }
        let antero_classes: Vec<String> = s.antero_classes.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
        if let Some(bad) = antero_classes.iter().find(|c| crate::wfdb::DiagnosisLabel::from_class_name(c).is_unknown()) {
            return Err(Error::Config(format!("unknown class {bad:?} in antero_classes")));
        }
        Ok(ScenarioOptions {
            train_fraction: s.train_fraction,
            group_by_record: s.group_by_patient,
            antero_classes,
        })
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = &self.synthetic;
        Ok(SyntheticSpec {
            n_frames: s.n_frames,
            t: s.frame_len,
            components: s.components,
            independent_scale: s.independent_scale,
            noise: s.noise,
            evidence_lead: (!s.evidence_lead.is_empty()).then(|| s.evidence_lead.clone()),
            evidence_gain: s.evidence_gain,
            tie_bumped_leads: s.tie_bumped_leads,
            bump_amplitude: s.bump_amplitude,
            bump_width: s.bump_width,
            classes: vec![
                SyntheticClass { name: INFERIOR_MI.into(), bump_lead: 0, fraction: s.trained_fraction },
                SyntheticClass { name: HELD_OUT_CLASS.into(), bump_lead: 1, fraction: s.held_out_fraction },
            ],
            seed: self.seed,
            ..SyntheticSpec::default()
        })
    }

    /// Model and training settings; every training seed derives from `seed`.
    pub fn comparison(&self) -> Result<ComparisonConfig> {
        Ok(ComparisonConfig {
            imputer: self.imputer.to_config()?,
            imputer_train: self.train_imputer.to_config(self.seed)?,
            classifier: self.classifier.stage2()?,
            baseline: self.baseline.baseline(3)?,
            classifier_train: self.train_classifier.to_config(self.seed)?,
            input_mode: self.classifier.input_mode()?,
            fine_tune: self.classifier.fine_tune,
        })
    }

    /// The desk-scale synthetic benchmark settings.
    pub fn benchmark() -> Self {
        let b = Benchmark::cross_distribution();
        let c = &b.comparison;
        let narrowed = |d: &ClassifierConfig| ClassifierSection {
            width_divisor: 32 / d.stem_width.max(1),
            kernel: d.kernel,
            dropout: d.dropout,
            input: c.input_mode.as_str().into(),
            fine_tune: c.fine_tune,
        };
        Self {
            seed: b.seed,
            imputer: ImputerSection::from_config(&c.imputer),
            classifier: narrowed(&c.classifier),
            baseline: narrowed(&c.baseline),
            train_imputer: TrainSection::from_config(&c.imputer_train),
            train_classifier: TrainSection::from_config(&c.classifier_train),
            ..Self::default()
        }
    }
}
