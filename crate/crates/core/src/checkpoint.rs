//! `LCW1` weight files and their TOML sidecars.
//!
//! ```text
//! "LCW1"  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 dim, f32 values }
//! ```
//!
//! The sidecar (`<file>.toml`) records what to build before loading the
//! weights: model kind, leads, layer sizes, mode flags and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::{Param, Parameterized};
use crate::models::{
    BlockSpec, ClassifierConfig, ClassifierInput, ClassifierModel, ImputerConfig, ImputerModel, LatentMode, ResNetPlusPlus,
};
use crate::preprocess::ChannelConfig;
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 4] = b"LCW1";

fn bad(reason: impl Into<String>) -> Error {
    Error::BadContainer {
        path: None,
        reason: reason.into(),
    }
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_weights(params: &[&Param]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated weight file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing LCW1 magic"));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(StoredTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Copy stored tensors into `params`, matching by name and shape. Every
/// parameter must be present.
pub fn load_into(params: Vec<&mut Param>, stored: &[StoredTensor]) -> Result<()> {
    if params.len() != stored.len() {
        return Err(Error::CheckpointMismatch(format!("model has {} tensors, file has {}", params.len(), stored.len())));
    }
    for p in params {
        let s = stored
            .iter()
            .find(|s| s.name == p.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("tensor {} missing", p.name)))?;
        if s.shape != p.value.shape() {
            return Err(Error::CheckpointMismatch(format!("{}: shape {:?} vs {:?}", p.name, s.shape, p.value.shape())));
        }
        p.value = Tensor::new(s.shape.clone(), s.values.iter().map(|&v| f64::from(v)).collect())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputerSection {
    pub hidden: usize,
    pub layers: usize,
    pub latent_mode: String,
    pub attention: bool,
    pub freeze_biases: bool,
    pub update_bias: f64,
    pub init_scale: f64,
}

impl Default for ImputerSection {
    fn default() -> Self {
        Self::from_config(&ImputerConfig::default())
    }
}

impl ImputerSection {
    pub fn from_config(c: &ImputerConfig) -> Self {
        Self {
            hidden: c.hidden,
            layers: c.layers,
            latent_mode: c.latent_mode.as_str().into(),
            attention: c.attention,
            freeze_biases: c.freeze_biases,
            update_bias: c.update_bias,
            init_scale: c.init_scale,
        }
    }

    pub fn to_config(&self) -> Result<ImputerConfig> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("imputer hidden size and layer count must be positive".into()));
        }
        Ok(ImputerConfig {
            hidden: self.hidden,
            layers: self.layers,
            latent_mode: LatentMode::parse(&self.latent_mode)?,
            attention: self.attention,
            freeze_biases: self.freeze_biases,
            update_bias: self.update_bias,
            init_scale: self.init_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSection {
    pub in_channels: usize,
    pub stem_width: usize,
    pub kernel: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub dropout: f64,
    pub conv_layers: usize,
}

impl ClassifierSection {
    pub fn from_config(c: &ClassifierConfig) -> Self {
        Self {
            in_channels: c.in_channels,
            stem_width: c.stem_width,
            kernel: c.kernel,
            widths: c.blocks.iter().map(|b| b.width).collect(),
            strides: c.blocks.iter().map(|b| b.stride).collect(),
            dropout: c.dropout,
            conv_layers: c.conv_layers(),
        }
    }

    pub fn to_config(&self) -> Result<ClassifierConfig> {
        if self.widths.len() != self.strides.len() {
            return Err(Error::Config("classifier widths and strides differ in length".into()));
        }
        Ok(ClassifierConfig {
            in_channels: self.in_channels,
            stem_width: self.stem_width,
            kernel: self.kernel,
            blocks: self.widths.iter().zip(&self.strides).map(|(&width, &stride)| BlockSpec { width, stride }).collect(),
            dropout: self.dropout,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Imputer,
    Resnetpp,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub seed: u64,
    pub leads: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputer: Option<ImputerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSection>,
}

/// A model restored from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Imputer(ImputerModel),
    Resnetpp(ResNetPlusPlus),
    Baseline { leads: ChannelConfig, model: ClassifierModel },
}

impl SavedModel {
    pub fn leads(&self) -> &ChannelConfig {
        match self {
            SavedModel::Imputer(m) => &m.channels,
            SavedModel::Resnetpp(m) => &m.imputer.channels,
            SavedModel::Baseline { leads, .. } => leads,
        }
    }

    pub fn sidecar(&self, seed: u64) -> Sidecar {
        let leads = self.leads().leads.clone();
        match self {
            SavedModel::Imputer(m) => Sidecar {
                kind: ModelKind::Imputer,
                seed,
                leads,
                classifier_input: None,
                imputer: Some(ImputerSection::from_config(&m.config)),
                classifier: None,
            },
            SavedModel::Resnetpp(m) => Sidecar {
                kind: ModelKind::Resnetpp,
                seed,
                leads,
                classifier_input: Some(m.input_mode.as_str().into()),
                imputer: Some(ImputerSection::from_config(&m.imputer.config)),
                classifier: Some(ClassifierSection::from_config(&m.classifier.config)),
            },
            SavedModel::Baseline { model, .. } => Sidecar {
                kind: ModelKind::Baseline,
                seed,
                leads,
                classifier_input: None,
                imputer: None,
                classifier: Some(ClassifierSection::from_config(&model.config)),
            },
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            SavedModel::Imputer(m) => m.params(),
            SavedModel::Resnetpp(m) => {
                let mut v = m.imputer.params();
                v.extend(m.classifier.params());
                v
            }
            SavedModel::Baseline { model, .. } => model.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            SavedModel::Imputer(m) => m.params_mut(),
            SavedModel::Resnetpp(m) => {
                let mut v = m.imputer.params_mut();
                v.extend(m.classifier.params_mut());
                v
            }
            SavedModel::Baseline { model, .. } => model.params_mut(),
        }
    }

    /// Build an untrained model of the shape a sidecar describes.
    pub fn skeleton(sidecar: &Sidecar) -> Result<Self> {
        let leads = ChannelConfig::standard(&sidecar.leads)?;
        let mut rng = SeededRng::new(0);
        Ok(match sidecar.kind {
            ModelKind::Imputer => {
                let cfg = section(&sidecar.imputer, "imputer")?.to_config()?;
                SavedModel::Imputer(ImputerModel::new(leads, cfg, &mut rng))
            }
            ModelKind::Resnetpp => {
                let icfg: ImputerSection = section(&sidecar.imputer, "imputer")?;
                let ccfg: ClassifierSection = section(&sidecar.classifier, "classifier")?;
                let mode = ClassifierInput::parse(sidecar.classifier_input.as_deref().unwrap_or("imputed_signal"))?;
                let imputer = ImputerModel::new(leads, icfg.to_config()?, &mut rng);
                let classifier = ClassifierModel::new(ccfg.to_config()?, &mut rng);
                SavedModel::Resnetpp(ResNetPlusPlus::new(imputer, classifier, mode)?)
            }
            ModelKind::Baseline => {
                let ccfg: ClassifierSection = section(&sidecar.classifier, "classifier")?;
                SavedModel::Baseline {
                    leads,
                    model: ClassifierModel::new(ccfg.to_config()?, &mut rng),
                }
            }
        })
    }

    /// Eval-mode class probabilities for a `[B, T, K̂]` batch.
    pub fn predict(&self, x_hat: &Tensor) -> Result<Tensor> {
        match self {
            SavedModel::Imputer(_) => Err(Error::Config("an imputer checkpoint cannot classify".into())),
            SavedModel::Resnetpp(m) => m.predict(x_hat),
            SavedModel::Baseline { model, .. } => model.classify(x_hat),
        }
    }
}

fn section<T: Clone>(s: &Option<T>, what: &str) -> Result<T> {
    s.clone().ok_or_else(|| Error::Config(format!("sidecar lacks [{what}]")))
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, model: &SavedModel, seed: u64) -> Result<()> {
    let bytes = encode_weights(&model.params());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let text = toml::to_string(&model.sidecar(seed)).map_err(|e| Error::Config(e.to_string()))?;
    let side = sidecar_path(path);
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_model(path: &Path) -> Result<(SavedModel, Sidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stored = decode_weights(&bytes).map_err(|e| match e {
        Error::BadContainer { reason, .. } => Error::BadContainer {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    })?;
    let mut model = SavedModel::skeleton(&sidecar)?;
    load_into(model.params_mut(), &stored)?;
    Ok((model, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imputer() -> ImputerModel {
        let cfg = ImputerConfig {
            hidden: 4,
            layers: 2,
            ..ImputerConfig::default()
        };
        ImputerModel::new(ChannelConfig::standard(&["II", "III", "aVF"]).unwrap(), cfg, &mut SeededRng::new(3))
    }

    #[test]
    fn weights_round_trip_at_single_precision() {
        let m = imputer();
        let stored = decode_weights(&encode_weights(&m.params())).unwrap();
        assert_eq!(stored[0].name, "encoder.gru0.U_z");
        let mut copy = ImputerModel::new(m.channels.clone(), m.config.clone(), &mut SeededRng::new(99));
        load_into(copy.params_mut(), &stored).unwrap();
        for (a, b) in m.params().iter().zip(copy.params()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-6);
        }
    }

    #[test]
    fn mismatched_and_corrupt_weights() {
        let m = imputer();
        let bytes = encode_weights(&m.params());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let stored = decode_weights(&bytes).unwrap();
        let mut other = ImputerModel::new(
            m.channels.clone(),
            ImputerConfig { hidden: 5, layers: 2, ..ImputerConfig::default() },
            &mut SeededRng::new(0),
        );
        assert!(matches!(load_into(other.params_mut(), &stored), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn save_and_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lcw");
        let mut rng = SeededRng::new(1);
        let clf = ClassifierModel::new(ClassifierConfig::stage2(12).narrowed(8, 3), &mut rng);
        let model = SavedModel::Resnetpp(ResNetPlusPlus::new(imputer(), clf, ClassifierInput::ImputedSignal).unwrap());
        save_model(&path, &model, 42).unwrap();
        let (back, side) = load_model(&path).unwrap();
        assert_eq!(side.seed, 42);
        assert_eq!(side.classifier.as_ref().unwrap().conv_layers, 7);
        assert_eq!(back.params().len(), model.params().len());
        assert_eq!(encode_weights(&back.params()), encode_weights(&model.params()));
    }
}
