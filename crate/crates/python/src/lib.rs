//! Python bindings: datasets, the imputer, saved classifiers and the
//! evaluation helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use limbchan_core::archive::{read_archive, write_archive};
use limbchan_core::autodiff::Tensor;
use limbchan_core::checkpoint::{load_model, save_model, SavedModel};
use limbchan_core::eval::f1_score as core_f1;
use limbchan_core::experiments::{build_scenario, make_synthetic_dataset, ScenarioOptions, SyntheticSpec};
use limbchan_core::models::{ClassifierConfig, ImputerConfig, ImputerModel};
use limbchan_core::preprocess::{downsample as core_downsample, ChannelConfig, FrameDataset};
use limbchan_core::train::{imputer_loss, train_imputer, TrainConfig};
use limbchan_core::wfdb::parse_header as core_parse_header;
use limbchan_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_tensor(frames: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let b = frames.len();
    let t = frames.first().map_or(0, Vec::len);
    let c = frames.first().and_then(|f| f.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * t * c);
    for f in &frames {
        if f.len() != t || f.iter().any(|row| row.len() != c) {
            return Err(PyValueError::new_err("frames must be a rectangular [batch][time][channel] list"));
        }
        f.iter().for_each(|row| data.extend_from_slice(row));
    }
    Tensor::new(vec![b, t, c], data).map_err(py_err)
}

fn from_tensor(x: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = x.shape();
    let (t, c) = (s[1], s[2]);
    x.data()
        .chunks(t * c)
        .map(|f| f.chunks(c).map(<[f64]>::to_vec).collect())
        .collect()
}

/// Parse a record header; returns its main fields as a dict.
#[pyfunction]
fn parse_header<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let h = core_parse_header(text).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("record_name", &h.record_name)?;
    d.set_item("n_signals", h.n_signals)?;
    d.set_item("sampling_rate", h.sampling_rate)?;
    d.set_item("n_samples", h.n_samples)?;
    d.set_item("leads", h.signals.iter().map(|s| s.lead_name.clone()).collect::<Vec<_>>())?;
    d.set_item("gains", h.signals.iter().map(|s| s.gain).collect::<Vec<_>>())?;
    d.set_item("comments", h.comments.clone())?;
    Ok(d)
}

/// Precision, recall and F1 with abnormal (`True`) as positive.
#[pyfunction]
fn f1_score<'py>(py: Python<'py>, predictions: Vec<bool>, labels: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let m = core_f1(&predictions, &labels).map_err(py_err)?;
    let d = PyDict::new(py);
    for (k, v) in [("tp", m.tp), ("fp", m.fp), ("fn", m.fn_), ("tn", m.tn)] {
        d.set_item(k, v)?;
    }
    for (k, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Resample one channel from `from_rate` to `to_rate` Hz.
#[pyfunction]
fn downsample(signal: Vec<f64>, from_rate: f64, to_rate: f64) -> PyResult<Vec<f64>> {
    let n = signal.len();
    let x = Tensor::new(vec![n, 1], signal).map_err(py_err)?;
    Ok(core_downsample(&x, from_rate, to_rate).map_err(py_err)?.into_data())
}

/// Convolution layer counts of the stage 2 and baseline classifiers.
#[pyfunction]
fn conv_layer_counts() -> (usize, usize) {
    (ClassifierConfig::stage2(12).conv_layers(), ClassifierConfig::baseline(3).conv_layers())
}

#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: FrameDataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic frames whose missing leads are linear images of II, III
    /// and aVF.
    #[staticmethod]
    #[pyo3(signature = (n_frames = 256, seed = 7))]
    fn synthetic(n_frames: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            n_frames,
            seed,
            ..SyntheticSpec::default()
        };
        Ok(Self {
            inner: make_synthetic_dataset(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_archive(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_archive(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn channel_names(&self) -> Vec<String> {
        self.inner.channel_names.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.iter().map(|l| l.class_name.clone()).collect()
    }

    /// Frames as a `[batch][time][channel]` list.
    fn frames(&self, indices: Vec<usize>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.inner.n) {
            return Err(PyValueError::new_err(format!("frame {i} out of range")));
        }
        Ok(from_tensor(&self.inner.batch(&indices)))
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if indices.iter().any(|&i| i >= self.inner.n) {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(Self {
            inner: self.inner.subset(&indices),
        })
    }

    /// `(train, test)` frame indices of a scenario split.
    #[pyo3(signature = (scenario, seed = 0, group_by_patient = false))]
    fn split(&self, scenario: u32, seed: u64, group_by_patient: bool) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let opts = ScenarioOptions {
            group_by_record: group_by_patient,
            ..ScenarioOptions::default()
        };
        let s = build_scenario(scenario, &self.inner, seed, &opts).map_err(py_err)?;
        Ok((s.train, s.test))
    }

    fn __len__(&self) -> usize {
        self.inner.n
    }
}

#[pyclass(name = "Imputer")]
struct PyImputer {
    inner: ImputerModel,
    seed: u64,
}

#[pymethods]
impl PyImputer {
    /// Fit an imputer reconstructing all twelve leads from `leads`.
    #[staticmethod]
    #[pyo3(signature = (dataset, leads, epochs = 10, hidden = 16, layers = 5, learning_rate = 3e-3, seed = 0))]
    fn train(dataset: &PyDataset, leads: Vec<String>, epochs: usize, hidden: usize, layers: usize, learning_rate: f64, seed: u64) -> PyResult<Self> {
        let channels = ChannelConfig::resolve(&leads, &dataset.inner.channel_names).map_err(py_err)?;
        let model = ImputerConfig {
            hidden,
            layers,
            init_scale: 2.0,
            ..ImputerConfig::default()
        };
        let cfg = TrainConfig {
            epochs,
            seed,
            learning_rate,
            batch_size: 16,
            patience: None,
            ..TrainConfig::imputer_defaults()
        };
        let (inner, _) = train_imputer(&dataset.inner, &channels, &model, &cfg, None).map_err(py_err)?;
        Ok(Self { inner, seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match load_model(&path).map_err(py_err)? {
            (SavedModel::Imputer(inner), side) => Ok(Self { inner, seed: side.seed }),
            _ => Err(PyValueError::new_err("not an imputer checkpoint")),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &SavedModel::Imputer(self.inner.clone()), self.seed).map_err(py_err)
    }

    #[getter]
    fn leads(&self) -> Vec<String> {
        self.inner.channels.leads.clone()
    }

    /// GRU layers in the encoder and decoder stacks.
    #[getter]
    fn gru_layers(&self) -> (usize, usize) {
        self.inner.gru_layer_counts()
    }

    /// Twelve-lead reconstruction of `[batch][time][observed lead]` frames.
    fn impute(&self, frames: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let x = to_tensor(frames)?;
        Ok(from_tensor(&self.inner.impute(&x).map_err(py_err)?))
    }

    /// Mean squared reconstruction error over every frame of `dataset`.
    fn loss(&self, dataset: &PyDataset) -> PyResult<f64> {
        let idx: Vec<usize> = (0..dataset.inner.n).collect();
        imputer_loss(&self.inner, &dataset.inner, &idx, 64).map_err(py_err)
    }
}

#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: SavedModel,
}

#[pymethods]
impl PyClassifier {
    /// Load a ResNet++ or baseline checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match load_model(&path).map_err(py_err)? {
            (SavedModel::Imputer(_), _) => Err(PyValueError::new_err("an imputer checkpoint cannot classify")),
            (inner, _) => Ok(Self { inner }),
        }
    }

    #[getter]
    fn leads(&self) -> Vec<String> {
        self.inner.leads().leads.clone()
    }

    /// `[healthy, abnormal]` probabilities for each frame of observed leads.
    fn predict(&self, frames: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<(f64, f64)>> {
        let x = to_tensor(frames)?;
        let p = self.inner.predict(&x).map_err(py_err)?;
        Ok(p.data().chunks(2).map(|r| (r[0], r[1])).collect())
    }
}

#[pymodule]
fn limbchan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_header, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(downsample, m)?)?;
    m.add_function(wrap_pyfunction!(conv_layer_counts, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyImputer>()?;
    m.add_class::<PyClassifier>()?;
    Ok(())
}
