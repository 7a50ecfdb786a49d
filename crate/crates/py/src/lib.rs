//! Python bindings: configuration, scoring, the assignment solver, feature
//! extraction and trained models.

use std::path::PathBuf;

use diarkit::cli::{self, Config};
use diarkit::pipeline::{self, Diarizer};
use diarkit::score::{self, BucketRule, RttmSegment};
use diarkit::tsvad::TsVadModel;
use diarkit::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(diarkit, DiarkitError, PyException);
create_exception!(diarkit, ConfigError, DiarkitError);
create_exception!(diarkit, IoError, DiarkitError);
create_exception!(diarkit, NumericalError, DiarkitError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match cli::exit_code(&e) {
        cli::EXIT_CONFIG => ConfigError::new_err(msg),
        cli::EXIT_IO => IoError::new_err(msg),
        _ => NumericalError::new_err(msg),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    match t.shape() {
        [_, c] if *c > 0 => t.data().chunks(*c).map(<[f64]>::to_vec).collect(),
        [r, _] => vec![Vec::new(); *r],
        _ => vec![t.data().to_vec()],
    }
}

type Segment = (String, f64, f64, String);

fn segments(segs: Vec<RttmSegment>) -> Vec<Segment> {
    segs.into_iter().map(|s| (s.session, s.onset, s.duration, s.speaker)).collect()
}

/// A validated configuration.
#[pyclass(name = "Config", module = "diarkit", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Config::from_toml(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> String {
        format!("{:?}", self.inner.model.variant)
    }
}

/// A trained TS-VAD or EDA model loaded from a checkpoint.
#[pyclass(name = "Diarizer", module = "diarkit")]
struct PyDiarizer {
    model: Diarizer,
    config: Config,
}

#[pymethods]
impl PyDiarizer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, config) = cli::load_checkpoint(&path).map_err(to_py)?;
        Ok(Self { model, config })
    }

    #[getter]
    fn variant(&self) -> String {
        format!("{:?}", self.config.model.variant)
    }

    fn num_parameters(&self) -> usize {
        self.model.params().num_scalars()
    }

    /// Segments `(session, onset, duration, speaker)` for one WAV file.
    /// `profiles` are reference segments used instead of the first pass.
    #[pyo3(signature = (wav, session = None, profiles = None))]
    fn diarize(&self, wav: PathBuf, session: Option<String>, profiles: Option<Vec<Segment>>) -> PyResult<Vec<Segment>> {
        let name = session.unwrap_or_else(|| wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let audio = pipeline::read_wav(&wav, self.config.features.sample_rate).map_err(to_py)?;
        let oracle: Option<Vec<RttmSegment>> =
            profiles.map(|p| p.into_iter().map(|(s, o, d, k)| RttmSegment::new(s, o, d, k)).collect());
        let out = pipeline::infer_session(
            &name,
            &audio,
            &self.model,
            &self.config.features,
            &self.config.inference,
            oracle.as_deref(),
        )
        .map_err(to_py)?;
        Ok(segments(out))
    }
}

/// A TS-VAD model on raw feature and profile matrices.
#[pyclass(name = "TsVad", module = "diarkit")]
struct PyTsVad {
    model: TsVadModel,
}

#[pymethods]
impl PyTsVad {
    /// A freshly initialized model; `variant` is a config variant name and
    /// `preset` is `paper` or `toy`.
    #[new]
    #[pyo3(signature = (variant = "blstm_time_trans_spk", preset = "toy", seed = 0))]
    fn new(variant: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = Config::from_toml(&format!("[model]\nvariant = \"{variant}\"\npreset = \"{preset}\"\n")).map_err(to_py)?;
        match cli::build_model(&cfg, seed).map_err(to_py)? {
            Diarizer::TsVad(model) => Ok(Self { model }),
            Diarizer::Eda(_) => Err(ConfigError::new_err(format!("`{variant}` is not a TS-VAD variant"))),
        }
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.model.config.frontend.input_dim
    }

    #[getter]
    fn profile_dim(&self) -> usize {
        self.model.config.isd.profile_dim
    }

    #[getter]
    fn downsample(&self) -> usize {
        self.model.downsample()
    }

    /// Frame embeddings `[T', E]` for features `[T, D]`.
    fn embeddings(&self, feats: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.model.embeddings(&matrix(feats)?).map_err(to_py)?))
    }

    /// Speech probabilities `[T', S]` for features `[T, D]` and profiles `[S, E]`.
    fn predict(&self, feats: Vec<Vec<f64>>, profiles: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.model.predict(&matrix(feats)?, &matrix(profiles)?).map_err(to_py)?))
    }
}

/// Parses RTTM text into `(session, onset, duration, speaker)` tuples.
#[pyfunction]
fn parse_rttm(text: &str) -> PyResult<Vec<Segment>> {
    Ok(segments(score::parse_rttm(text).map_err(to_py)?))
}

#[pyfunction]
fn write_rttm(segs: Vec<Segment>) -> String {
    let segs: Vec<RttmSegment> = segs.into_iter().map(|(s, o, d, k)| RttmSegment::new(s, o, d, k)).collect();
    score::write_rttm(&segs)
}

/// Diarization error of RTTM text `hyp` against `reference`, as a dict with
/// the same keys as the JSON report.
#[pyfunction]
#[pyo3(signature = (reference, hyp, collar = 0.25, buckets = "1-10,11+"))]
fn score_rttm<'py>(py: Python<'py>, reference: &str, hyp: &str, collar: f64, buckets: &str) -> PyResult<Bound<'py, PyAny>> {
    let r = score::parse_rttm(reference).map_err(to_py)?;
    let h = score::parse_rttm(hyp).map_err(to_py)?;
    let rule = BucketRule::parse(buckets).map_err(to_py)?;
    let report = score::compute_der(&r, &h, collar, &rule).map_err(to_py)?;
    let json = py.import("json")?;
    json.call_method1("loads", (report.to_json(),))
}

/// Minimum-cost assignment: `result[i]` is the column given to row `i`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    diarkit::eda::hungarian(&cost).map_err(to_py)
}

/// Per-column sliding median of binary decisions `[T, S]`.
#[pyfunction]
#[pyo3(signature = (decisions, taps = 11))]
fn median_filter(decisions: Vec<Vec<f64>>, taps: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&pipeline::median_filter(&matrix(decisions)?, taps).map_err(to_py)?))
}

/// Log-mel features `[T, mel_bins]` of mono samples.
#[pyfunction]
#[pyo3(signature = (audio, config = None))]
fn logmel(audio: Vec<f64>, config: Option<&PyConfig>) -> PyResult<Vec<Vec<f64>>> {
    let features = config.map(|c| c.inner.features.clone()).unwrap_or_default();
    Ok(rows(&pipeline::logmel(&audio, &features).map_err(to_py)?))
}

/// Runs the `simulate` command; returns the manifests written.
#[pyfunction]
#[pyo3(signature = (config, jobs = 1))]
fn simulate(config: &PyConfig, jobs: usize) -> PyResult<Vec<PathBuf>> {
    Ok(cli::cmd_simulate(&config.inner, jobs)
        .map_err(to_py)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

/// Runs the `train` command; returns the per-step losses.
#[pyfunction]
#[pyo3(signature = (config, jobs = 1))]
fn train(config: &PyConfig, jobs: usize) -> PyResult<Vec<f64>> {
    Ok(cli::cmd_train(&config.inner, jobs).map_err(to_py)?.losses)
}

/// Results of the built-in consistency checks as `(name, passed, detail)`.
#[pyfunction]
fn selftest(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    for (name, ok, detail) in cli::selftest() {
        d.set_item(name, (ok, detail))?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "diarkit")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("DiarkitError", py.get_type::<DiarkitError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("IoError", py.get_type::<IoError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDiarizer>()?;
    m.add_class::<PyTsVad>()?;
    m.add_function(wrap_pyfunction!(parse_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(write_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(score_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
