//! Python bindings: segment long recordings with a trained checkpoint, plus
//! the detection, voting and metric primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vocalseg::audio::{decode_wav as decode, WindowConfig};
use vocalseg::checkpoint::Model as CoreModel;
use vocalseg::features::FrontEnd;
use vocalseg::metrics::BinaryCounts;
use vocalseg::segment::{FrameDecision, StreamConfig};
use vocalseg::synth::{generate_soundscape, SoundscapeSpec};
use vocalseg::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Unreadable { .. } => PyIOError::new_err(e.to_string()),
        Error::Config { .. }
        | Error::LengthMismatch { .. }
        | Error::LabelOutOfRange { .. }
        | Error::NoPositiveFrame
        | Error::SingleClass
        | Error::OutOfOrder { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn window(overlap: f64) -> PyResult<WindowConfig> {
    let cfg = WindowConfig {
        overlap,
        ..WindowConfig::default()
    };
    cfg.validate().map_err(py_err)?;
    cfg.lookback().map_err(py_err)?;
    Ok(cfg)
}

/// Mono samples in [-1, 1] and the sample rate of a WAV file.
#[pyfunction]
fn decode_wav(py: Python<'_>, path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let buf = py.detach(|| decode(&path)).map_err(py_err)?;
    Ok((buf.samples, buf.sample_rate))
}

/// Number of frames covering `n_samples` at 16 kHz.
#[pyfunction]
#[pyo3(signature = (n_samples, overlap = 0.8))]
fn frame_count(n_samples: usize, overlap: f64) -> PyResult<usize> {
    Ok(window(overlap)?.frame_count(n_samples))
}

/// Merge horizon in frames for an overlap fraction.
#[pyfunction]
#[pyo3(signature = (overlap = 0.8))]
fn lookback(overlap: f64) -> PyResult<usize> {
    window(overlap)?.lookback().map_err(py_err)
}

/// Segments of a per-frame signal sequence as `(first, last, class)` with
/// 1-based frame indices.
#[pyfunction]
#[pyo3(signature = (is_signal, classes = None, overlap = 0.8))]
fn detect_segments(
    is_signal: Vec<bool>,
    classes: Option<Vec<usize>>,
    overlap: f64,
) -> PyResult<Vec<(usize, usize, usize)>> {
    let classes = classes.unwrap_or_else(|| vec![0; is_signal.len()]);
    if classes.len() != is_signal.len() {
        return Err(PyValueError::new_err("is_signal and classes differ in length"));
    }
    let decisions: Vec<FrameDecision> = is_signal
        .iter()
        .zip(&classes)
        .enumerate()
        .map(|(i, (&s, &c))| FrameDecision::hard(i + 1, s, c))
        .collect();
    let found = vocalseg::segment::detect_segments(&decisions, &window(overlap)?).map_err(py_err)?;
    Ok(found.iter().map(|d| (d.first, d.last, d.majority())).collect())
}

/// Majority class of a segment's positive frames; ties go to the smallest class.
#[pyfunction]
fn classify_segment(classes: Vec<usize>) -> PyResult<usize> {
    let span: Vec<FrameDecision> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| FrameDecision::hard(i + 1, true, c))
        .collect();
    vocalseg::segment::classify_segment(&span).map_err(py_err)
}

/// Precision, recall and accuracy in percent (None when undefined).
#[pyfunction]
#[pyo3(name = "binary_metrics")]
fn binary_metrics_py<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyDict>> {
    let c = BinaryCounts::new(tp, fp, fn_, tn);
    let d = PyDict::new(py);
    d.set_item("precision", c.precision())?;
    d.set_item("recall", c.recall())?;
    d.set_item("accuracy", c.accuracy())?;
    Ok(d)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    vocalseg::metrics::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn epoch_iterations(n_classes: usize, largest_class: usize, batch_size: usize) -> usize {
    vocalseg::dataset::epoch_iterations(n_classes, largest_class, batch_size)
}

/// Writes a synthetic soundscape and its ground truth; returns the event count.
#[pyfunction]
#[pyo3(signature = (wav_path, truth_path, duration_s = 60.0, n_events = 10, seed = 0))]
fn synthesize(
    py: Python<'_>,
    wav_path: PathBuf,
    truth_path: PathBuf,
    duration_s: f64,
    n_events: usize,
    seed: u64,
) -> PyResult<usize> {
    let spec = SoundscapeSpec {
        duration_s,
        n_events,
        ..SoundscapeSpec::default()
    };
    py.detach(|| {
        let (audio, truth) = generate_soundscape(&spec, seed)?;
        vocalseg::audio::write_wav(&wav_path, &audio)?;
        truth.write_json(&truth_path)?;
        Ok(truth.events.len())
    })
    .map_err(py_err)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    use clap::Parser;
    let argv = std::iter::once("vocalseg".to_string()).chain(args);
    let cli = match vocalseg::cli::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return i32::from(e.use_stderr());
        }
    };
    match py.detach(|| vocalseg::cli::run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            vocalseg::cli::exit_code(&e)
        }
    }
}

/// A trained checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: CoreModel,
    front: FrontEnd,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = CoreModel::load(&path).map_err(py_err)?;
        let front = FrontEnd::from_config(&inner.frontend).map_err(py_err)?;
        Ok(Self { inner, front })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.repertoire.names().to_vec()
    }

    /// Segments of one recording as dicts with recording, start_s, end_s,
    /// class, n_frames and mean_p_signal.
    #[pyo3(signature = (path, batch_frames = 256))]
    fn process<'py>(&self, py: Python<'py>, path: PathBuf, batch_frames: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = StreamConfig {
            batch_frames,
            ..StreamConfig::default()
        };
        let set = py
            .detach(|| vocalseg::segment::process_recording(&path, &self.inner, &self.front, &cfg))
            .map_err(py_err)?;
        set.segments
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("recording", &s.recording)?;
                d.set_item("start_s", s.start_s)?;
                d.set_item("end_s", s.end_s)?;
                d.set_item("class", self.inner.repertoire.name(s.class))?;
                d.set_item("n_frames", s.n_frames)?;
                d.set_item("mean_p_signal", s.mean_p_signal)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn pyvocalseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(decode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(lookback, m)?)?;
    m.add_function(wrap_pyfunction!(detect_segments, m)?)?;
    m.add_function(wrap_pyfunction!(classify_segment, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(epoch_iterations, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
