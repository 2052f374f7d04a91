//! Python bindings. Points are `[x, y]` lists; trajectories are lists of
//! points.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use missformer::corrupt::{self, CorruptionConfig, InputMode};
use missformer::eval::{self, EvalTask};
use missformer::model::PeVariant;
use missformer::training::{self, LrSchedule, SplitRange, Task, TrainConfig};
use missformer::trajgen::{self, GeneratorConfig};
use missformer::{checkpoint, rng, Error};

type Point = [f64; 2];

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Diverged { .. } | Error::NonFiniteGradient(_)) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: trajgen::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (positions, dt=1.0))]
    fn new(positions: Vec<Point>, dt: f64) -> PyResult<Self> {
        Ok(PyTrajectory {
            inner: trajgen::Trajectory::new(positions, dt).map_err(py_err)?,
        })
    }

    #[getter]
    fn positions(&self) -> Vec<Point> {
        self.inner.positions.clone()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(k={}, dt={})", self.inner.len(), self.inner.dt)
    }
}

#[pyclass(name = "ObservedSequence", from_py_object)]
#[derive(Clone)]
struct PyObserved {
    inner: corrupt::ObservedSequence,
}

#[pymethods]
impl PyObserved {
    #[new]
    #[pyo3(signature = (values, missing, mode="positions"))]
    fn new(values: Vec<Point>, missing: Vec<bool>, mode: &str) -> PyResult<Self> {
        Ok(PyObserved {
            inner: corrupt::ObservedSequence::new(values, missing, parse(mode)?).map_err(py_err)?,
        })
    }

    #[getter]
    fn values(&self) -> Vec<Point> {
        self.inner.values.clone()
    }

    #[getter]
    fn missing(&self) -> Vec<bool> {
        self.inner.missing.clone()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    fn to_offsets(&self) -> PyResult<Self> {
        Ok(PyObserved {
            inner: corrupt::to_offsets(&self.inner).map_err(py_err)?,
        })
    }

    /// Replaces the last `n_pred` steps with missing tokens.
    fn mask_tail(&self, n_pred: usize) -> PyResult<Self> {
        Ok(PyObserved {
            inner: corrupt::mask_tail_for_prediction(&self.inner, n_pred).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ObservedSequence(k={}, missing={}, mode={})",
            self.inner.len(),
            self.inner.n_missing(),
            self.inner.mode
        )
    }
}

fn regime(name: &str) -> PyResult<GeneratorConfig> {
    match name {
        "object" => Ok(GeneratorConfig::object()),
        "pedestrian" => Ok(GeneratorConfig::pedestrian()),
        other => Err(PyValueError::new_err(format!("unknown regime `{other}`"))),
    }
}

fn unwrap_corpus(corpus: &[PyTrajectory]) -> Vec<trajgen::Trajectory> {
    corpus.iter().map(|t| t.inner.clone()).collect()
}

/// Synthetic trajectories of the `object` or `pedestrian` regime.
#[pyfunction]
#[pyo3(signature = (regime_name, n, seed=0, lengths=None, dynamics="per-step"))]
fn generate(
    regime_name: &str,
    n: usize,
    seed: u64,
    lengths: Option<(usize, usize)>,
    dynamics: &str,
) -> PyResult<Vec<PyTrajectory>> {
    let mut cfg = regime(regime_name)?.with_seed(seed);
    cfg.dynamics = parse(dynamics)?;
    if let Some((lo, hi)) = lengths {
        cfg = cfg.with_lengths(lo, hi);
    }
    Ok(trajgen::generate(&cfg, n)
        .map_err(py_err)?
        .into_iter()
        .map(|inner| PyTrajectory { inner })
        .collect())
}

/// Noise plus missing tokens; `index` selects the random stream so every
/// trajectory of a corpus gets independent draws.
#[pyfunction]
#[pyo3(name = "corrupt", signature = (traj, noise_std=0.0, missing_prob=0.0, seed=0, index=0))]
fn corrupt_py(traj: &PyTrajectory, noise_std: f64, missing_prob: f64, seed: u64, index: u64) -> PyResult<PyObserved> {
    let cfg = CorruptionConfig::new(noise_std, missing_prob).with_seed(seed);
    cfg.validate().map_err(py_err)?;
    let inner = corrupt::corrupt_with(&traj.inner, &cfg, &mut rng::stream(seed, index)).map_err(py_err)?;
    Ok(PyObserved { inner })
}

#[pyfunction]
#[pyo3(signature = (estimate, truth, start=0, end=None))]
fn ade(estimate: Vec<Point>, truth: Vec<Point>, start: usize, end: Option<usize>) -> PyResult<f64> {
    let end = end.unwrap_or(truth.len());
    eval::ade(&estimate, &truth, start..end).map_err(py_err)
}

#[pyfunction]
fn fde(estimate: Vec<Point>, truth: Vec<Point>) -> PyResult<f64> {
    eval::fde(&estimate, &truth).map_err(py_err)
}

/// Least-squares constant-velocity fit over the observed steps, evaluated
/// at every step plus `horizon` extra ones.
#[pyfunction]
#[pyo3(signature = (obs, horizon=0))]
fn linear_baseline(obs: &PyObserved, horizon: usize) -> PyResult<Vec<Point>> {
    eval::linear_baseline(&obs.inner, horizon).map_err(py_err)
}

/// `(input_scale, output_scale)` suited to `corpus`.
#[pyfunction]
#[pyo3(signature = (corpus, mode="positions"))]
fn suggest_scales(corpus: Vec<PyTrajectory>, mode: &str) -> PyResult<(f64, f64)> {
    Ok(training::suggest_scales(&unwrap_corpus(&corpus), parse(mode)?))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: missformer::MissFormer,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_model=64, heads=1, layers=1, mode="positions", pe="literal", input_scale=1.0, output_scale=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d_model: usize,
        heads: usize,
        layers: usize,
        mode: &str,
        pe: &str,
        input_scale: f64,
        output_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut c = missformer::ModelConfig::new(d_model, heads, layers);
        c.input_mode = parse::<InputMode>(mode)?;
        c.pe = parse::<PeVariant>(pe)?;
        c.input_scale = input_scale;
        c.output_scale = output_scale;
        c.seed = seed;
        Ok(PyModel {
            inner: missformer::MissFormer::new(c).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(py_err)?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, &checkpoint::Meta::new()).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.config().input_mode.to_string()
    }

    /// Position estimates for every input step plus `horizon` future steps.
    #[pyo3(signature = (obs, horizon=0))]
    fn predict(&self, obs: &PyObserved, horizon: usize) -> PyResult<Vec<Point>> {
        self.inner.predict_full(&obs.inner, horizon).map_err(py_err)
    }

    /// Attention weights indexed `[layer][head][query][key]`.
    fn attention(&self, obs: &PyObserved) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let (_, rec) = self.inner.encoder_forward(&obs.inner).map_err(py_err)?;
        Ok(rec
            .layers
            .iter()
            .map(|heads| heads.iter().map(|m| (0..m.k).map(|i| m.row(i).to_vec()).collect()).collect())
            .collect())
    }

    /// Trains in place and returns the per-epoch losses.
    #[pyo3(signature = (corpus, epochs=100, task="reconstruction", noise_std=0.0, missing_prob=0.0, lr=1e-3, batch_size=64, seed=0, lr_schedule="constant", warmup_epochs=0, grad_clip=None, curriculum_switch=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: Vec<PyTrajectory>,
        epochs: usize,
        task: &str,
        noise_std: f64,
        missing_prob: f64,
        lr: f64,
        batch_size: usize,
        seed: u64,
        lr_schedule: &str,
        warmup_epochs: usize,
        grad_clip: Option<f64>,
        curriculum_switch: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        let corpus = unwrap_corpus(&corpus);
        let tcfg = TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size,
            task: parse::<Task>(task)?,
            curriculum_switch_epoch: curriculum_switch,
            lr_schedule: parse::<LrSchedule>(lr_schedule)?,
            warmup_epochs,
            grad_clip,
            seed,
            ..TrainConfig::default()
        };
        let ccfg = CorruptionConfig::new(noise_std, missing_prob).with_seed(seed);
        let model = &mut self.inner;
        let run = py
            .detach(|| training::train(model, &corpus, &ccfg, &tcfg))
            .map_err(py_err)?;
        Ok(run.losses)
    }

    /// `{"task", "n", "ade", "ade_std", "fde"}` on `corpus`.
    #[pyo3(signature = (corpus, task="reconstruction", noise_std=0.0, missing_prob=0.0, seed=0, obs_len=None, pred_len=None))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        corpus: Vec<PyTrajectory>,
        task: &str,
        noise_std: f64,
        missing_prob: f64,
        seed: u64,
        obs_len: Option<usize>,
        pred_len: Option<usize>,
    ) -> PyResult<(String, usize, f64, f64, f64)> {
        let corpus = unwrap_corpus(&corpus);
        let mut t = EvalTask::new(parse::<Task>(task)?);
        if let (Some(o), Some(p)) = (obs_len, pred_len) {
            t = t.with_split(SplitRange::fixed(o, p));
        }
        let ccfg = CorruptionConfig::new(noise_std, missing_prob).with_seed(seed);
        let r = eval::evaluate(&self.inner, &corpus, &ccfg, &t).map_err(py_err)?;
        Ok((r.task.to_string(), r.n_samples, r.ade, r.ade_std, r.fde))
    }
}

#[pymodule]
fn missformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyObserved>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_py, m)?)?;
    m.add_function(wrap_pyfunction!(ade, m)?)?;
    m.add_function(wrap_pyfunction!(fde, m)?)?;
    m.add_function(wrap_pyfunction!(linear_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(suggest_scales, m)?)?;
    Ok(())
}
