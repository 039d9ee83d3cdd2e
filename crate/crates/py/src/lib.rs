//! Python bindings: clips, the trajectory model, rewards, metrics, training
//! and the closed-loop harness.
//!
//! Nested configs and reports cross the boundary as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rvla_core::data::{self, ManeuverKind, SourceTag, UnifiedClip};
use rvla_core::eval::{self, ModelPolicy, ObservationConfig, Policy, ZeroMotionPolicy};
use rvla_core::model::{self, ModelConfig};
use rvla_core::numerics::Tensor;
use rvla_core::rewards::{self, RewardConfig};
use rvla_core::training::{self, Exec, TrainConfig, TrainEvent};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: rvla_core::Error) -> PyErr {
    use rvla_core::Error as E;
    let m = e.to_string();
    match e {
        E::Io { .. } => PyIOError::new_err(m),
        E::NonFinite(_) | E::NumericAbort(_) => PyArithmeticError::new_err(m),
        _ => PyValueError::new_err(m),
    }
}

fn tensor(rows: &[[f64; 2]]) -> PyResult<Tensor> {
    Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<[f64; 2]> {
    (0..t.shape()[0]).map(|j| [t.get2(j, 0), t.get2(j, 1)]).collect()
}

/// `obj` → JSON text → `T`; `None` gives the default.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// One driving sample: ego history and future waypoints in the ego frame.
#[pyclass(name = "Clip", module = "rvla", skip_from_py_object)]
#[derive(Clone)]
struct PyClip {
    inner: UnifiedClip,
}

#[pymethods]
impl PyClip {
    #[getter]
    fn clip_id(&self) -> &str {
        &self.inner.clip_id
    }

    #[getter]
    fn source(&self) -> &'static str {
        self.inner.source.as_str()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn actions(&self) -> Vec<[f64; 2]> {
        self.inner.actions.clone()
    }

    /// `[t_offset, x, y, vx, vy, ax, ay]` per history state.
    #[getter]
    fn history(&self) -> Vec<[f64; 7]> {
        self.inner.history.iter().map(|s| s.values()).collect()
    }

    #[getter]
    fn reasoning_text(&self) -> Option<String> {
        self.inner.reasoning_text.clone()
    }

    fn prompt(&self) -> String {
        data::render_prompt(&self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: UnifiedClip = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyClip { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Clip(id={:?}, source={}, history={}, horizon={})",
            self.inner.clip_id,
            self.inner.source,
            self.inner.history.len(),
            self.inner.horizon()
        )
    }
}

fn unwrap_clips(clips: &[PyRef<'_, PyClip>]) -> Vec<UnifiedClip> {
    clips.iter().map(|c| c.inner.clone()).collect()
}

fn wrap_clips(clips: Vec<UnifiedClip>) -> Vec<PyClip> {
    clips.into_iter().map(|inner| PyClip { inner }).collect()
}

/// Encoder, action-query decoder, refinement module and Gaussian policy head.
#[pyclass(name = "Model", module = "rvla", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model whose queries are initialized from the trajectory
    /// statistics of `clips`.
    #[new]
    #[pyo3(signature = (clips, config=None, seed=7))]
    fn new(py: Python<'_>, clips: Vec<PyRef<'_, PyClip>>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = from_py(py, config)?;
        let stats = data::compute_trajectory_stats(&unwrap_clips(&clips)).map_err(err)?;
        let inner = model::Model::new(cfg, &stats, seed).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = model::load_checkpoint(&path).map_err(err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&path, &self.inner, &serde_json::Value::Null).map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Parallel decoder invocations so far.
    #[getter]
    fn decode_count(&self) -> u64 {
        self.inner.decode_count()
    }

    #[getter]
    fn autoregressive_decode_count(&self) -> u64 {
        self.inner.autoregressive_decode_count()
    }

    /// Mean trajectory from one decoder pass.
    fn predict(&self, clip: &PyClip) -> PyResult<Vec<[f64; 2]>> {
        Ok(rows(&self.inner.predict(&clip.inner).map_err(err)?.waypoints))
    }

    /// Token-by-token baseline with the same weights.
    fn predict_autoregressive(&self, clip: &PyClip) -> PyResult<Vec<[f64; 2]>> {
        Ok(rows(&self.inner.predict_autoregressive(&clip.inner).map_err(err)?))
    }

    fn same_params(&self, other: &PyModel) -> bool {
        self.inner.same_params(&other.inner)
    }
}

#[pyfunction]
#[pyo3(signature = (count, seed=7, kinds=None))]
fn synth_scenarios(count: usize, seed: u64, kinds: Option<Vec<String>>) -> PyResult<Vec<PyClip>> {
    let kinds: Vec<ManeuverKind> = match kinds {
        None => ManeuverKind::ALL.to_vec(),
        Some(ks) => ks.iter().map(|k| k.parse()).collect::<Result<_, _>>().map_err(err)?,
    };
    Ok(wrap_clips(data::synth_scenarios(count, &kinds, seed).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (source, path, horizon=10, include_origin_row=false))]
fn ingest(source: &str, path: PathBuf, horizon: usize, include_origin_row: bool) -> PyResult<Vec<PyClip>> {
    let tag: SourceTag = source.parse().map_err(err)?;
    let opts = data::IngestOptions {
        horizon,
        include_origin_row,
    };
    Ok(wrap_clips(data::ingest_adapter(tag, &path, &opts).map_err(err)?))
}

#[pyfunction]
fn read_corpus(path: PathBuf) -> PyResult<Vec<PyClip>> {
    Ok(wrap_clips(data::read_corpus(&path).map_err(err)?))
}

#[pyfunction]
fn write_corpus(path: PathBuf, clips: Vec<PyRef<'_, PyClip>>) -> PyResult<()> {
    data::write_corpus(&path, &unwrap_clips(&clips)).map_err(err)
}

#[pyfunction]
fn split(clips: Vec<PyRef<'_, PyClip>>, val_fraction: f64, seed: u64) -> PyResult<(Vec<PyClip>, Vec<PyClip>)> {
    let (t, v) = data::split(&unwrap_clips(&clips), val_fraction, seed).map_err(err)?;
    Ok((wrap_clips(t), wrap_clips(v)))
}

/// `{"mean": H×2, "var": H×2, "count": n}`.
#[pyfunction]
fn trajectory_stats<'py>(py: Python<'py>, clips: Vec<PyRef<'_, PyClip>>) -> PyResult<Bound<'py, PyAny>> {
    let s = data::compute_trajectory_stats(&unwrap_clips(&clips)).map_err(err)?;
    let out = serde_json::json!({ "mean": rows(&s.mean), "var": rows(&s.var), "count": s.count });
    to_py(py, &out)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, config=None))]
fn r_traj(py: Python<'_>, pred: Vec<[f64; 2]>, gt: Vec<[f64; 2]>, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: RewardConfig = from_py(py, config)?;
    rewards::r_traj(&tensor(&pred)?, &tensor(&gt)?, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, config=None))]
fn r_steer(py: Python<'_>, pred: Vec<[f64; 2]>, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: RewardConfig = from_py(py, config)?;
    rewards::r_steer(&tensor(&pred)?, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, config=None))]
fn acc_seq(py: Python<'_>, pred: Vec<[f64; 2]>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<f64>> {
    let cfg: RewardConfig = from_py(py, config)?;
    rewards::acc_seq(&tensor(&pred)?, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, config=None))]
fn r_acc(py: Python<'_>, pred: Vec<[f64; 2]>, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: RewardConfig = from_py(py, config)?;
    rewards::r_acc(&tensor(&pred)?, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, config=None))]
fn r_total(py: Python<'_>, pred: Vec<[f64; 2]>, gt: Vec<[f64; 2]>, config: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let cfg: RewardConfig = from_py(py, config)?;
    rewards::r_total(&tensor(&pred)?, &tensor(&gt)?, &cfg).map_err(err)
}

#[pyfunction]
fn grpo_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    training::grpo_advantages(&rewards).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, dt=0.5))]
fn l2_at_horizons<'py>(py: Python<'py>, pred: Vec<[f64; 2]>, gt: Vec<[f64; 2]>, dt: f64) -> PyResult<Bound<'py, PyAny>> {
    let m = eval::l2_at_horizons(&tensor(&pred)?, &tensor(&gt)?, dt).map_err(err)?;
    to_py(py, &m)
}

#[pyfunction]
#[pyo3(signature = (model, clips, rewards=None))]
fn evaluate_open_loop<'py>(
    py: Python<'py>,
    model: &PyModel,
    clips: Vec<PyRef<'_, PyClip>>,
    rewards: Option<&Bound<'_, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: RewardConfig = from_py(py, rewards)?;
    let s = eval::evaluate_open_loop(&model.inner, &unwrap_clips(&clips), &cfg).map_err(err)?;
    to_py(py, &s)
}

/// Runs SFT, RL or both; returns the trained model and the event log as
/// a list of dicts.
#[pyfunction]
#[pyo3(signature = (model, train, val, config=None, rewards=None, stage="both"))]
fn train<'py>(
    py: Python<'py>,
    model: &PyModel,
    train: Vec<PyRef<'_, PyClip>>,
    val: Vec<PyRef<'_, PyClip>>,
    config: Option<&Bound<'_, PyAny>>,
    rewards: Option<&Bound<'_, PyAny>>,
    stage: &str,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = from_py(py, config)?;
    let rcfg: RewardConfig = from_py(py, rewards)?;
    let (sft, rl) = match stage {
        "sft" => (true, false),
        "rl" => (false, true),
        "both" => (true, true),
        other => return Err(PyValueError::new_err(format!("stage must be sft, rl or both, got {other:?}"))),
    };
    let (tr, va) = (unwrap_clips(&train), unwrap_clips(&val));
    let exec = Exec::sequential();
    let mut log = Vec::new();
    let mut sink = |e: &TrainEvent| {
        let v = match e {
            TrainEvent::Metric(m) => serde_json::to_value(m),
            TrainEvent::Validation(v) => serde_json::to_value(v),
        };
        log.push(v.expect("records serialize"));
        Ok(())
    };
    let mut m = model.inner.clone();
    if sft {
        m = training::train_sft(m, &tr, &va, &cfg, &rcfg, &exec, &mut sink).map_err(err)?;
    }
    if rl {
        m = training::train_rl(m, &tr, &va, &cfg, &rcfg, &exec, &mut sink).map_err(err)?;
    }
    Ok((PyModel { inner: m }, to_py(py, &log)?))
}

/// Scores the model and a zero-motion baseline on the built-in scenario
/// suite: `{"model": scores, "zero_motion": scores}`.
#[pyfunction]
#[pyo3(signature = (model, replan_hz=2.0))]
fn closed_loop<'py>(py: Python<'py>, model: &PyModel, replan_hz: f64) -> PyResult<Bound<'py, PyAny>> {
    let m = &model.inner;
    let obs = ObservationConfig {
        horizon: m.config().horizon,
        ..Default::default()
    };
    let suite = eval::default_scenario_suite();
    let run = |p: &dyn Policy| -> PyResult<eval::ScenarioScores> {
        let traces = suite
            .iter()
            .map(|s| eval::closed_loop_rollout(p, s, replan_hz, &obs))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        eval::score_scenarios(&traces).map_err(err)
    };
    let learned = run(&ModelPolicy {
        model: m,
        label: "model".into(),
    })?;
    let frozen = run(&ZeroMotionPolicy {
        horizon: m.config().horizon,
    })?;
    to_py(py, &serde_json::json!({ "model": learned, "zero_motion": frozen }))
}

#[pymodule]
fn rvla(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClip>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(read_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_stats, m)?)?;
    m.add_function(wrap_pyfunction!(r_traj, m)?)?;
    m.add_function(wrap_pyfunction!(r_steer, m)?)?;
    m.add_function(wrap_pyfunction!(acc_seq, m)?)?;
    m.add_function(wrap_pyfunction!(r_acc, m)?)?;
    m.add_function(wrap_pyfunction!(r_total, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(l2_at_horizons, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_open_loop, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop, m)?)?;
    m.add("CHECKPOINT_VERSION", model::CHECKPOINT_VERSION)?;
    Ok(())
}
