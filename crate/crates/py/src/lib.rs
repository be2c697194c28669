//! Python module `mdsp_py`: data generation, model building, training,
//! evaluation, inference and timing.

use std::path::Path;

use mdsp::bench::benchmark;
use mdsp::eval::{evaluate, predict, EvalConfig};
use mdsp::postprocess::{BBox, DecodeConfig, Detection};
use mdsp::synth::{generate_dataset, read_dataset, write_dataset, GenSpec};
use mdsp::train::{train, TrainConfig};
use mdsp::{Mdsp, MdspError, NetworkSpec, TaskSet, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn err(e: MdspError) -> PyErr {
    match e {
        MdspError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => PyList::new(py, items.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn tasks(s: &str) -> PyResult<TaskSet> {
    TaskSet::parse(s).map_err(err)
}

/// Writes `count` synthetic scenes to `out_dir` and returns the count.
#[pyfunction]
#[pyo3(signature = (out_dir, count, image_size = 64, seed = 0))]
fn synth(out_dir: &str, count: usize, image_size: usize, seed: u64) -> PyResult<usize> {
    let samples = generate_dataset(&GenSpec { seed, ..GenSpec::new(image_size) }, count).map_err(err)?;
    write_dataset(Path::new(out_dir), &samples).map_err(err)?;
    Ok(samples.len())
}

#[pyfunction]
#[pyo3(signature = (input_size = 64, width_mult = 0.125, tasks = "detect,segment,pose"))]
fn param_count(input_size: usize, width_mult: f64, tasks: &str) -> PyResult<usize> {
    mdsp::param_count(&NetworkSpec::new(input_size, width_mult), self::tasks(tasks)?).map_err(err)
}

/// Class-aware NMS over `(cx, cy, w, h, class_id, score)` tuples.
#[pyfunction]
#[pyo3(signature = (detections, iou = 0.45))]
fn nms(detections: Vec<(f64, f64, f64, f64, usize, f64)>, iou: f64) -> Vec<(f64, f64, f64, f64, usize, f64)> {
    let dets: Vec<Detection> =
        detections.iter().map(|&(cx, cy, w, h, class_id, score)| Detection { bbox: BBox::new(cx, cy, w, h), class_id, score }).collect();
    mdsp::postprocess::nms(&dets, iou).iter().map(|d| (d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, d.class_id, d.score)).collect()
}

#[pyclass]
struct Model {
    inner: Mdsp<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_size = 64, width_mult = 0.125, tasks = "detect,segment,pose", seed = 0))]
    fn new(input_size: usize, width_mult: f64, tasks: &str, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::new(input_size, width_mult).with_tasks(self::tasks(tasks)?);
        Ok(Self { inner: Mdsp::build(&spec, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Mdsp::load(Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn tasks(&self) -> String {
        self.inner.tasks().to_string()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.spec.input_size
    }

    /// Trains on a dataset directory. `config` is a JSON object of training
    /// settings; tasks default to the built ones. Returns the epoch logs.
    #[pyo3(signature = (data_dir, config = "{}"))]
    fn train<'py>(&mut self, py: Python<'py>, data_dir: &str, config: &str) -> PyResult<Bound<'py, PyAny>> {
        let mut raw: Value = serde_json::from_str(config).map_err(json_err)?;
        if let Value::Object(m) = &mut raw {
            m.entry("tasks").or_insert_with(|| serde_json::to_value(self.inner.tasks()).unwrap_or(Value::Null));
        }
        let cfg: TrainConfig = serde_json::from_value(raw).map_err(json_err)?;
        let data = read_dataset(Path::new(data_dir)).map_err(err)?;
        let logs = train(&mut self.inner, &data, &cfg, |_| {}).map_err(err)?;
        to_py(py, &serde_json::to_value(logs).map_err(json_err)?)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data_dir: &str) -> PyResult<Bound<'py, PyAny>> {
        let data = read_dataset(Path::new(data_dir)).map_err(err)?;
        let report = evaluate(&self.inner, &data, self.inner.tasks(), &DecodeConfig::default(), &EvalConfig::default()).map_err(err)?;
        to_py(py, &serde_json::to_value(report).map_err(json_err)?)
    }

    /// Decodes one image given as a flat `3 x H x W` list in `[0, 1]`.
    #[pyo3(signature = (image, conf_thresh = 0.25))]
    fn infer<'py>(&self, py: Python<'py>, image: Vec<f32>, conf_thresh: f64) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.spec.input_size;
        let img = Tensor::new(vec![3, s, s], image).map_err(err)?;
        let cfg = DecodeConfig { conf_thresh, ..DecodeConfig::default() };
        let p = predict(&self.inner, &[img], &cfg).map_err(err)?.remove(0);
        let mut v = serde_json::to_value(&p).map_err(json_err)?;
        if let (Value::Object(m), Some(lm)) = (&mut v, &p.label_map) {
            m.insert("label_map".into(), serde_json::to_value(&lm.data).map_err(json_err)?);
        }
        to_py(py, &v)
    }

    #[pyo3(signature = (images = 2, repeats = 5))]
    fn bench<'py>(&self, py: Python<'py>, images: usize, repeats: usize) -> PyResult<Bound<'py, PyAny>> {
        let scenes = generate_dataset(&GenSpec::new(self.inner.spec.input_size), images).map_err(err)?;
        let batch = Tensor::stack(&scenes.into_iter().map(|s| s.image).collect::<Vec<_>>()).map_err(err)?;
        let report = benchmark(&self.inner, &batch, repeats, &DecodeConfig::default()).map_err(err)?;
        to_py(py, &serde_json::to_value(report).map_err(json_err)?)
    }
}

#[pymodule]
fn mdsp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
