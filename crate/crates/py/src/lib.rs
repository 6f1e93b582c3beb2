//! Python bindings: load checkpoints and fuse arrays or files, score fused
//! images, sample intervention masks, estimate treatment effects and run
//! training from a `key = value` config.
//!
//! Images cross the boundary as nested lists, `[H][W]` floats. Fusion inputs
//! and outputs are in `[0, 1]`; metric inputs are on the 255 scale.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use isfuse::ate;
use isfuse::data::{chroma_reinject, load_image_pair, save_gray_png, save_rgb_png, Dataset};
use isfuse::interventions::{InterventionSet, MaskConfig};
use isfuse::metrics::{evaluate_model, Metrics};
use isfuse::model::{FusionNet, ModelConfig};
use isfuse::rng::seeded;
use isfuse::synthetic::{synthetic_dataset, write_dataset_dir, SceneParams};
use isfuse::train::{self, Checkpoint, TrainConfig};
use isfuse::{Error, Tensor};

pub fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Size(_) => PyValueError::new_err(msg),
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Nested rows to a `[1, H, W]` tensor.
pub fn grid_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>, Error> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err(Error::Shape("image must have at least one row and column".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != w) {
        return Err(Error::Shape(format!("row {i} has {} values, expected {w}", rows[i].len())));
    }
    Tensor::new(vec![1, h, w], rows.concat())
}

pub fn tensor_to_grid<T: isfuse::Element>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let w = *t.shape().last().expect("at least one dimension");
    t.to_f64_vec().chunks(w).map(<[f64]>::to_vec).collect()
}

/// A frozen fusion network.
#[pyclass(name = "FusionModel", module = "isfuse_py")]
pub struct PyFusionModel {
    net: FusionNet<f32>,
}

#[pymethods]
impl PyFusionModel {
    /// Loads the weights of a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let net = Checkpoint::load(&path).and_then(|c| c.model()).map_err(to_py_err)?;
        Ok(PyFusionModel { net })
    }

    /// Randomly initialised network, mainly for experiments and tests.
    #[staticmethod]
    #[pyo3(signature = (seed=0, channels=(32, 64, 128), pool_r=8))]
    fn random(seed: u64, channels: (usize, usize, usize), pool_r: usize) -> PyResult<Self> {
        let config = ModelConfig {
            channels: [channels.0, channels.1, channels.2],
            pool_r,
            ..ModelConfig::default()
        };
        let net = FusionNet::new(config, &mut seeded(seed)).map_err(to_py_err)?;
        Ok(PyFusionModel { net })
    }

    #[getter]
    fn channels(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.net.config.channels;
        (a, b, c)
    }

    #[getter]
    fn pool_r(&self) -> usize {
        self.net.config.pool_r
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Fuses a visible-luma and an infrared image, both `[H][W]` in `[0, 1]`.
    fn fuse(&self, py: Python<'_>, vi: Vec<Vec<f64>>, ir: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let vi = grid_to_tensor(&vi).map_err(to_py_err)?.cast::<f32>();
        let ir = grid_to_tensor(&ir).map_err(to_py_err)?.cast::<f32>();
        let fused = py.detach(|| self.net.fuse(&vi, &ir)).map_err(to_py_err)?;
        Ok(tensor_to_grid(&fused))
    }

    /// Fuses two image files into a PNG; `color` reinjects the visible chroma.
    #[pyo3(signature = (vi, ir, out, color=false))]
    fn fuse_files(&self, py: Python<'_>, vi: PathBuf, ir: PathBuf, out: PathBuf, color: bool) -> PyResult<()> {
        py.detach(|| {
            let pair = load_image_pair("input", &vi, &ir)?;
            let lc = pair.luma_chroma();
            let fused = self.net.fuse(&lc.luma, &pair.infrared)?;
            if color {
                save_rgb_png(&out, &chroma_reinject(&fused, &lc.chroma)?)
            } else {
                save_gray_png(&out, &fused)
            }
        })
        .map_err(to_py_err)
    }

    /// Mean and per-image metrics on a dataset directory, as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| {
                let ds = Dataset::load_dir(&data)?;
                evaluate_model(&self.net, &ds, None)
            })
            .map_err(to_py_err)?;
        json_to_py(py, &report.to_json())
    }

    fn __repr__(&self) -> String {
        let [a, b, c] = self.net.config.channels;
        format!(
            "FusionModel(channels=({a}, {b}, {c}), pool_r={}, params={})",
            self.net.config.pool_r,
            self.net.param_count()
        )
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// AG, SF, PSNR, CC and Qabf of `fused` against sources `a` and `b`, all
/// `[H][W]` on the 255 scale.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    fused: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let [f, a, b] = [&fused, &a, &b].map(|g| grid_to_tensor(g));
    let m = Metrics::compute(&f.map_err(to_py_err)?, &a.map_err(to_py_err)?, &b.map_err(to_py_err)?)
        .map_err(to_py_err)?;
    let d = PyDict::new(py);
    for (name, v) in Metrics::NAMES.iter().zip(m.values()) {
        d.set_item(name, v)?;
    }
    Ok(d)
}

/// One intervention set: block origins of the complementary pair and of
/// the shared random mask.
#[pyfunction]
#[pyo3(signature = (height, width, seed, block_size=16, min_blocks=1, max_blocks=6))]
fn sample_masks<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    seed: u64,
    block_size: usize,
    min_blocks: usize,
    max_blocks: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let config = MaskConfig {
        block_size,
        min_blocks,
        max_blocks,
        ..MaskConfig::default()
    };
    let set = InterventionSet::from_seed(height, width, &config, seed).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("comp_vi", set.comp_vi.blocks.clone())?;
    d.set_item("comp_ir", set.comp_ir.blocks.clone())?;
    d.set_item("random", set.random_shared.blocks.clone())?;
    d.set_item("block_size", block_size)?;
    d.set_item("disjoint", set.is_disjoint())?;
    Ok(d)
}

/// Mean of `baseline[i] - intervened[i]`.
#[pyfunction]
fn ate_from_scores(baseline: Vec<f64>, intervened: Vec<f64>) -> PyResult<f64> {
    ate::ate_from_scores(&baseline, &intervened)
        .map(|e| e.ate)
        .map_err(to_py_err)
}

/// Runs training from `key = value` config text; `data` must be set and
/// `val_data` defaults to it. Returns checkpoint paths and the best
/// validation PSNR.
#[pyfunction]
fn train_from_config<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_kv_text(config).map_err(to_py_err)?;
    let out = py
        .detach(|| {
            let data = cfg
                .data
                .clone()
                .ok_or_else(|| Error::Config("`data` is required".into()))?;
            let train_set = Dataset::load_dir(&data)?;
            let val_set = Dataset::load_dir(cfg.val_data.as_deref().unwrap_or(&data))?;
            train::train(cfg, &train_set, &val_set)
        })
        .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("best", out.best)?;
    d.set_item("last", out.last)?;
    d.set_item("best_val_psnr", out.best_val_psnr)?;
    d.set_item("steps", out.steps)?;
    Ok(d)
}

/// Writes `n` synthetic registered pairs under `dir/vi` and `dir/ir`.
#[pyfunction]
#[pyo3(signature = (dir, n, seed=0, height=64, width=64, ir_contrast=0.5))]
fn write_synthetic_dataset(
    dir: PathBuf,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    ir_contrast: f64,
) -> PyResult<Vec<String>> {
    let p = SceneParams {
        height,
        width,
        ir_contrast,
        ..SceneParams::default()
    };
    let ds = synthetic_dataset("synthetic", n, seed, &p).map_err(to_py_err)?;
    let pairs: Vec<_> = ds.iter().cloned().collect();
    write_dataset_dir(&dir, &pairs).map_err(to_py_err)?;
    Ok(pairs.into_iter().map(|p| p.id).collect())
}

/// Default training configuration as `key = value` text.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_string()
}

#[pymodule]
pub fn isfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFusionModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(sample_masks, m)?)?;
    m.add_function(wrap_pyfunction!(ate_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
