//! Python module `pyfu`: model building, training, evaluation and inference
//! on on-disk frames, plus the metric, schedule, projection and kNN helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pyfu_core::cli::RunConfig;
use pyfu_core::dataio::{gen_synthetic, list_frames, load_frame, write_frame, FrameBundle, LabelMap, SyntheticSceneSpec, SYNTHETIC_CLASSES};
use pyfu_core::numcore::ParamStore;
use pyfu_core::postprocess::{knn_postprocess as knn, KnnConfig};
use pyfu_core::pyfu::{Checkpoint, Head, PyFu};
use pyfu_core::rangeview::{build_range_image, spherical_project as project, PointCloud, Sample, SensorConfig};
use pyfu_core::selftest;
use pyfu_core::traineval;
use pyfu_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::LabelOutOfRange { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_head(name: &str) -> PyResult<Head> {
    match name {
        "lidar" => Ok(Head::Lidar),
        "camera" => Ok(Head::Camera),
        "fused" => Ok(Head::Fused),
        _ => Err(PyValueError::new_err(format!("unknown head {name:?} (lidar, camera, fused)"))),
    }
}

/// Class lists go out as `list[int]` rather than `bytes`.
fn widen(labels: Vec<u8>) -> Vec<u16> {
    labels.into_iter().map(u16::from).collect()
}

fn head_name(h: Head) -> &'static str {
    match h {
        Head::Lidar => "lidar",
        Head::Camera => "camera",
        Head::Fused => "fused",
    }
}

/// Network, weights and the run configuration they were built from.
#[pyclass(module = "pyfu")]
struct Model {
    cfg: RunConfig,
    model: PyFu,
    store: ParamStore<f32>,
}

impl Model {
    fn labels(&self) -> PyResult<LabelMap> {
        self.cfg.data.labels.load().map_err(py_err)
    }

    fn frames(&self, root: &PathBuf) -> PyResult<Vec<FrameBundle>> {
        let labels = self.labels()?;
        let ids = list_frames(root).map_err(py_err)?;
        if ids.is_empty() {
            return Err(PyValueError::new_err(format!("{}: no frames", root.display())));
        }
        ids.iter().map(|id| load_frame(root, id, &labels).map_err(py_err)).collect()
    }

    fn samples(&self, root: &PathBuf) -> PyResult<Vec<Sample>> {
        self.frames(root)?
            .iter()
            .map(|f| f.to_sample(&self.cfg.model.sensor).map(|(s, _)| s).map_err(py_err))
            .collect()
    }
}

#[pymethods]
impl Model {
    /// `config` is run-configuration TOML; `preset` and `seed` override it.
    #[new]
    #[pyo3(signature = (config = None, preset = None, seed = None))]
    fn new(config: Option<&str>, preset: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = RunConfig::from_toml(config.unwrap_or("")).map_err(py_err)?;
        if let Some(p) = preset {
            cfg.preset = Some(p.parse().map_err(py_err)?);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let cfg = cfg.resolve().map_err(py_err)?;
        let (model, store) = PyFu::build::<f32>(cfg.model.clone(), cfg.seed).map_err(py_err)?;
        Ok(Model { cfg, model, store })
    }

    /// Head trained and evaluated by default.
    #[getter]
    fn head(&self) -> &'static str {
        head_name(self.cfg.head())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.cfg.model.classes
    }

    fn parameter_names(&self) -> Vec<String> {
        self.store.params().iter().map(|p| p.name.clone()).collect()
    }

    fn config_toml(&self) -> PyResult<String> {
        self.cfg.to_toml().map_err(py_err)
    }

    /// Trains on the frames under `data`; returns the per-step losses.
    #[pyo3(signature = (data, val = None, iterations = None))]
    fn train(&mut self, data: PathBuf, val: Option<PathBuf>, iterations: Option<usize>) -> PyResult<Vec<f64>> {
        let train = self.samples(&data)?;
        let val = match &val {
            Some(v) => self.samples(v)?,
            None => Vec::new(),
        };
        let mut tc = self.cfg.train.clone();
        if let Some(n) = iterations {
            tc.iterations = n;
        }
        tc.validate().map_err(py_err)?;
        let report = traineval::train_loop(&self.model, &mut self.store, &train, &val, &tc, &mut std::io::sink()).map_err(py_err)?;
        Ok(report.losses)
    }

    /// `(per-class IoU, mIoU, accuracy)` over the frames under `data`.
    #[pyo3(signature = (data, head = None))]
    fn evaluate(&self, data: PathBuf, head: Option<&str>) -> PyResult<(Vec<Option<f64>>, f64, f64)> {
        let head = head.map(parse_head).transpose()?.unwrap_or(self.cfg.head());
        let samples = self.samples(&data)?;
        let cm = traineval::evaluate(&self.model, &self.store, &samples, head).map_err(py_err)?;
        let r = traineval::iou_miou(&cm).map_err(py_err)?;
        Ok((r.iou, r.miou, cm.accuracy()))
    }

    /// Per-point classes for every frame under `data`, kNN-refined unless
    /// `refine` is false.
    #[pyo3(signature = (data, refine = true))]
    fn predict(&self, data: PathBuf, refine: bool) -> PyResult<Vec<(String, Vec<u16>)>> {
        let mut out = Vec::new();
        for frame in self.frames(&data)? {
            let (sample, index) = frame.to_sample(&self.cfg.model.sensor).map_err(py_err)?;
            let pred = self.model.predict_sample(&self.store, sample, index).map_err(py_err)?;
            let labels = if refine {
                knn(&frame.cloud, &pred.index, &pred.range, &pred.pixel_labels, &self.cfg.knn).map_err(py_err)?
            } else {
                (0..frame.cloud.len())
                    .map(|i| {
                        let (u, v) = pred.index.pixel_of(i);
                        pred.pixel_labels[v * pred.index.width + u]
                    })
                    .collect()
            };
            out.push((frame.id.clone(), widen(labels)));
        }
        Ok(out)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_store(&self.store).save(&path).map_err(py_err)
    }

    /// Copies tensors whose names start with `prefix` from a checkpoint;
    /// returns how many were copied.
    #[pyo3(signature = (path, prefix = ""))]
    fn load(&mut self, path: PathBuf, prefix: &str) -> PyResult<usize> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let picked = Checkpoint {
            entries: ck.entries.into_iter().filter(|e| e.name.starts_with(prefix)).collect(),
        };
        picked.apply_to(&mut self.store, prefix.is_empty()).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let preset = self.cfg.preset.map(|p| p.name()).unwrap_or("custom");
        format!("Model(preset={preset:?}, head={:?}, parameters={})", self.head(), self.num_parameters())
    }
}

/// Writes `frames` synthetic desk-scale frames to `dest`; returns their ids.
#[pyfunction]
#[pyo3(signature = (dest, frames = 4, seed = 0))]
fn synthesize(dest: PathBuf, frames: usize, seed: u64) -> PyResult<Vec<String>> {
    let spec = SyntheticSceneSpec {
        seed,
        frames,
        ..SyntheticSceneSpec::default()
    };
    let labels = LabelMap::identity(&SYNTHETIC_CLASSES);
    let bundles = gen_synthetic(&spec).map_err(py_err)?;
    for f in &bundles {
        write_frame(&dest, f, &labels).map_err(py_err)?;
    }
    Ok(bundles.into_iter().map(|f| f.id).collect())
}

#[pyfunction]
#[pyo3(signature = (i, i_max, base, power = traineval::POLY_POWER))]
fn poly_lr(i: usize, i_max: usize, base: f64, power: f64) -> f64 {
    traineval::poly_lr_with(i, i_max, base, power)
}

#[pyfunction]
fn class_weights(hist: Vec<u64>) -> PyResult<Vec<f64>> {
    traineval::class_weights(&hist).map_err(py_err)
}

/// `(per-class IoU, mIoU)` of a confusion matrix given as rows of ground truth.
#[pyfunction]
fn iou_miou(confusion: Vec<Vec<u64>>) -> PyResult<(Vec<Option<f64>>, f64)> {
    let cm = traineval::ConfusionMatrix::from_rows(&confusion).map_err(py_err)?;
    let r = traineval::iou_miou(&cm).map_err(py_err)?;
    Ok((r.iou, r.miou))
}

fn sensor(height: usize, width: usize, fov_up: f64, fov_down: f64) -> SensorConfig {
    SensorConfig {
        height,
        width,
        fov_up,
        fov_down,
    }
}

/// `(u, v)` pixel of every `[x, y, z, remission]` point.
#[pyfunction]
#[pyo3(signature = (points, height = 32, width = 256, fov_up = 3.0, fov_down = -25.0))]
fn spherical_project(points: Vec<[f32; 4]>, height: usize, width: usize, fov_up: f64, fov_down: f64) -> PyResult<Vec<(u32, u32)>> {
    let cloud = PointCloud::new(points, None).map_err(py_err)?;
    Ok(project(&cloud, &sensor(height, width, fov_up, fov_down)).map_err(py_err)?.point_pixel)
}

/// Per-point classes from a row-major per-pixel label raster.
#[pyfunction]
#[pyo3(signature = (points, pixel_labels, height = 32, width = 256, fov_up = 3.0, fov_down = -25.0, window = 5, k = 5, cutoff = 1.0, sigma = 1.0))]
#[allow(clippy::too_many_arguments)]
fn knn_postprocess(
    points: Vec<[f32; 4]>,
    pixel_labels: Vec<u8>,
    height: usize,
    width: usize,
    fov_up: f64,
    fov_down: f64,
    window: usize,
    k: usize,
    cutoff: f64,
    sigma: f64,
) -> PyResult<Vec<u16>> {
    let cloud = PointCloud::new(points, None).map_err(py_err)?;
    let index = project(&cloud, &sensor(height, width, fov_up, fov_down)).map_err(py_err)?;
    let range = build_range_image(&cloud, &index).map_err(py_err)?;
    let cfg = KnnConfig { window, k, cutoff, sigma };
    knn(&cloud, &index, &range, &pixel_labels, &cfg).map(widen).map_err(py_err)
}

/// Runs one oracle suite (`gradients`, `projection` or `knn`); returns
/// whether it passed and `(check, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (suite, seed = 0, size = None))]
fn run_selftest(suite: &str, seed: u64, size: Option<usize>) -> PyResult<(bool, Vec<(String, bool, String)>)> {
    let r = match suite {
        "gradients" => selftest::gradient_suite(seed),
        "projection" => selftest::projection_suite(seed, size.unwrap_or(10_000)),
        "knn" => selftest::knn_suite(seed, size.unwrap_or(100)),
        _ => return Err(PyValueError::new_err(format!("unknown suite {suite:?} (gradients, projection, knn)"))),
    };
    Ok((r.passed(), r.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect()))
}

/// Runs the `pyfu` command line with `args`; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("pyfu".to_string()).chain(args);
    pyfu_core::cli::run_cli(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[pymodule]
fn pyfu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(iou_miou, m)?)?;
    m.add_function(wrap_pyfunction!(spherical_project, m)?)?;
    m.add_function(wrap_pyfunction!(knn_postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("CLASSES", SYNTHETIC_CLASSES.to_vec())?;
    Ok(())
}
