use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use egd_core::dataset::verify_integrity as verify_dir;
use egd_core::metrics::{self, BBox, EvalConfig, GroundTruth, ImageGt, ImagePred, ScoredBox};
use egd_core::model::{
    build_model, count_flops, count_params, decode_predictions, load_weights, save_weights, Architecture, DecodeConfig,
    LayerGraph, Modality, VariantConfig, STRIDES,
};
use egd_core::restoration::{richardson_lucy as rl, Image, Psf};
use egd_core::suite::run_gradient_suite;
use egd_core::tensor::Tensor;
use egd_core::Error;

type Det = (usize, f64, f64, f64, f64, f64);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::from_vec([shape.0, shape.1, shape.2, shape.3], data).map_err(err)
}

/// A detection network with randomly initialised or loaded weights.
#[pyclass(module = "egd_yolo")]
struct Model {
    graph: LayerGraph,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (arch = "egd", modality = "rgb", seed = 0))]
    fn new(arch: &str, modality: &str, seed: u64) -> PyResult<Self> {
        let modality: Modality = modality.parse().map_err(err)?;
        let cfg = match arch.parse::<Architecture>().map_err(err)? {
            Architecture::Egd => VariantConfig::egd(modality),
            Architecture::Baseline => VariantConfig::baseline(modality),
        };
        Ok(Self {
            graph: build_model(&cfg, seed).map_err(err)?,
        })
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.graph.in_channels()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.graph.cfg.num_classes
    }

    fn param_count(&self) -> u64 {
        count_params(&self.graph)
    }

    /// Parameters, MACs and GFLOPs for a square input.
    #[pyo3(signature = (imgsz = 640))]
    fn cost<'py>(&self, py: Python<'py>, imgsz: usize) -> PyResult<Bound<'py, PyDict>> {
        let rep = count_flops(&self.graph, [1, self.graph.in_channels(), imgsz, imgsz]).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("params", rep.total_params)?;
        d.set_item("macs", rep.total_macs)?;
        d.set_item("gflops", rep.total_flops() as f64 / 1e9)?;
        Ok(d)
    }

    /// Decoded detections per image as `(class_id, score, cx, cy, w, h)`
    /// in normalised coordinates. `data` is a flat NCHW buffer.
    #[pyo3(signature = (data, shape, conf = 0.25, nms = 0.45))]
    fn detect(
        &self,
        py: Python<'_>,
        data: Vec<f64>,
        shape: (usize, usize, usize, usize),
        conf: f64,
        nms: f64,
    ) -> PyResult<Vec<Vec<Det>>> {
        let x = tensor(data, shape)?;
        let maps = py.detach(|| self.graph.predict(&x)).map_err(err)?;
        self.decode(&maps, conf, nms)
    }

    /// Like `detect`, for aligned RGB and IR buffers on the fusion model.
    #[pyo3(signature = (rgb, ir, shape, conf = 0.25, nms = 0.45))]
    fn detect_pair(
        &self,
        py: Python<'_>,
        rgb: Vec<f64>,
        ir: Vec<f64>,
        shape: (usize, usize, usize),
        conf: f64,
        nms: f64,
    ) -> PyResult<Vec<Vec<Det>>> {
        let (n, h, w) = shape;
        let rgb = tensor(rgb, (n, 3, h, w))?;
        let ir = tensor(ir, (n, 1, h, w))?;
        let maps = py.detach(|| self.graph.predict_pair(&rgb, &ir)).map_err(err)?;
        self.decode(&maps, conf, nms)
    }

    fn save_weights(&self, path: PathBuf) -> PyResult<()> {
        save_weights(&self.graph, &path).map_err(err)
    }

    fn load_weights(&mut self, path: PathBuf) -> PyResult<()> {
        load_weights(&mut self.graph, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = &self.graph.cfg;
        format!("Model(arch='{}', modality='{}', params={})", c.architecture, c.modality, count_params(&self.graph))
    }
}

impl Model {
    fn decode(&self, maps: &[Tensor], conf: f64, nms: f64) -> PyResult<Vec<Vec<Det>>> {
        let cfg = DecodeConfig {
            num_classes: self.graph.cfg.num_classes,
            reg_max: self.graph.cfg.reg_max,
            conf_threshold: conf,
            nms_iou: nms,
        };
        let per_image = decode_predictions(maps, &STRIDES, cfg).map_err(err)?;
        Ok(per_image
            .into_iter()
            .map(|dets| {
                dets.into_iter()
                    .map(|d| (d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h))
                    .collect()
            })
            .collect())
    }
}

/// mAP@50 and mAP@50-95 plus per-class AP rows.
///
/// `preds` rows are `(image, class_id, confidence, cx, cy, w, h)`,
/// `gts` rows `(image, class_id, cx, cy, w, h)`.
#[pyfunction]
#[pyo3(signature = (preds, gts, num_classes = 2))]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<(usize, usize, f64, f64, f64, f64, f64)>,
    gts: Vec<(usize, usize, f64, f64, f64, f64)>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let preds: Vec<ImagePred> = preds
        .into_iter()
        .map(|(image, class_id, confidence, cx, cy, w, h)| ImagePred {
            image,
            det: ScoredBox {
                class_id,
                confidence,
                bbox: BBox::new(cx, cy, w, h),
            },
        })
        .collect();
    let gts: Vec<ImageGt> = gts
        .into_iter()
        .map(|(image, class_id, cx, cy, w, h)| ImageGt {
            image,
            gt: GroundTruth {
                class_id,
                bbox: BBox::new(cx, cy, w, h),
            },
        })
        .collect();
    let rep = metrics::evaluate(&preds, &gts, num_classes, &EvalConfig::default()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("map50", rep.map50)?;
    d.set_item("map50_95", rep.map50_95)?;
    let ap: Vec<(usize, Vec<f64>)> = rep.classes.iter().map(|c| (c.class_id, c.ap.clone())).collect();
    d.set_item("ap", ap)?;
    Ok(d)
}

#[pyfunction]
fn ciou_loss(pred: (f64, f64, f64, f64), gt: (f64, f64, f64, f64)) -> PyResult<f64> {
    let b = |t: (f64, f64, f64, f64)| BBox::new(t.0, t.1, t.2, t.3);
    metrics::ciou_loss(&b(pred), &b(gt)).map_err(err)
}

/// Richardson-Lucy deconvolution of a flat channel-major image with a
/// Gaussian PSF.
#[pyfunction]
#[pyo3(signature = (data, width, height, channels = 1, psf_size = 5, sigma = 1.0, iterations = 10))]
fn richardson_lucy(
    data: Vec<f64>,
    width: usize,
    height: usize,
    channels: usize,
    psf_size: usize,
    sigma: f64,
    iterations: usize,
) -> PyResult<Vec<f64>> {
    let img = Image::new(width, height, channels, data).map_err(err)?;
    let psf = Psf::gaussian(psf_size, sigma).map_err(err)?;
    Ok(rl(&img, &psf, iterations).map_err(err)?.data().to_vec())
}

/// `(is_clean, summary, failures)` for a manifest directory.
#[pyfunction]
fn verify_integrity(dir: PathBuf) -> (bool, String, Vec<String>) {
    let rep = verify_dir(&dir);
    (rep.is_clean(), rep.summary(), rep.failures.iter().map(|f| f.to_string()).collect())
}

/// Finite-difference sweep; one `(name, configs, max_rel_error, passed)`
/// row per entry.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradient_suite(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let entries = py.detach(|| run_gradient_suite(seed, None)).map_err(err)?;
    Ok(entries.into_iter().map(|e| (e.name, e.configs, e.max_rel_error, e.passed)).collect())
}

#[pymodule]
fn egd_yolo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ciou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(richardson_lucy, m)?)?;
    m.add_function(wrap_pyfunction!(verify_integrity, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}
