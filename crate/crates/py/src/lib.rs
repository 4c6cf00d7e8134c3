//! Python bindings. Tensors cross the boundary as flat row-major `list[float]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teethseg::data::{generate_split, LabelMap, LabeledScene, SceneConfig, SplitSizes};
use teethseg::gating::GatingLayer;
use teethseg::gradcheck::GradCheckOptions;
use teethseg::metrics::{Aggregation, IoUAccumulator};
use teethseg::model::{ModelConfig, TeethSeg};
use teethseg::nn::{AttentionMask, TokenGrid};
use teethseg::params::ParamStore;
use teethseg::run::{self, RunConfig, Variant};
use teethseg::train::load_model;
use teethseg::upscale;
use teethseg::{Error, Tape, Tensor};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyIOError::new_err(e.to_string()),
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for teethseg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(rows).py()
}

/// Run configuration: model, scene generator, split sizes and training settings.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(toml).py()?;
        inner.validate().py()?;
        Ok(PyConfig { inner })
    }

    /// 16x16 model and scenes, small splits, f64 training.
    #[staticmethod]
    fn tiny() -> Self {
        let mut inner = RunConfig {
            model: ModelConfig::tiny(),
            scene: SceneConfig {
                height: 16,
                width: 16,
                ..SceneConfig::default()
            },
            splits: SplitSizes { train: 16, val: 4, test: 4 },
            ..RunConfig::default()
        };
        inner.train.batch_size = 4;
        inner.train.epochs = 1;
        inner.train.precision = "f64".into();
        PyConfig { inner }
    }

    /// Copy with the ablation variant `letter` (a..f) applied to the model.
    fn variant(&self, letter: &str) -> PyResult<Self> {
        let v: Variant = letter.parse().py()?;
        let mut inner = self.inner.clone();
        inner.model = v.apply(&inner.model);
        Ok(PyConfig { inner })
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_seed(seed);
        PyConfig { inner }
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let m = &self.inner.model;
        (m.image_h, m.image_w, m.channels)
    }
}

/// One synthetic scene.
#[pyclass(name = "Scene", get_all)]
struct PyScene {
    height: usize,
    width: usize,
    /// `H·W·C` intensities.
    image: Vec<f64>,
    /// `H·W` labels, 0 background and 1..=16 teeth.
    labels: Vec<u8>,
    present: Vec<bool>,
}

impl From<&LabeledScene> for PyScene {
    fn from(s: &LabeledScene) -> Self {
        PyScene {
            height: s.labels.h(),
            width: s.labels.w(),
            image: s.image.to_f64_vec(),
            labels: s.labels.data().to_vec(),
            present: s.present.to_vec(),
        }
    }
}

/// Deterministic scenes of one split.
#[pyfunction]
fn generate(config: &PyConfig, split: &str, count: usize) -> PyResult<Vec<PyScene>> {
    Ok(generate_split(&config.inner.scene, split, count).py()?.iter().map(PyScene::from).collect())
}

/// Segmentation model at f64.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TeethSeg<f64>,
}

impl PyModel {
    fn image(&self, image: Vec<f64>) -> PyResult<Tensor<f64>> {
        Tensor::from_f64(self.inner.image_shape(), &image).py()
    }
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: TeethSeg::new(config.inner.model.clone()).py()?,
        })
    }

    /// Loads the parameters of a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(&path).py()?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store.tensors().iter().map(|t| t.numel()).sum()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.store.names().to_vec()
    }

    /// `(score_th, score_fb)` probabilities, `H·W·16` and `H·W·2`.
    fn score_maps(&self, image: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (th, fb) = self.inner.score_maps(&self.image(image)?).py()?;
        Ok((th.data().to_vec(), fb.data().to_vec()))
    }

    fn predict(&self, image: Vec<f64>) -> PyResult<Vec<u8>> {
        Ok(self.inner.predict(&self.image(image)?).py()?.data().to_vec())
    }

    /// `(L_th, L_fb)` for one labelled image.
    #[pyo3(signature = (image, labels, th_over_all_pixels = false))]
    fn loss(&self, image: Vec<f64>, labels: Vec<u8>, th_over_all_pixels: bool) -> PyResult<(f64, f64)> {
        let image = self.image(image)?;
        let map = LabelMap::new(self.inner.cfg.image_h, self.inner.cfg.image_w, labels).py()?;
        let tape = Tape::inference();
        let p = self.inner.store.bind(&tape);
        let scores = self.inner.forward(&p, &tape, &image).py()?;
        let l = teethseg::model::loss(&scores, &map, th_over_all_pixels).py()?;
        Ok((l.th.value().item().py()?, l.fb.value().item().py()?))
    }
}

/// Writes train/val/test splits under `out`; returns the presence table.
#[pyfunction]
#[pyo3(signature = (config, out, force = false))]
fn gen(config: &PyConfig, out: PathBuf, force: bool) -> PyResult<String> {
    run::cmd_gen(&config.inner, &out, force).py()
}

/// Trains on a generated dataset; returns `(steps, best_val_miou, test_miou)`.
#[pyfunction]
#[pyo3(signature = (config, data, out, resume = false))]
fn train(py: Python<'_>, config: &PyConfig, data: PathBuf, out: PathBuf, resume: bool) -> PyResult<(u64, Option<f64>, Option<f64>)> {
    let cfg = config.inner.clone();
    let o = py.detach(move || run::cmd_train(&cfg, &data, &out, resume)).py()?;
    Ok((o.fit.steps, o.fit.best_val_miou, o.test.and_then(|t| t.miou)))
}

/// Per-class IoU (None for absent classes) and mIoU of a checkpoint on a split.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, split = "test"))]
fn evaluate(checkpoint: PathBuf, data: PathBuf, split: &str) -> PyResult<(Vec<Option<f64>>, Option<f64>)> {
    let o = run::cmd_eval(&checkpoint, &data, split, None, Aggregation::Dataset).py()?;
    Ok((o.report.per_class.to_vec(), o.report.miou))
}

/// Dataset-level per-class IoU and mIoU over `(pred, gt)` label lists.
#[pyfunction]
fn miou(height: usize, width: usize, pairs: Vec<(Vec<u8>, Vec<u8>)>) -> PyResult<(Vec<Option<f64>>, Option<f64>)> {
    let mut acc = IoUAccumulator::new(Aggregation::Dataset);
    for (pred, gt) in pairs {
        acc.add(&LabelMap::new(height, width, pred).py()?, &LabelMap::new(height, width, gt).py()?)
            .py()?;
    }
    let r = acc.report();
    Ok((r.per_class.to_vec(), r.miou))
}

/// Channel-to-space upscale of an `h×w` grid of width-`d` tokens.
#[pyfunction]
fn naive_upscale(h: usize, w: usize, d: usize, data: Vec<f64>) -> PyResult<Vec<f64>> {
    let tape = Tape::<f64>::inference();
    let g = TokenGrid::new(tape.constant(Tensor::from_f64([h * w, d], &data).py()?), h, w).py()?;
    Ok(upscale::naive_upscale(g).py()?.tokens.value().data().to_vec())
}

#[pyfunction]
fn bilinear_upsample(h: usize, w: usize, d: usize, data: Vec<f64>, out_h: usize, out_w: usize) -> PyResult<Vec<f64>> {
    let tape = Tape::<f64>::inference();
    let g = TokenGrid::new(tape.constant(Tensor::from_f64([h * w, d], &data).py()?), h, w).py()?;
    Ok(upscale::bilinear_upsample(g, out_h, out_w).py()?.tokens.value().data().to_vec())
}

/// Multi-head cross-gating of tokens `t` by tokens `v` with explicit
/// projections; `allowed[l][k]` masks the pairs.
#[pyfunction]
#[pyo3(signature = (v, t, w_k, w_q, w_v, heads, allowed = None, normalize = false))]
#[allow(clippy::too_many_arguments)]
fn cross_gate(
    v: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_q: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    heads: usize,
    allowed: Option<Vec<Vec<bool>>>,
    normalize: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let d = w_k.len();
    let mut store = ParamStore::<f64>::new();
    let mut g = GatingLayer::new(&mut store, "g", d, heads, &mut ChaCha8Rng::seed_from_u64(0)).py()?;
    g.normalize = normalize;
    for (lin, w) in [(&g.w_k, &w_k), (&g.w_q, &w_q), (&g.w_v, &w_v)] {
        let m = matrix(w)?;
        if m.shape() != store.get(lin.weight).shape() {
            return Err(PyValueError::new_err(format!("projection must be {d}x{d}")));
        }
        *store.get_mut(lin.weight) = m;
    }
    let mask = match allowed {
        Some(a) => {
            let rows = a.len();
            let cols = a.first().map_or(0, Vec::len);
            Some(AttentionMask::from_allowed(rows, cols, a.into_iter().flatten().collect()).py()?)
        }
        None => None,
    };
    let tape = Tape::<f64>::inference();
    let p = store.bind(&tape);
    let out = g.cross_gate(&p, tape.constant(matrix(&v)?), tape.constant(matrix(&t)?), mask.as_ref()).py()?;
    let value = out.value();
    Ok(value.data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Finite-difference check of every parameter group of the given variants on
/// the 16x16 model; returns `[(group, numel, max_rel_err, passed)]`.
#[pyfunction]
#[pyo3(signature = (variants = "abcdef", tol = 1e-4))]
fn gradcheck(py: Python<'_>, variants: &str, tol: f64) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let vs = variants
        .chars()
        .map(|c| c.to_string().parse::<Variant>())
        .collect::<teethseg::Result<Vec<_>>>()
        .py()?;
    let opts = GradCheckOptions::with_tol(tol);
    let rep = py.detach(move || run::cmd_gradcheck(&ModelConfig::tiny(), &vs, &opts)).py()?;
    Ok(rep.params.into_iter().map(|p| (p.name, p.numel, p.max_rel_err, p.passed)).collect())
}

#[pymodule]
#[pyo3(name = "teethseg")]
pub fn teethseg_py(m: &pyo3::Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(naive_upscale, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(cross_gate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
