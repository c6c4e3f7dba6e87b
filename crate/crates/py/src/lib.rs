//! Python bindings: configs, data generation, training, vector extraction,
//! sweeping and evaluation.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use steervec_core as core;
use steervec_core::experiment::{self, RunConfig};
use steervec_core::model::InterventionSpec;
use steervec_core::steering::{self, SteeringField};

pyo3::create_exception!(steervec, MismatchError, pyo3::exceptions::PyException);

fn err(e: core::Error) -> PyErr {
    use core::Error::*;
    let msg = e.to_string();
    match e {
        Config(_) | Shape(_) | Data(_) | Contract(_) | Steering(_) => PyValueError::new_err(msg),
        Training { .. } | Numeric { .. } => PyRuntimeError::new_err(msg),
        Mismatch(_) => MismatchError::new_err(msg),
        Format { .. } | Io(_) | Json(_) => PyOSError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Builds a config from its defaults, then applies keyword overrides
/// through the generated attribute setters.
macro_rules! apply_kwargs {
    ($ty:ty, $value:expr, $kwargs:expr) => {{
        let value: $ty = $value;
        match $kwargs {
            None => Ok(value),
            Some(kwargs) => {
                let obj = Bound::new(kwargs.py(), value)?;
                for (k, v) in kwargs.iter() {
                    let name: String = k.extract()?;
                    if !obj.as_any().hasattr(name.as_str())? {
                        return Err(PyValueError::new_err(format!("unknown field {name:?}")));
                    }
                    obj.as_any().setattr(name.as_str(), v)?;
                }
                let out: $ty = obj.borrow().clone();
                Ok(out)
            }
        }
    }};
}

#[pyclass(get_all, set_all, module = "steervec")]
#[derive(Clone)]
struct BiasConfig {
    n_train: usize,
    n_val: usize,
    n_test: usize,
    rho: f64,
    eta: f64,
    n_classes: usize,
    n_confounders: usize,
    vocab_size: usize,
    seq_len: usize,
    seed: u64,
}

impl From<&BiasConfig> for core::BiasConfig {
    fn from(c: &BiasConfig) -> Self {
        Self {
            n_train: c.n_train,
            n_val: c.n_val,
            n_test: c.n_test,
            rho: c.rho,
            eta: c.eta,
            n_classes: c.n_classes,
            n_confounders: c.n_confounders,
            vocab_size: c.vocab_size,
            seq_len: c.seq_len,
            seed: c.seed,
        }
    }
}

#[pymethods]
impl BiasConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let d = core::BiasConfig::default();
        let cfg = Self {
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            rho: d.rho,
            eta: d.eta,
            n_classes: d.n_classes,
            n_confounders: d.n_confounders,
            vocab_size: d.vocab_size,
            seq_len: d.seq_len,
            seed: d.seed,
        };
        apply_kwargs!(BiasConfig, cfg, kwargs)
    }

    fn validate(&self) -> PyResult<()> {
        core::BiasConfig::from(self).validate().py()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", core::BiasConfig::from(self))
    }
}

#[pyclass(get_all, set_all, module = "steervec")]
#[derive(Clone)]
struct ModelConfig {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    vocab_size: usize,
    seq_len: usize,
    n_classes: usize,
    seed: u64,
}

impl From<&ModelConfig> for core::ModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            seq_len: c.seq_len,
            n_classes: c.n_classes,
            seed: c.seed,
        }
    }
}

impl From<&core::ModelConfig> for ModelConfig {
    fn from(c: &core::ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            seq_len: c.seq_len,
            n_classes: c.n_classes,
            seed: c.seed,
        }
    }
}

#[pymethods]
impl ModelConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        apply_kwargs!(
            ModelConfig,
            Self::from(&core::ModelConfig::default()),
            kwargs
        )
    }

    fn validate(&self) -> PyResult<()> {
        core::ModelConfig::from(self).validate().py()
    }

    /// Hex SHA-256 of the canonical JSON form; vector files carry this.
    fn digest(&self) -> String {
        core::numeric::hex(&core::ModelConfig::from(self).digest())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", core::ModelConfig::from(self))
    }
}

#[pyclass(get_all, set_all, module = "steervec")]
#[derive(Clone)]
struct TrainConfig {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    shuffle: bool,
    seed: u64,
}

impl From<&TrainConfig> for core::TrainConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            weight_decay: c.weight_decay,
            shuffle: c.shuffle,
            seed: c.seed,
        }
    }
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let d = core::TrainConfig::default();
        let cfg = Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            weight_decay: d.weight_decay,
            shuffle: d.shuffle,
            seed: d.seed,
        };
        apply_kwargs!(TrainConfig, cfg, kwargs)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", core::TrainConfig::from(self))
    }
}

#[pyclass(module = "steervec")]
#[derive(Clone)]
struct Dataset(core::GroupedDataset);

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn from_text(text: &str, n_classes: usize, n_confounders: usize) -> PyResult<Self> {
        core::GroupedDataset::from_text(text, n_classes, n_confounders, "python")
            .py()
            .map(Self)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Example count per group id `y * n_confounders + a`.
    #[getter]
    fn group_counts(&self) -> Vec<usize> {
        self.0.group_table.clone()
    }

    /// `(tokens, y, a)` triples.
    #[getter]
    fn examples(&self) -> Vec<(Vec<u32>, u32, u32)> {
        self.0
            .examples
            .iter()
            .map(|e| (e.tokens.clone(), e.y, e.a))
            .collect()
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn select_group(&self, y: u32, a: u32) -> PyResult<Self> {
        core::data::select_group(&self.0, y, a).py().map(Self)
    }

    fn select_minority(&self, y: u32) -> PyResult<Self> {
        core::data::select_minority(&self.0, y).py().map(Self)
    }
}

#[pyfunction]
fn generate(config: &BiasConfig) -> PyResult<Dataset> {
    core::data::generate(&config.into()).py().map(Dataset)
}

#[pyfunction]
#[pyo3(signature = (dataset, fractions, balanced_test=true, seed=0))]
fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    balanced_test: bool,
    seed: u64,
) -> PyResult<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = core::data::split(&dataset.0, fractions, balanced_test, seed).py()?;
    Ok((Dataset(a), Dataset(b), Dataset(c)))
}

/// A residual-stream edit applied during the forward pass.
#[pyclass(module = "steervec")]
#[derive(Clone)]
struct Intervention(InterventionSpec);

#[pymethods]
impl Intervention {
    #[staticmethod]
    fn none() -> Self {
        Self(InterventionSpec::None)
    }

    /// Project `direction` (normalized here) out at every hook point.
    #[staticmethod]
    fn single(direction: Vec<f32>) -> PyResult<Self> {
        Ok(Self(InterventionSpec::SingleGlobal {
            direction: unit(&direction)?,
        }))
    }

    /// Per-slot ablation from a raw `[L * T * d_model]` difference field.
    #[staticmethod]
    fn full(n_layers: usize, seq_len: usize, d_model: usize, raw: Vec<f32>) -> PyResult<Self> {
        Ok(Self(InterventionSpec::FullField {
            field: SteeringField::from_raw(n_layers, seq_len, d_model, &raw).py()?,
        }))
    }

    #[staticmethod]
    fn subtract(direction: Vec<f32>, alpha: f32) -> PyResult<Self> {
        Ok(Self(InterventionSpec::Subtract {
            direction: unit(&direction)?,
            alpha,
        }))
    }

    fn __repr__(&self) -> String {
        format!("Intervention({})", self.0.describe())
    }
}

fn unit(v: &[f32]) -> PyResult<core::UnitDirection> {
    core::UnitDirection::from_raw(v)
        .ok_or_else(|| PyValueError::new_err("direction has (near) zero norm"))
}

fn spec(intervention: Option<&Intervention>) -> InterventionSpec {
    intervention.map_or(InterventionSpec::None, |i| i.0.clone())
}

#[pyclass(module = "steervec")]
#[derive(Clone)]
struct Model(core::ModelParams<f32>);

#[pymethods]
impl Model {
    #[staticmethod]
    fn init(config: &ModelConfig) -> PyResult<Self> {
        core::model::init_params(&config.into()).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core::train::load_checkpoint(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core::train::save_checkpoint(&self.0, path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &core::train::checkpoint_bytes(&self.0))
    }

    #[getter]
    fn config(&self) -> ModelConfig {
        (&self.0.config).into()
    }

    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    /// Class logits for one token sequence (CLS excluded).
    #[pyo3(signature = (tokens, intervention=None))]
    fn logits(&self, tokens: Vec<u32>, intervention: Option<&Intervention>) -> PyResult<Vec<f32>> {
        core::model::forward(&self.0, &tokens, &spec(intervention), false)
            .py()
            .map(|(l, _)| l)
    }

    #[pyo3(signature = (tokens, intervention=None))]
    fn predict(&self, tokens: Vec<u32>, intervention: Option<&Intervention>) -> PyResult<usize> {
        Ok(core::model::predict(&self.logits(tokens, intervention)?))
    }

    /// `resid_pre` activations as a flat `[L * T * d_model]` list.
    #[pyo3(signature = (tokens, intervention=None))]
    fn resid_pre(
        &self,
        tokens: Vec<u32>,
        intervention: Option<&Intervention>,
    ) -> PyResult<Vec<f32>> {
        let (_, trace) = core::model::forward(&self.0, &tokens, &spec(intervention), true).py()?;
        Ok(trace.expect("capture requested").resid_pre)
    }

    /// Maximum relative error between analytic and finite-difference gradients.
    #[pyo3(signature = (dataset, epsilon=1e-5))]
    fn grad_check(&self, dataset: &Dataset, epsilon: f64) -> PyResult<f64> {
        core::model::grad_check(&self.0, &dataset.0.examples, epsilon)
            .py()
            .map(|r| r.max_rel_error)
    }
}

#[pyclass(get_all, module = "steervec")]
struct TrainReport {
    initial_loss: f64,
    epoch_losses: Vec<f64>,
    epoch_accuracies: Vec<f64>,
    val_group_accuracy: Vec<Option<f64>>,
}

#[pyfunction]
fn train_erm(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> PyResult<(Model, TrainReport)> {
    let (params, r) = core::train::train_erm(&model.0, &train.0, &val.0, &config.into()).py()?;
    Ok((
        Model(params),
        TrainReport {
            initial_loss: r.initial_loss,
            epoch_losses: r.epochs.iter().map(|e| e.loss).collect(),
            epoch_accuracies: r.epochs.iter().map(|e| e.accuracy).collect(),
            val_group_accuracy: r.val_group_accuracy,
        },
    ))
}

#[pyclass(get_all, module = "steervec")]
#[derive(Clone)]
struct Candidate {
    layer: usize,
    position: usize,
    raw: Vec<f32>,
    direction: Option<Vec<f32>>,
    norm: f32,
}

impl From<&core::CandidateVector> for Candidate {
    fn from(c: &core::CandidateVector) -> Self {
        Self {
            layer: c.layer,
            position: c.position,
            raw: c.raw.clone(),
            direction: c.direction.as_ref().map(|d| d.as_slice().to_vec()),
            norm: c.norm,
        }
    }
}

impl Candidate {
    fn core(&self) -> core::CandidateVector {
        core::CandidateVector::from_raw(self.layer, self.position, self.raw.clone())
    }
}

#[pymethods]
impl Candidate {
    #[getter]
    fn degenerate(&self) -> bool {
        self.direction.is_none()
    }

    fn __repr__(&self) -> String {
        format!(
            "Candidate(layer={}, position={}, norm={:.4e})",
            self.layer, self.position, self.norm
        )
    }
}

/// Per-layer candidates at `position` from `mean(over) - mean(under)`.
#[pyfunction]
#[pyo3(signature = (model, over, under, position=0))]
fn extract_candidates(
    model: &Model,
    over: &Dataset,
    under: &Dataset,
    position: usize,
) -> PyResult<Vec<Candidate>> {
    let cands = steering::extract_candidates(&model.0, &over.0, &under.0, position).py()?;
    Ok(cands.iter().map(Candidate::from).collect())
}

/// Raw difference field `[L * T * d_model]` between two groups.
#[pyfunction]
fn difference_field(model: &Model, over: &Dataset, under: &Dataset) -> PyResult<Vec<f32>> {
    let mu = steering::mean_activations(&model.0, &over.0).py()?;
    let nu = steering::mean_activations(&model.0, &under.0).py()?;
    steering::diff_field(&mu, &nu).py()
}

#[pyfunction]
fn ablate_vector(x: Vec<f32>, direction: Vec<f32>) -> PyResult<Vec<f32>> {
    steering::ablate_vector(&x, &direction).py()
}

#[pyclass(get_all, module = "steervec")]
struct SweepResult {
    chosen_layer: usize,
    chosen_position: usize,
    chosen_wga: f64,
    chosen_aga: f64,
    direction: Vec<f32>,
    /// `(layer, position, wga, aga)` for every usable candidate.
    entries: Vec<(usize, usize, f64, f64)>,
}

#[pyfunction]
fn sweep(model: &Model, candidates: Vec<Candidate>, val: &Dataset) -> PyResult<SweepResult> {
    let cands: Vec<_> = candidates.iter().map(Candidate::core).collect();
    let r = steering::sweep_single_layer(&model.0, &cands, &val.0).py()?;
    Ok(SweepResult {
        chosen_layer: r.chosen_layer,
        chosen_position: r.chosen_position,
        chosen_wga: r.chosen_wga,
        chosen_aga: r.chosen_aga,
        direction: r.direction.as_slice().to_vec(),
        entries: r
            .entries
            .iter()
            .map(|e| (e.layer, e.position, e.wga, e.aga))
            .collect(),
    })
}

#[pyclass(module = "steervec")]
#[derive(Clone)]
struct EvalReport(core::EvalReport);

#[pymethods]
impl EvalReport {
    #[getter]
    fn wga(&self) -> f64 {
        self.0.wga
    }

    #[getter]
    fn aga(&self) -> f64 {
        self.0.aga
    }

    #[getter]
    fn overall(&self) -> f64 {
        self.0.overall
    }

    #[getter]
    fn group_accuracy(&self) -> Vec<f64> {
        self.0.group_accuracy.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn render(&self) -> String {
        self.0.render()
    }

    fn __repr__(&self) -> String {
        format!(
            "EvalReport(wga={:.4}, aga={:.4}, overall={:.4})",
            self.0.wga, self.0.aga, self.0.overall
        )
    }
}

#[pyfunction]
#[pyo3(signature = (model, dataset, intervention=None))]
fn evaluate(
    model: &Model,
    dataset: &Dataset,
    intervention: Option<&Intervention>,
) -> PyResult<EvalReport> {
    core::eval::group_accuracies(&model.0, &dataset.0, &spec(intervention))
        .py()
        .map(EvalReport)
}

/// Table with two-decimal percentage columns; rows are
/// `(dataset, method, worst, average, overall)` with `None` printed as `-`.
#[pyfunction]
fn render_table(rows: Vec<(String, String, Option<f64>, Option<f64>, Option<f64>)>) -> String {
    let rows: Vec<_> = rows
        .into_iter()
        .map(
            |(dataset, method, worst, average, overall)| core::eval::TableRow {
                dataset,
                method,
                worst,
                average,
                overall,
            },
        )
        .collect();
    core::eval::render_table(&rows)
}

#[pyclass(get_all, module = "steervec")]
struct PipelineOutcome {
    model: Model,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    candidates: Vec<Candidate>,
    chosen_layer: usize,
    baseline: EvalReport,
    steered: EvalReport,
    seconds: f64,
}

/// Generate, train, extract, sweep and evaluate with default settings.
/// Keyword arguments override `epochs`, `n_layers`, `d_model`, `n_heads`,
/// `d_ff`, `n_train`, `n_val` and `n_test`.
#[pyfunction]
#[pyo3(signature = (seed, **overrides))]
fn run_pipeline(
    py: Python<'_>,
    seed: u64,
    overrides: Option<&Bound<'_, pyo3::types::PyDict>>,
) -> PyResult<PipelineOutcome> {
    let mut cfg = RunConfig::with_seed(seed);
    if let Some(o) = overrides {
        for (k, v) in o.iter() {
            let key: String = k.extract()?;
            let n: usize = v.extract()?;
            match key.as_str() {
                "epochs" => cfg.train.epochs = n,
                "n_layers" => cfg.model.n_layers = n,
                "d_model" => cfg.model.d_model = n,
                "n_heads" => cfg.model.n_heads = n,
                "d_ff" => cfg.model.d_ff = n,
                "n_train" => cfg.data.n_train = n,
                "n_val" => cfg.data.n_val = n,
                "n_test" => cfg.data.n_test = n,
                other => return Err(PyValueError::new_err(format!("unknown override {other:?}"))),
            }
        }
    }
    let o = py.allow_threads(|| experiment::run_pipeline(&cfg)).py()?;
    Ok(PipelineOutcome {
        model: Model(o.params),
        train: Dataset(o.splits.train),
        val: Dataset(o.splits.val),
        test: Dataset(o.splits.test),
        candidates: o
            .extraction
            .candidates
            .iter()
            .map(Candidate::from)
            .collect(),
        chosen_layer: o.sweep.chosen_layer,
        baseline: EvalReport(o.baseline),
        steered: EvalReport(o.steered),
        seconds: o.elapsed.as_secs_f64(),
    })
}

/// The `steervec` Python module.
#[pymodule]
pub fn steervec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MismatchError", m.py().get_type::<MismatchError>())?;
    m.add_class::<BiasConfig>()?;
    m.add_class::<ModelConfig>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Intervention>()?;
    m.add_class::<Model>()?;
    m.add_class::<TrainReport>()?;
    m.add_class::<Candidate>()?;
    m.add_class::<SweepResult>()?;
    m.add_class::<EvalReport>()?;
    m.add_class::<PipelineOutcome>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train_erm, m)?)?;
    m.add_function(wrap_pyfunction!(extract_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(difference_field, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_vector, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
