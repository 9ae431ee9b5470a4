//! Python bindings for the local-aggregation embedding engine.
//!
//! The module mirrors the Rust surface: datasets, training configs, the
//! trainer, saved artifacts, and the evaluation protocols. Long-running
//! calls detach from the interpreter so other Python threads keep going.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use laggre_core::dataset::{generate, GenConfig};
use laggre_core::encoder::{self, gradcheck_chain, EncoderParams};
use laggre_core::eval::{self, ProbeConfig};
use laggre_core::objective::{gradcheck_aggregation, gradcheck_instance, GradCheckReport};
use laggre_core::trainer::{
    self, background_mode_name, close_mode_name, cluster_source_name, parse_background_mode,
    parse_close_mode, parse_cluster_source, parse_recluster_unit, recluster_unit_name,
    TrainConfig, TrainTelemetry,
};
use laggre_core::{Dataset, EmbeddingVector, LaError, MemoryBank, Temperature};

fn to_py_err(e: LaError) -> PyErr {
    match &e {
        LaError::Io { .. } => PyIOError::new_err(e.to_string()),
        LaError::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn ok<T>(result: laggre_core::Result<T>) -> PyResult<T> {
    result.map_err(to_py_err)
}

/// A fixed-dimension input table with optional evaluation labels.
#[pyclass(name = "Dataset", module = "laggre_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthesizes a labeled dataset: unit class centers with a minimum
    /// pairwise angle, Gaussian latents around them, and a fixed random
    /// relu lift to the input dimension.
    #[staticmethod]
    #[pyo3(signature = (classes=10, per_class=200, latent_dim=2, input_dim=64,
                        noise_sigma=0.05, seed=0))]
    fn generate(
        classes: usize,
        per_class: usize,
        latent_dim: usize,
        input_dim: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let generated = ok(generate(&GenConfig {
            classes,
            per_class,
            latent_dim,
            input_dim,
            noise_sigma,
            seed,
        }))?;
        Ok(PyDataset {
            inner: generated.dataset,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: ok(Dataset::load(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ok(self.inner.save(&path))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Input row `i` as Python floats.
    fn input(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(to_py_err(LaError::IndexOutOfRange {
                index: i,
                len: self.inner.len(),
            }));
        }
        Ok(self.inner.input_f64(i))
    }

    /// Evaluation labels, or None for unlabeled data.
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(|l| l.to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, input_dim={}, labeled={})",
            self.inner.len(),
            self.inner.input_dim(),
            self.inner.labels().is_some()
        )
    }
}

/// Everything that determines a training run besides the dataset.
///
/// Construct with keyword arguments; unspecified fields keep the reference
/// defaults. `k`, `m`, and `knn_k` accept None for "size from the training
/// set". Weight decay is exposed as `lambda_` because `lambda` is a Python
/// keyword, though `TrainConfig(**{"lambda": x})` also works.
#[pyclass(name = "TrainConfig", module = "laggre_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

impl PyTrainConfig {
    fn apply(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let c = &mut self.inner;
        match key {
            "seed" => c.seed = value.extract()?,
            "dim" => c.dim = value.extract()?,
            "hidden_dims" => c.hidden_dims = value.extract()?,
            "tau" => c.tau = value.extract()?,
            "lambda" | "lambda_" => c.lambda = value.extract()?,
            "mixing" => c.mixing = value.extract()?,
            "k" => c.k = value.extract()?,
            "h" => c.h = value.extract()?,
            "m" => c.m = value.extract()?,
            "k_prime" => c.k_prime = value.extract()?,
            "batch_size" => c.batch_size = value.extract()?,
            "epochs" => c.epochs = value.extract()?,
            "warm_start_epochs" => c.warm_start_epochs = value.extract()?,
            "lr" => c.lr = value.extract()?,
            "lr_milestones" => c.lr_milestones = value.extract()?,
            "momentum" => c.momentum = value.extract()?,
            "recluster_every" => c.recluster_every = value.extract()?,
            "recluster_unit" => {
                c.recluster_unit = ok(parse_recluster_unit(&value.extract::<String>()?))?
            }
            "background_mode" => {
                c.background_mode = ok(parse_background_mode(&value.extract::<String>()?))?
            }
            "close_mode" => c.close_mode = ok(parse_close_mode(&value.extract::<String>()?))?,
            "cluster_source" => {
                c.cluster_source = ok(parse_cluster_source(&value.extract::<String>()?))?
            }
            "knn_k" => c.knn_k = value.extract()?,
            _ => {
                return Err(PyValueError::new_err(format!(
                    "unknown config field {key:?}"
                )))
            }
        }
        Ok(())
    }
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut config = PyTrainConfig {
            inner: TrainConfig::default(),
        };
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                config.apply(&key, &value)?;
            }
        }
        Ok(config)
    }

    /// Parses the `key = value` config-file format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyTrainConfig {
            inner: ok(TrainConfig::parse(text))?,
        })
    }

    /// Checks the config against a dataset of `n` samples.
    fn validate(&self, n: usize) -> PyResult<()> {
        ok(self.inner.validate(n))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn hidden_dims(&self) -> Vec<usize> {
        self.inner.hidden_dims.clone()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn mixing(&self) -> f64 {
        self.inner.mixing
    }

    #[getter]
    fn k(&self) -> Option<usize> {
        self.inner.k
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.h
    }

    #[getter]
    fn m(&self) -> Option<usize> {
        self.inner.m
    }

    #[getter]
    fn k_prime(&self) -> usize {
        self.inner.k_prime
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn warm_start_epochs(&self) -> usize {
        self.inner.warm_start_epochs
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn lr_milestones(&self) -> Vec<usize> {
        self.inner.lr_milestones.clone()
    }

    #[getter]
    fn momentum(&self) -> f64 {
        self.inner.momentum
    }

    #[getter]
    fn recluster_every(&self) -> usize {
        self.inner.recluster_every
    }

    #[getter]
    fn recluster_unit(&self) -> &'static str {
        recluster_unit_name(self.inner.recluster_unit)
    }

    #[getter]
    fn background_mode(&self) -> &'static str {
        background_mode_name(self.inner.background_mode)
    }

    #[getter]
    fn close_mode(&self) -> &'static str {
        close_mode_name(self.inner.close_mode)
    }

    #[getter]
    fn cluster_source(&self) -> &'static str {
        cluster_source_name(self.inner.cluster_source)
    }

    #[getter]
    fn knn_k(&self) -> Option<usize> {
        self.inner.knn_k
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        let opt = |v: Option<usize>| v.map_or("None".to_string(), |x| x.to_string());
        format!(
            "TrainConfig(seed={}, dim={}, hidden_dims={:?}, tau={}, lambda_={}, \
             mixing={}, k={}, h={}, m={}, k_prime={}, batch_size={}, epochs={}, \
             warm_start_epochs={}, lr={}, lr_milestones={:?}, momentum={}, \
             recluster_every={}, recluster_unit='{}', background_mode='{}', \
             close_mode='{}', cluster_source='{}', knn_k={})",
            c.seed,
            c.dim,
            c.hidden_dims,
            c.tau,
            c.lambda,
            c.mixing,
            opt(c.k),
            c.h,
            opt(c.m),
            c.k_prime,
            c.batch_size,
            c.epochs,
            c.warm_start_epochs,
            c.lr,
            c.lr_milestones,
            c.momentum,
            c.recluster_every,
            recluster_unit_name(c.recluster_unit),
            background_mode_name(c.background_mode),
            close_mode_name(c.close_mode),
            cluster_source_name(c.cluster_source),
            opt(c.knn_k),
        )
    }
}

/// A trained encoder: a small MLP whose outputs are L2-normalized.
#[pyclass(name = "Encoder", module = "laggre_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoder {
            inner: ok(EncoderParams::load(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ok(self.inner.save(&path))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Layer widths from input to embedding.
    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    /// Maps one input row to its unit-norm embedding.
    fn embed(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let (z, _) = ok(encoder::forward(&self.inner, &x))?;
        let v = ok(EmbeddingVector::normalize(&z))?;
        Ok(v.as_slice().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(dims={:?}, param_count={})",
            self.inner.dims(),
            self.inner.param_count()
        )
    }
}

/// One embedding row per training sample, all unit norm.
#[pyclass(name = "MemoryBank", module = "laggre_py", skip_from_py_object)]
#[derive(Clone)]
struct PyMemoryBank {
    inner: MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMemoryBank {
            inner: ok(MemoryBank::load(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ok(self.inner.save(&path))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Bank row `i` as Python floats.
    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(to_py_err(LaError::IndexOutOfRange {
                index: i,
                len: self.inner.len(),
            }));
        }
        Ok(self.inner.row_f64(i))
    }

    /// Labels carried for evaluation, or None.
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(|l| l.to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "MemoryBank(n={}, dim={}, labeled={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.labels().is_some()
        )
    }
}

/// Output of `train`: the encoder, the memory bank, and telemetry.
#[pyclass(name = "TrainResult", module = "laggre_py")]
struct PyTrainResult {
    params: EncoderParams,
    bank: MemoryBank,
    telemetry: TrainTelemetry,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn encoder(&self) -> PyEncoder {
        PyEncoder {
            inner: self.params.clone(),
        }
    }

    #[getter]
    fn bank(&self) -> PyMemoryBank {
        PyMemoryBank {
            inner: self.bank.clone(),
        }
    }

    #[getter]
    fn train_count(&self) -> usize {
        self.telemetry.train_count
    }

    #[getter]
    fn val_count(&self) -> usize {
        self.telemetry.val_count
    }

    /// One dict per telemetry record: the init row, then one per epoch.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let list = PyList::empty(py);
        for r in &self.telemetry.records {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("phase", r.phase.to_string())?;
            d.set_item("mean_loss", r.mean_loss)?;
            d.set_item("skipped", r.skipped)?;
            d.set_item("knn_acc", r.knn_acc)?;
            d.set_item("local_density", r.local_density)?;
            d.set_item("background_density", r.background_density)?;
            d.set_item("seconds", r.seconds)?;
            list.append(d)?;
        }
        Ok(list)
    }

    /// The telemetry table in its on-disk CSV form.
    fn telemetry_csv(&self) -> String {
        self.telemetry.to_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainResult(train_count={}, val_count={}, records={})",
            self.telemetry.train_count,
            self.telemetry.val_count,
            self.telemetry.records.len()
        )
    }
}

/// Runs the full training procedure and returns the trained artifacts.
#[pyfunction]
fn train(
    py: Python<'_>,
    dataset: PyRef<'_, PyDataset>,
    config: PyRef<'_, PyTrainConfig>,
) -> PyResult<PyTrainResult> {
    let data = &dataset.inner;
    let cfg = &config.inner;
    let output = ok(py.detach(|| trainer::train(data, cfg)))?;
    Ok(PyTrainResult {
        params: output.params,
        bank: output.bank,
        telemetry: output.telemetry,
    })
}

/// Recomputes the validation kNN accuracy that training reports in its
/// final telemetry record, from saved artifacts alone.
#[pyfunction]
fn evaluate_knn(
    py: Python<'_>,
    dataset: PyRef<'_, PyDataset>,
    encoder: PyRef<'_, PyEncoder>,
    bank: PyRef<'_, PyMemoryBank>,
    config: PyRef<'_, PyTrainConfig>,
) -> PyResult<f64> {
    let data = &dataset.inner;
    let params = &encoder.inner;
    let rows = &bank.inner;
    let cfg = &config.inner;
    ok(py.detach(|| trainer::evaluate_knn(data, params, rows, cfg)))
}

/// Embeds both halves of the seeded split with a frozen encoder and fits
/// a linear classifier on the training half.
#[pyfunction]
#[pyo3(signature = (dataset, encoder, split_seed=0, epochs=90, lr=0.01))]
fn probe_split(
    py: Python<'_>,
    dataset: PyRef<'_, PyDataset>,
    encoder: PyRef<'_, PyEncoder>,
    split_seed: u64,
    epochs: usize,
    lr: f64,
) -> PyResult<f64> {
    let data = &dataset.inner;
    let params = &encoder.inner;
    let probe = ProbeConfig {
        epochs,
        lr,
        ..ProbeConfig::default()
    };
    ok(py.detach(|| trainer::probe_split(data, params, &probe, split_seed)))
}

/// Normalizes `embedding` and votes among its `k` nearest bank rows.
/// Returns `(label, confidence)`.
#[pyfunction]
#[pyo3(signature = (bank, embedding, k, tau=0.07))]
fn knn_classify(
    bank: PyRef<'_, PyMemoryBank>,
    embedding: Vec<f64>,
    k: usize,
    tau: f64,
) -> PyResult<(u32, f64)> {
    let t = ok(Temperature::new(tau))?;
    let v = ok(EmbeddingVector::normalize(&embedding))?;
    ok(eval::knn_classify(&v, &bank.inner, k, t))
}

/// Per-row mean similarity to the nearest neighbors and to a background
/// rank band. Returns a dict with both series and their means.
#[pyfunction]
#[pyo3(signature = (bank, local_rank=None, band_low=None, band_high=None))]
fn density_profile<'py>(
    py: Python<'py>,
    bank: PyRef<'_, PyMemoryBank>,
    local_rank: Option<usize>,
    band_low: Option<usize>,
    band_high: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let n = bank.inner.len();
    let local_rank = local_rank.unwrap_or_else(|| eval::default_local_rank(n));
    let band = match (band_low, band_high) {
        (Some(low), Some(high)) => (low, high),
        (None, None) => eval::default_band(n),
        _ => {
            return Err(PyValueError::new_err(
                "band_low and band_high must be given together",
            ))
        }
    };
    let rows = &bank.inner;
    let profile = ok(py.detach(|| eval::density_profile(rows, local_rank, band)))?;
    let d = PyDict::new(py);
    d.set_item("local", profile.local().to_vec())?;
    d.set_item("background", profile.background().to_vec())?;
    d.set_item("mean_local", profile.mean_local())?;
    d.set_item("mean_background", profile.mean_background())?;
    d.set_item("local_rank", profile.local_rank())?;
    d.set_item("band", profile.band())?;
    Ok(d)
}

/// Agreement between two integer labelings of the same items,
/// chance-corrected: 1 for identical partitions, near 0 for independent
/// ones.
#[pyfunction]
fn adjusted_rand_index(a: Vec<u32>, b: Vec<u32>) -> PyResult<f64> {
    ok(eval::adjusted_rand_index(&a, &b))
}

/// Compares analytic gradients against central differences on random
/// cases. Returns a dict keyed by check name ("instance", "aggregation",
/// "chain"), each holding trials, step, and error statistics.
#[pyfunction]
#[pyo3(signature = (trials=100, h=1e-5, chain_h=1e-4, seed=0))]
fn gradcheck<'py>(
    py: Python<'py>,
    trials: usize,
    h: f64,
    chain_h: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let reports = ok(py.detach(|| -> laggre_core::Result<[GradCheckReport; 3]> {
        Ok([
            gradcheck_instance(trials, h, seed)?,
            gradcheck_aggregation(trials, h, seed)?,
            gradcheck_chain(trials, chain_h, seed)?,
        ])
    }))?;
    let out = PyDict::new(py);
    for (name, report) in ["instance", "aggregation", "chain"].iter().zip(reports.iter()) {
        let d = PyDict::new(py);
        d.set_item("trials", report.trials)?;
        d.set_item("step", report.step)?;
        d.set_item("max_rel_err", report.max_rel_err)?;
        d.set_item("mean_rel_err", report.mean_rel_err)?;
        d.set_item("max_abs_err", report.max_abs_err)?;
        out.set_item(name, d)?;
    }
    Ok(out)
}

/// Local-aggregation embedding training and evaluation.
#[pymodule]
fn laggre_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_knn, m)?)?;
    m.add_function(wrap_pyfunction!(probe_split, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add_function(wrap_pyfunction!(density_profile, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
