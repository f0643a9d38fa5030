//! Python bindings: records, clustering, semantic entropy, conformal
//! calibration/prediction, metrics and the coverage simulator.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use squq_core::clustering::{cluster_matrix, ClusteringConfig};
use squq_core::conformal::{
    self, pooled_calibration_scores, prepare_all, quantile_rank, NonconformityScore, PreparedRecord, QuantileRank,
};
use squq_core::ingest::{self, SplitSpec};
use squq_core::metrics::{self, LabeledScore};
use squq_core::simulator::{self, SimConfig, SyntheticCorpusConfig};
use squq_core::uq::{self, Variant};
use squq_core::{EntailmentMatrix, LogProb};

create_exception!(squq, SquqError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    SquqError::new_err(e.to_string())
}

fn clustering(alpha: f64) -> PyResult<ClusteringConfig> {
    ClusteringConfig::new(alpha).map_err(err)
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(err)
}

fn logprobs(values: &[f64]) -> PyResult<Vec<LogProb>> {
    values.iter().map(|&v| LogProb::new(v).map_err(err)).collect()
}

/// One sampled response with per-token log-probabilities.
#[pyclass(name = "Response", module = "squq", from_py_object)]
#[derive(Clone)]
pub struct PyResponse {
    inner: squq_core::Response,
}

#[pymethods]
impl PyResponse {
    #[new]
    #[pyo3(signature = (text, token_logprobs, correct=None, gpt4_rating=None, rouge_l=None))]
    fn new(
        text: String,
        token_logprobs: Vec<f64>,
        correct: Option<bool>,
        gpt4_rating: Option<f64>,
        rouge_l: Option<f64>,
    ) -> Self {
        let mut inner = squq_core::Response::new(text, token_logprobs);
        inner.correct = correct;
        inner.gpt4_rating = gpt4_rating;
        inner.rouge_l = rouge_l;
        PyResponse { inner }
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn token_logprobs(&self) -> Vec<f64> {
        self.inner.token_logprobs.clone()
    }

    #[getter]
    fn correct(&self) -> Option<bool> {
        self.inner.correct
    }

    #[getter]
    fn gpt4_rating(&self) -> Option<f64> {
        self.inner.gpt4_rating
    }

    #[getter]
    fn rouge_l(&self) -> Option<f64> {
        self.inner.rouge_l
    }

    /// Correctness from the explicit label, else the rating, else RougeL.
    fn label(&self) -> Option<bool> {
        self.inner.label()
    }

    fn sequence_logprob(&self) -> PyResult<f64> {
        Ok(squq_core::sequence_logprob(&self.inner).map_err(err)?.value())
    }

    fn __repr__(&self) -> String {
        format!("Response({:?}, {} tokens)", self.inner.text, self.inner.token_logprobs.len())
    }
}

/// A query with its sampled responses and directional entailment matrix.
#[pyclass(name = "GenerationRecord", module = "squq", from_py_object)]
#[derive(Clone)]
pub struct PyRecord {
    inner: squq_core::GenerationRecord,
}

#[pymethods]
impl PyRecord {
    #[new]
    #[pyo3(signature = (query_id, question, responses, entailment, context=None))]
    fn new(
        query_id: String,
        question: String,
        responses: Vec<PyResponse>,
        entailment: Vec<Vec<f64>>,
        context: Option<String>,
    ) -> Self {
        let mut inner = squq_core::GenerationRecord::new(
            query_id,
            question,
            responses.into_iter().map(|r| r.inner).collect(),
            EntailmentMatrix::from_rows(entailment),
        );
        inner.context = context;
        PyRecord { inner }
    }

    #[getter]
    fn query_id(&self) -> &str {
        &self.inner.query_id
    }

    #[getter]
    fn question(&self) -> &str {
        &self.inner.question
    }

    #[getter]
    fn context(&self) -> Option<&str> {
        self.inner.context.as_deref()
    }

    #[getter]
    fn responses(&self) -> Vec<PyResponse> {
        self.inner.responses.iter().map(|r| PyResponse { inner: r.clone() }).collect()
    }

    #[getter]
    fn entailment(&self) -> Vec<Vec<f64>> {
        self.inner.entailment_fwd.rows().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n_responses()
    }

    /// Per-response correctness, or None if any response is unlabelled.
    fn labels(&self) -> Option<Vec<bool>> {
        self.inner.labels()
    }

    /// Raise `SquqError` if the record breaks the corpus schema.
    fn validate(&self) -> PyResult<()> {
        ingest::validate_at(&self.inner, 1).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyRecord { inner: ingest::parse_record(text, 1).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("GenerationRecord({:?}, {} responses)", self.inner.query_id, self.inner.n_responses())
    }
}

fn unwrap_records(records: Vec<PyRecord>) -> Vec<squq_core::GenerationRecord> {
    records.into_iter().map(|r| r.inner).collect()
}

fn wrap_records(records: Vec<squq_core::GenerationRecord>) -> Vec<PyRecord> {
    records.into_iter().map(|inner| PyRecord { inner }).collect()
}

/// Fitted conformal threshold.
#[pyclass(name = "CalibrationModel", module = "squq", from_py_object)]
#[derive(Clone)]
pub struct PyCalibrationModel {
    inner: conformal::CalibrationModel,
    alpha: f64,
    variant: Variant,
}

#[pymethods]
impl PyCalibrationModel {
    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    /// `inf` when the calibration set is too small for the requested epsilon.
    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.iter().map(|s| s.value()).collect()
    }

    #[getter]
    fn n_scores(&self) -> usize {
        self.inner.n_scores()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.alpha
    }

    #[getter]
    fn variant(&self) -> String {
        self.variant.to_string()
    }

    /// Prediction set for one record: `(cluster_id, response_index, text, score)`.
    fn predict(&self, record: &PyRecord) -> PyResult<Vec<(usize, usize, String, f64)>> {
        let p = PreparedRecord::new(record.inner.clone(), &clustering(self.alpha)?, self.variant).map_err(err)?;
        let set = p.predict(&self.inner).map_err(err)?;
        Ok(set
            .entries
            .into_iter()
            .map(|e| (e.cluster_id, e.response_index, e.text, e.score))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "CalibrationModel(epsilon={}, threshold={}, n_scores={})",
            self.inner.epsilon,
            self.inner.threshold,
            self.inner.n_scores()
        )
    }
}

#[pyclass(name = "SimReport", module = "squq", get_all, skip_from_py_object)]
pub struct PySimReport {
    mean_coverage: f64,
    sigma: f64,
    lower_bound: f64,
    upper_bound: f64,
    per_trial: Vec<f64>,
}

#[pymethods]
impl PySimReport {
    fn within_bounds(&self) -> bool {
        self.mean_coverage >= self.lower_bound && self.mean_coverage <= self.upper_bound
    }

    fn __repr__(&self) -> String {
        format!(
            "SimReport(mean_coverage={:.6}, bounds=[{:.6}, {:.6}])",
            self.mean_coverage, self.lower_bound, self.upper_bound
        )
    }
}

/// Cluster assignments from a forward entailment matrix.
#[pyfunction]
#[pyo3(signature = (entailment, alpha=0.5))]
fn cluster(entailment: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<usize>> {
    let cs = cluster_matrix(&EntailmentMatrix::from_rows(entailment), &clustering(alpha)?).map_err(err)?;
    Ok(cs.assignments())
}

#[pyfunction]
#[pyo3(signature = (record, alpha=0.5))]
fn cluster_record(record: &PyRecord, alpha: f64) -> PyResult<Vec<usize>> {
    let cs = squq_core::clustering::cluster_record(&record.inner, &clustering(alpha)?).map_err(err)?;
    Ok(cs.assignments())
}

/// `(semantic_entropy, n_clusters)` for one record.
#[pyfunction]
#[pyo3(signature = (record, alpha=0.5, variant="unnormalized"))]
fn semantic_entropy(record: &PyRecord, alpha: f64, variant: &str) -> PyResult<(f64, usize)> {
    let s = uq::score_record(&record.inner, &clustering(alpha)?, self::variant(variant)?).map_err(err)?;
    Ok((s.semantic_entropy, s.n_clusters))
}

/// Entropy of the distribution obtained by renormalizing `log_masses`.
#[pyfunction]
fn entropy_from_log_masses(log_masses: Vec<f64>) -> PyResult<f64> {
    let masses = uq::masses_from_log_masses(&logprobs(&log_masses)?).map_err(err)?;
    uq::semantic_entropy(&masses).map_err(err)
}

#[pyfunction]
fn log_sum_exp(values: Vec<f64>) -> PyResult<f64> {
    Ok(squq_core::log_sum_exp(&logprobs(&values)?).map_err(err)?.value())
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    squq_core::softmax(&scores).map_err(err)
}

/// 1-based conformal rank, or None when it exceeds `n`.
#[pyfunction]
#[pyo3(name = "quantile_rank")]
fn py_quantile_rank(n: usize, epsilon: f64) -> PyResult<Option<usize>> {
    Ok(match quantile_rank(n, epsilon).map_err(err)? {
        QuantileRank::Rank(q) => Some(q),
        QuantileRank::Overflow => None,
    })
}

/// Calibrate directly on nonconformity scores.
#[pyfunction]
#[pyo3(signature = (scores, epsilon, alpha=0.5, variant="unnormalized"))]
fn calibrate(scores: Vec<f64>, epsilon: f64, alpha: f64, variant: &str) -> PyResult<PyCalibrationModel> {
    let scores = scores
        .into_iter()
        .map(|s| NonconformityScore::new(s).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(PyCalibrationModel {
        inner: conformal::calibrate(scores, epsilon).map_err(err)?,
        alpha: clustering(alpha)?.alpha,
        variant: self::variant(variant)?,
    })
}

/// Cluster a labelled calibration corpus and fit the threshold.
#[pyfunction]
#[pyo3(signature = (records, epsilon, alpha=0.5, variant="unnormalized"))]
fn calibrate_records(
    py: Python<'_>,
    records: Vec<PyRecord>,
    epsilon: f64,
    alpha: f64,
    variant: &str,
) -> PyResult<PyCalibrationModel> {
    let cfg = clustering(alpha)?;
    let v = self::variant(variant)?;
    let records = unwrap_records(records);
    let inner = py
        .detach(|| {
            let prepared = prepare_all(records, &cfg, v)?;
            conformal::calibrate(pooled_calibration_scores(&prepared)?, epsilon)
        })
        .map_err(err)?;
    Ok(PyCalibrationModel { inner, alpha, variant: v })
}

/// `(epsilon, tau, coverage, mean_set_size)` per epsilon.
#[pyfunction]
#[pyo3(signature = (model, test, epsilons))]
fn sweep_epsilons(
    py: Python<'_>,
    model: &PyCalibrationModel,
    test: Vec<PyRecord>,
    epsilons: Vec<f64>,
) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let cfg = clustering(model.alpha)?;
    let test = unwrap_records(test);
    let scores = model.inner.scores.clone();
    let v = model.variant;
    let points = py
        .detach(|| {
            let prepared = prepare_all(test, &cfg, v)?;
            conformal::sweep_epsilons(&scores, &prepared, &epsilons)
        })
        .map_err(err)?;
    Ok(points
        .into_iter()
        .map(|p| (p.epsilon, p.tau, p.coverage, p.mean_set_size))
        .collect())
}

fn labeled(uncertainty: &[f64], correct: &[bool]) -> PyResult<Vec<LabeledScore>> {
    if uncertainty.len() != correct.len() {
        return Err(err(format!(
            "{} uncertainties for {} labels",
            uncertainty.len(),
            correct.len()
        )));
    }
    // zero-padded ids keep input order as the tie-break
    Ok(uncertainty
        .iter()
        .zip(correct)
        .enumerate()
        .map(|(i, (&u, &c))| LabeledScore::new(format!("{i:020}"), u, c))
        .collect())
}

/// Probability that a wrong answer is more uncertain than a correct one.
#[pyfunction]
fn auroc(uncertainty: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&labeled(&uncertainty, &correct)?).map_err(err)
}

#[pyfunction]
fn auarc(uncertainty: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    metrics::auarc(&labeled(&uncertainty, &correct)?).map_err(err)
}

#[pyfunction]
fn aurac(uncertainty: Vec<f64>, correct: Vec<bool>) -> PyResult<f64> {
    metrics::aurac(&labeled(&uncertainty, &correct)?).map_err(err)
}

/// `(rejection_fraction, accuracy)` points, most uncertain rejected first.
#[pyfunction]
fn accuracy_rejection_curve(uncertainty: Vec<f64>, correct: Vec<bool>) -> PyResult<Vec<(f64, f64)>> {
    let curve = metrics::accuracy_rejection_curve(&labeled(&uncertainty, &correct)?).map_err(err)?;
    Ok(curve.into_iter().map(|p| (p.rejection_fraction, p.accuracy)).collect())
}

#[pyfunction]
#[pyo3(signature = (n_cal=99, n_test=100, trials=2000, epsilon=0.2, seed=0, dist="uniform"))]
fn simulate_coverage(
    py: Python<'_>,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    epsilon: f64,
    seed: u64,
    dist: &str,
) -> PyResult<PySimReport> {
    let cfg = SimConfig {
        n_cal,
        n_test,
        trials,
        epsilon,
        seed,
        distribution: dist.parse().map_err(err)?,
    };
    let r = py.detach(|| simulator::simulate_coverage(&cfg)).map_err(err)?;
    Ok(PySimReport {
        mean_coverage: r.mean_coverage,
        sigma: r.sigma,
        lower_bound: r.lower_bound,
        upper_bound: r.upper_bound,
        per_trial: r.per_trial,
    })
}

/// Records with planted semantic groups, one of them correct.
#[pyfunction]
#[pyo3(signature = (n_queries, seed=0, noise=0.1, n_responses=20))]
fn synthetic_corpus(n_queries: usize, seed: u64, noise: f64, n_responses: usize) -> PyResult<Vec<PyRecord>> {
    let cfg = SyntheticCorpusConfig {
        n_queries,
        n_responses,
        noise,
        seed,
        ..SyntheticCorpusConfig::default()
    };
    Ok(wrap_records(simulator::generate_synthetic_corpus(&cfg).map_err(err)?))
}

#[pyfunction]
fn load_corpus(path: std::path::PathBuf) -> PyResult<Vec<PyRecord>> {
    Ok(wrap_records(ingest::load_corpus(path).map_err(err)?))
}

#[pyfunction]
fn save_corpus(path: std::path::PathBuf, records: Vec<PyRecord>) -> PyResult<()> {
    ingest::save_corpus(path, &unwrap_records(records)).map_err(err)
}

/// Deterministic `(calibration, test)` partition.
#[pyfunction]
#[pyo3(signature = (records, calibration_fraction=0.5, seed=0, strategy="by_query_hash"))]
fn split(
    records: Vec<PyRecord>,
    calibration_fraction: f64,
    seed: u64,
    strategy: &str,
) -> PyResult<(Vec<PyRecord>, Vec<PyRecord>)> {
    let spec = SplitSpec::new(calibration_fraction, seed, strategy.parse().map_err(err)?).map_err(err)?;
    let (cal, test) = ingest::split(unwrap_records(records), &spec).map_err(err)?;
    Ok((wrap_records(cal), wrap_records(test)))
}

#[pymodule]
fn squq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SquqError", m.py().get_type::<SquqError>())?;
    m.add_class::<PyResponse>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyCalibrationModel>()?;
    m.add_class::<PySimReport>()?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_record, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_from_log_masses, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantile_rank, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_records, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_epsilons, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auarc, m)?)?;
    m.add_function(wrap_pyfunction!(aurac, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_rejection_curve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(save_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    Ok(())
}
