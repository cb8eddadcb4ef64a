//! Python bindings for the discourse-particle toolkit.
//!
//! Points are passed as lists of equal-length float lists; cluster labels
//! come back as `int | None`, with `None` for noise.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use discourse_core::cluster::{self, ClusterAssignment, DbscanParams, TsneConfig};
use discourse_core::corpus::{self, CorpusFormat, ParticleInventory};
use discourse_core::encoder::tensor::Matrix;
use discourse_core::metrics;
use discourse_core::translate::{self, LexicalTable, LoopConfig, ParallelPair};

fn err(e: discourse_core::Error) -> PyErr {
    match e {
        discourse_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(points: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = points.first().map_or(0, Vec::len);
    if points.is_empty() || cols == 0 {
        return Err(PyValueError::new_err("points must be a non-empty list of non-empty rows"));
    }
    if let Some(i) = points.iter().position(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("row {i} has {} values, expected {cols}", points[i].len())));
    }
    let rows = points.len();
    Ok(Matrix::from_vec(rows, cols, points.into_iter().flatten().collect()))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn pairs(raw: Vec<(String, String)>) -> PyResult<Vec<ParallelPair>> {
    raw.iter().map(|(s, t)| ParallelPair::new(s, t).map_err(err)).collect()
}

/// A dialogue corpus keyed by `(dialogue_id, turn)`.
#[pyclass(module = "discourse_particles", frozen)]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (path, format = "jsonl-dialogue"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: CorpusFormat = format.parse().map_err(err)?;
        Ok(Self {
            inner: corpus::ingest_corpus(&path, format).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text, format = "jsonl-dialogue"))]
    fn parse(text: &str, format: &str) -> PyResult<Self> {
        let format: CorpusFormat = format.parse().map_err(err)?;
        Ok(Self {
            inner: corpus::parse_corpus(text, format).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dialogue_count(&self) -> usize {
        self.inner.dialogue_count()
    }

    /// Normalized tokens of one utterance, or `None` if the key is absent.
    fn tokens(&self, dialogue_id: &str, turn: usize) -> Option<Vec<String>> {
        self.inner.get(dialogue_id, turn).map(|u| u.tokens.clone())
    }

    /// `(dialogue_id, turn, particle)` for every three-turn window whose last
    /// utterance ends in one of `particles`.
    fn particle_windows(&self, particles: Vec<String>) -> PyResult<Vec<(String, usize, String)>> {
        let inv = ParticleInventory::new(particles).map_err(err)?;
        Ok(corpus::extract_windows(&self.inner, &inv)
            .iter()
            .map(|w| {
                let k = w.key();
                (k.dialogue_id, k.turn, w.particle().to_string())
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} utterances, {} dialogues)", self.inner.len(), self.inner.dialogue_count())
    }
}

/// IBM Model 1 lexical table trained by EM.
#[pyclass(module = "discourse_particles", frozen)]
struct Aligner {
    table: LexicalTable,
    log_likelihood: Vec<f64>,
}

#[pymethods]
impl Aligner {
    #[new]
    #[pyo3(signature = (pairs, em_iterations = 10))]
    fn new(pairs: Vec<(String, String)>, em_iterations: usize) -> PyResult<Self> {
        let a = translate::train_alignment(&self::pairs(pairs)?, em_iterations).map_err(err)?;
        Ok(Self {
            table: a.table,
            log_likelihood: a.log_likelihood,
        })
    }

    /// t(target | source).
    fn prob(&self, source: &str, target: &str) -> f64 {
        self.table.prob(source, target)
    }

    fn best(&self, source: &str) -> Option<String> {
        self.table.best(source).map(str::to_string)
    }

    /// Word-by-word greedy translation.
    fn translate(&self, sentence: &str) -> String {
        translate::translate_greedy(&self.table, &translate::split_words(sentence)).join(" ")
    }

    /// Training log-likelihood before EM, then after each iteration.
    #[getter]
    fn log_likelihood(&self) -> Vec<f64> {
        self.log_likelihood.clone()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<i64>, b: Vec<i64>) -> PyResult<f64> {
    metrics::adjusted_rand_index(&a, &b).map_err(err)
}

/// Label-permutation test on the ARI. Returns a dict with `observed`,
/// `p_value`, `at_least_observed` and `permutations`.
#[pyfunction]
#[pyo3(signature = (clusters, functions, permutations = 999, seed = 0))]
fn permutation_test<'py>(
    py: Python<'py>,
    clusters: Vec<i64>,
    functions: Vec<String>,
    permutations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let t = metrics::permutation_test_ari(&clusters, &functions, permutations, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("observed", t.observed)?;
    d.set_item("p_value", t.p_value)?;
    d.set_item("at_least_observed", t.at_least_observed)?;
    d.set_item("permutations", t.permutations)?;
    Ok(d)
}

/// Recall@k over groups of `(scores, gold_index)`.
#[pyfunction]
fn recall_at_k(groups: Vec<(Vec<f64>, usize)>, k: usize) -> PyResult<f64> {
    let groups: Vec<metrics::RankedGroup> = groups
        .into_iter()
        .enumerate()
        .map(|(i, (scores, gold))| metrics::RankedGroup {
            group_id: i.to_string(),
            scores,
            gold,
        })
        .collect();
    metrics::recall_at_k(&groups, k).map_err(err)
}

/// Corpus BLEU with one whitespace-tokenized reference per candidate.
#[pyfunction]
#[pyo3(signature = (candidates, references, max_n = 4))]
fn bleu<'py>(py: Python<'py>, candidates: Vec<String>, references: Vec<String>, max_n: usize) -> PyResult<Bound<'py, PyDict>> {
    let split = |v: &[String]| v.iter().map(|s| translate::split_words(s)).collect::<Vec<_>>();
    let s = metrics::bleu(&split(&candidates), &split(&references), max_n).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("score", s.score)?;
    d.set_item("precisions", s.precisions)?;
    d.set_item("brevity_penalty", s.brevity_penalty)?;
    Ok(d)
}

/// Mean silhouette with noise (`None`) excluded.
#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<Option<usize>>) -> PyResult<f64> {
    let m = matrix(points)?;
    if labels.len() != m.rows {
        return Err(PyValueError::new_err(format!("{} labels for {} points", labels.len(), m.rows)));
    }
    cluster::silhouette(&m, &ClusterAssignment { labels }).map_err(err)
}

#[pyfunction]
fn dbscan(points: Vec<Vec<f64>>, eps: f64, min_pts: usize) -> PyResult<Vec<Option<usize>>> {
    let params = DbscanParams::new(eps, min_pts).map_err(err)?;
    Ok(cluster::dbscan(&matrix(points)?, params).labels)
}

/// Grid search over DBSCAN settings maximizing the silhouette. Without
/// `eps_grid`, a log-spaced grid over the pairwise-distance range is used.
#[pyfunction]
#[pyo3(signature = (points, eps_grid = None, min_pts_grid = vec![3, 5, 8, 12], min_clusters = 2, max_noise_fraction = 1.0))]
fn sweep_dbscan<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    eps_grid: Option<Vec<f64>>,
    min_pts_grid: Vec<usize>,
    min_clusters: usize,
    max_noise_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix(points)?;
    let grid = eps_grid.unwrap_or_else(|| cluster::default_eps_grid(&m, 16));
    let s = cluster::sweep_dbscan_capped(&m, &grid, &min_pts_grid, min_clusters, max_noise_fraction).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("eps", s.params.eps)?;
    d.set_item("min_pts", s.params.min_pts)?;
    d.set_item("silhouette", s.score)?;
    d.set_item("labels", s.assignment.labels)?;
    Ok(d)
}

/// Exact t-SNE to two dimensions.
#[pyfunction]
#[pyo3(signature = (points, perplexity = 30.0, iterations = 1000, seed = 0))]
fn tsne(points: Vec<Vec<f64>>, perplexity: f64, iterations: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let cfg = TsneConfig {
        perplexity,
        iterations,
        seed,
        ..TsneConfig::default()
    };
    Ok(rows(&cluster::tsne_embed(&matrix(points)?, &cfg).map_err(err)?.points))
}

/// Iterative back-translation. Returns the held-out BLEU trace, the pair
/// count after each iteration and the final aligner.
#[pyfunction]
#[pyo3(signature = (seed_pairs, monolingual, iterations = 2, seed = 0, reverse = false))]
fn backtranslate<'py>(
    py: Python<'py>,
    seed_pairs: Vec<(String, String)>,
    monolingual: Vec<String>,
    iterations: usize,
    seed: u64,
    reverse: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = LoopConfig {
        iterations,
        seed,
        reverse,
        ..LoopConfig::default()
    };
    let out = translate::backtranslate_loop(&pairs(seed_pairs)?, &monolingual, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("bleu", out.bleu_trace())?;
    d.set_item("pairs", out.iterations.iter().map(|i| i.pairs).collect::<Vec<_>>())?;
    let ll = out.iterations.last().map(|i| i.log_likelihood.clone()).unwrap_or_default();
    d.set_item(
        "aligner",
        Aligner {
            table: out.table,
            log_likelihood: ll,
        },
    )?;
    Ok(d)
}

#[pymodule]
fn discourse_particles(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", discourse_core::VERSION)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Aligner>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_test, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(backtranslate, m)?)?;
    Ok(())
}
