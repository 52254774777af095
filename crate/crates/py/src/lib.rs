//! Python bindings: concept extraction, retrieval, relevancy scoring,
//! k-means, the contrastive objectives, synthetic corpora and the curation
//! pipeline.

use std::path::PathBuf;
use std::sync::Arc;

use concept_curation::config::Paths;
use concept_curation::objective::{self, ContrastiveBatch};
use concept_curation::pipeline::{self, AblationMode, CurationInputs};
use concept_curation::synth::{self, SynthSpec};
use concept_curation::{ranking, sampling, ConceptLexicon, EmbeddingKind, EmbeddingMatrix, Error, PipelineConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyRuntimeError::new_err(e.to_string()),
        _ if matches!(e, Error::Io { .. }) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for concept_curation::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyfunction]
fn extract_concepts(caption: &str, lexicon: Vec<String>) -> PyResult<Vec<String>> {
    let lex = ConceptLexicon::new(lexicon).py()?;
    Ok(concept_curation::extract_concepts(caption, &lex))
}

#[pyfunction]
fn cosine(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    concept_curation::cosine(&u, &v).py()
}

#[pyfunction]
fn prompt(concept: &str) -> PyResult<String> {
    ranking::prompt(concept).py()
}

#[pyfunction]
fn score_debiased(anchor_sim: f64, support_sims: Vec<f64>) -> f64 {
    ranking::score_debiased(anchor_sim, &support_sims)
}

#[pyfunction]
fn score_total(s_a: f64, s_b: f64) -> f64 {
    ranking::score_total(s_a, s_b)
}

/// Exact cosine index over unit-normalized rows.
#[pyclass(frozen)]
struct VectorIndex {
    inner: concept_curation::VectorIndex,
}

#[pymethods]
impl VectorIndex {
    #[new]
    fn new(rows: Vec<Vec<f32>>, ids: Vec<String>) -> PyResult<Self> {
        let matrix = EmbeddingMatrix::from_vecs(EmbeddingKind::Image, &rows).py()?;
        let inner = concept_curation::VectorIndex::new(Arc::new(matrix), ids).py()?;
        Ok(VectorIndex { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(id, row, sim)` for the `n` best rows, best first.
    #[pyo3(signature = (query, n, exclude=None))]
    fn top_n(&self, query: Vec<f32>, n: usize, exclude: Option<&str>) -> PyResult<Vec<(String, usize, f64)>> {
        let hits = self.inner.top_n(&query, n, exclude).py()?;
        Ok(hits.into_iter().map(|h| (h.id, h.row, h.sim)).collect())
    }
}

#[pyclass(frozen, get_all)]
struct Clustering {
    k: usize,
    assignment: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    inertia_history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

#[pyfunction]
#[pyo3(signature = (points, k, seed=0, max_iter=sampling::DEFAULT_MAX_ITER))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iter: usize) -> PyResult<Clustering> {
    let c = sampling::kmeans(&points, k, seed, max_iter).py()?;
    Ok(Clustering {
        k: c.k,
        assignment: c.assignment,
        centroids: c.centroids,
        inertia: c.inertia,
        inertia_history: c.inertia_history,
        iterations: c.iterations,
        converged: c.converged,
    })
}

#[pyfunction]
#[pyo3(signature = (img, txt, tau=objective::DEFAULT_TAU))]
fn info_nce(img: Vec<Vec<f64>>, txt: Vec<Vec<f64>>, tau: f64) -> PyResult<(f64, f64)> {
    objective::info_nce(&img, &txt, tau).py()
}

#[pyfunction]
#[pyo3(signature = (img, labels, tau=objective::DEFAULT_TAU))]
fn multi_label_loss(img: Vec<Vec<f64>>, labels: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<(f64, f64)> {
    objective::multi_label_loss(&img, &labels, tau).py()
}

#[pyclass(frozen, get_all)]
struct LossReport {
    l_i2t: f64,
    l_t2i: f64,
    l_i2l: f64,
    l_l2i: f64,
    total: f64,
    grad_img: Vec<Vec<f64>>,
    grad_txt: Vec<Vec<f64>>,
    grad_labels: Vec<Vec<Vec<f64>>>,
    grad_tau: f64,
}

fn batch(img: Vec<Vec<f64>>, txt: Vec<Vec<f64>>, labels: Vec<Vec<Vec<f64>>>, tau: f64, normalize: bool) -> PyResult<ContrastiveBatch> {
    if normalize {
        ContrastiveBatch::normalized(img, txt, labels, tau).py()
    } else {
        ContrastiveBatch::new(img, txt, labels, tau).py()
    }
}

/// All four objective terms, their sum and the analytic gradients.
#[pyfunction]
#[pyo3(signature = (img, txt, labels, tau=objective::DEFAULT_TAU, normalize=true))]
fn total_loss(
    img: Vec<Vec<f64>>,
    txt: Vec<Vec<f64>>,
    labels: Vec<Vec<Vec<f64>>>,
    tau: f64,
    normalize: bool,
) -> PyResult<LossReport> {
    let r = objective::loss_with_grads(&batch(img, txt, labels, tau, normalize)?).py()?;
    let g = r.grads.expect("gradients requested");
    Ok(LossReport {
        l_i2t: r.l_i2t,
        l_t2i: r.l_t2i,
        l_i2l: r.l_i2l,
        l_l2i: r.l_l2i,
        total: r.total,
        grad_img: g.img,
        grad_txt: g.txt,
        grad_labels: g.labels,
        grad_tau: g.tau,
    })
}

/// `(max_relative_error, worst_coordinate)` of analytic against numeric gradients.
#[pyfunction]
#[pyo3(signature = (img, txt, labels, tau=objective::DEFAULT_TAU, eps=objective::DEFAULT_GRAD_EPS, normalize=true))]
fn grad_check(
    img: Vec<Vec<f64>>,
    txt: Vec<Vec<f64>>,
    labels: Vec<Vec<Vec<f64>>>,
    tau: f64,
    eps: f64,
    normalize: bool,
) -> PyResult<(f64, String)> {
    let c = objective::grad_check(&batch(img, txt, labels, tau, normalize)?, eps).py()?;
    Ok((c.max_rel_error, c.worst))
}

/// Writes a synthetic corpus (pairs, embeddings, lexicon, truth) into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, vocab_size=50, dim=64, n_pairs=2000, k_min=2, k_max=5, keep_prob=0.5, noise_sigma=0.05, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth_corpus(
    out_dir: PathBuf,
    vocab_size: usize,
    dim: usize,
    n_pairs: usize,
    k_min: usize,
    k_max: usize,
    keep_prob: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<()> {
    let spec = SynthSpec {
        vocab_size,
        dim,
        n_pairs,
        k_min,
        k_max,
        caption_keep_prob: keep_prob,
        noise_sigma,
        seed,
    };
    synth::synth_corpus(&spec).py()?.write_dir(out_dir).py()
}

/// Pipeline settings. Build from keywords, a TOML file or a synth directory.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (input_dir=None, output=None, expansion="vision", ranking="full", sampling="cluster", n_retrieve=16, labels=3, seed=0, threads=1, deterministic=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        input_dir: Option<PathBuf>,
        output: Option<PathBuf>,
        expansion: &str,
        ranking: &str,
        sampling: &str,
        n_retrieve: usize,
        labels: usize,
        seed: u64,
        threads: usize,
        deterministic: bool,
    ) -> PyResult<Self> {
        let mut c = PipelineConfig::default();
        if let Some(dir) = input_dir {
            c.paths = Paths::synth_layout(&dir);
        }
        c.paths.output = output;
        c.expansion.mode = expansion.parse().py()?;
        c.ranking.mode = ranking.parse().py()?;
        c.sampling.mode = sampling.parse().py()?;
        c.expansion.n_retrieve = n_retrieve;
        c.sampling.labels = labels;
        c.seed = seed;
        c.threads = threads;
        c.sampling.deterministic = deterministic;
        c.validate().py()?;
        Ok(Config { inner: c })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config {
            inner: PipelineConfig::load(path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner)
    }
}

/// Runs the pipeline and writes the configured output file.
#[pyfunction]
fn curate<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyDict>> {
    let summary = py.detach(|| pipeline::curate(&config.inner)).py()?;
    let d = PyDict::new(py);
    d.set_item("records", summary.records)?;
    d.set_item("clamped", summary.clamped)?;
    d.set_item("mean_archive_size", summary.mean_archive_size)?;
    Ok(d)
}

/// Five-mode ablation on a synth directory; one dict per mode.
#[pyfunction]
#[pyo3(signature = (input_dir, n_retrieve=16, labels=3, seed=0, threads=1))]
fn ablate<'py>(
    py: Python<'py>,
    input_dir: PathBuf,
    n_retrieve: usize,
    labels: usize,
    seed: u64,
    threads: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let table = py
        .detach(|| {
            let mut base = PipelineConfig {
                seed,
                threads,
                paths: Paths::synth_layout(&input_dir),
                ..PipelineConfig::default()
            };
            base.expansion.n_retrieve = n_retrieve;
            base.sampling.labels = labels;
            let truth = synth::load_truth(input_dir.join(synth::TRUTH_FILE))?;
            let mut load = base.clone();
            load.expansion.mode = concept_curation::ExpansionMode::Language;
            let inputs = CurationInputs::load(&load)?;
            pipeline::run_ablation(&inputs, &base, &AblationMode::ALL, &truth)
        })
        .py()?;
    table
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("mode", r.mode.name())?;
            d.set_item("missing_recall", r.missing_recall)?;
            d.set_item("false_rate", r.false_rate)?;
            d.set_item("group_coverage", r.group_coverage)?;
            d.set_item("archive_recall", r.archive_recall)?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "concept_curation")]
mod module {
    #[pymodule_export]
    use super::{
        ablate, cosine, curate, extract_concepts, grad_check, info_nce, kmeans, multi_label_loss, prompt,
        score_debiased, score_total, synth_corpus, total_loss, Clustering, Config, LossReport, VectorIndex,
    };
}
