//! Python bindings for sidkit.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sidkit_core as sk;
use sk::catalog::{self, ItemCatalog, ItemRecord, MultimodalEmbedding, SemanticId};
use sk::collision::{CollisionPolicy, PolicyKind};
use sk::quantizer::{self, QuantizerModel, RandomQuantizer, RqKmeansConfig};
use sk::retrieval::{self, BeamSchedule, SequenceScorer};
use sk::sidmetrics::{self, OccupancyVector};

/// `(item_id, embedding)` rows passed in from Python.
type Rows = Vec<(String, Vec<f64>)>;

fn err(e: sk::Error) -> PyErr {
    match e {
        sk::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "SidStructure", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PySidStructure(catalog::SidStructure);

#[pymethods]
impl PySidStructure {
    #[new]
    #[pyo3(signature = (levels, code_dim = catalog::DEFAULT_CODE_DIM))]
    fn new(levels: Vec<usize>, code_dim: usize) -> PyResult<Self> {
        catalog::SidStructure::new(levels, code_dim).map(Self).map_err(err)
    }

    #[getter]
    fn levels(&self) -> Vec<usize> {
        self.0.level_sizes().to_vec()
    }

    #[getter]
    fn code_dim(&self) -> usize {
        self.0.code_dim()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn encode(&self, codes: Vec<u32>) -> PyResult<Vec<usize>> {
        catalog::sid_to_flat_tokens(&SemanticId::new(codes), &self.0).map_err(err)
    }

    fn decode(&self, tokens: Vec<usize>) -> PyResult<Vec<u32>> {
        catalog::flat_tokens_to_sid(&tokens, &self.0)
            .map(|s| s.codes().to_vec())
            .map_err(err)
    }

    fn render(&self, codes: Vec<u32>) -> PyResult<String> {
        catalog::render_sid_string(&SemanticId::new(codes), &self.0).map_err(err)
    }

    fn parse(&self, text: &str) -> PyResult<Vec<u32>> {
        catalog::parse_sid_string(text, &self.0)
            .map(|s| s.codes().to_vec())
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("SidStructure({})", self.0)
    }
}

fn build_catalog(rows: Rows) -> PyResult<ItemCatalog> {
    let dim = rows
        .first()
        .map(|r| r.1.len())
        .ok_or_else(|| PyValueError::new_err("catalog is empty"))?;
    let mut c = ItemCatalog::new(dim);
    for (id, v) in rows {
        c.insert(ItemRecord::new(id, MultimodalEmbedding::new(v).map_err(err)?))
            .map_err(err)?;
    }
    Ok(c)
}

/// A trained (or random) quantizer that maps embeddings to SIDs.
#[pyclass(name = "Quantizer", frozen)]
struct PyQuantizer(QuantizerModel);

#[pymethods]
impl PyQuantizer {
    #[staticmethod]
    #[pyo3(signature = (embeddings, structure, seed, max_iters = 100))]
    fn rqkmeans(embeddings: Vec<Vec<f64>>, structure: &PySidStructure, seed: u64, max_iters: usize) -> PyResult<Self> {
        let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let trained = quantizer::train_rqkmeans(&refs, &structure.0, &RqKmeansConfig { max_iters, seed }).map_err(err)?;
        Ok(Self(QuantizerModel::RqKmeans(trained.codebooks)))
    }

    #[staticmethod]
    fn random(structure: &PySidStructure, seed: u64) -> Self {
        Self(QuantizerModel::Random(RandomQuantizer::new(structure.0.clone(), seed)))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        quantizer::load_model(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        quantizer::write_model(&self.0, &mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
    }

    #[getter]
    fn kind(&self) -> String {
        self.0.kind().to_string()
    }

    #[getter]
    fn structure(&self) -> PySidStructure {
        PySidStructure(self.0.structure().clone())
    }

    fn assign(&self, item_id: &str, embedding: Vec<f64>) -> PyResult<Vec<u32>> {
        self.0
            .assign(item_id, &embedding)
            .map(|s| s.codes().to_vec())
            .map_err(err)
    }

    fn reconstruct(&self, embedding: Vec<f64>) -> PyResult<Option<Vec<f64>>> {
        self.0.reconstruct(&embedding).transpose().map_err(err)
    }

    /// Assigns every `(item_id, embedding)` row and repairs collisions with
    /// the named policy (`noco`, `knn`, `random`, `merge`). Returns
    /// `(item_id, codes)` in input order.
    #[pyo3(signature = (rows, policy = "noco", sigma = sk::collision::DEFAULT_SIGMA, merge_threshold = 0))]
    fn assign_catalog(
        &self,
        py: Python<'_>,
        rows: Rows,
        policy: &str,
        sigma: u32,
        merge_threshold: usize,
    ) -> PyResult<Vec<(String, Vec<u32>)>> {
        let kind: PolicyKind = policy.parse().map_err(err)?;
        let catalog = build_catalog(rows)?;
        let p = CollisionPolicy {
            kind,
            sigma,
            merge_threshold,
            ..CollisionPolicy::default()
        };
        let table = py.detach(|| p.apply(&self.0, &catalog)).map_err(err)?;
        Ok(catalog
            .ids()
            .map(|id| (id.to_string(), table.get(id).expect("every item assigned").codes().to_vec()))
            .collect())
    }
}

/// Gini coefficient of SID occupancy. `total_slots` counts unoccupied SIDs
/// as zeros; by default only the given counts are used.
#[pyfunction]
#[pyo3(signature = (counts, total_slots = None))]
fn gini(counts: Vec<u64>, total_slots: Option<u128>) -> PyResult<f64> {
    let occ = match total_slots {
        Some(n) => {
            let nonzero: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
            OccupancyVector::new(nonzero, n).map_err(err)?
        }
        None => OccupancyVector::dense(counts),
    };
    sidmetrics::gini_coefficient(&occ).map_err(err)
}

/// Batch-mean InfoNCE over matched anchor/positive rows.
#[pyfunction]
#[pyo3(signature = (anchors, positives, temperature = sk::alignment::DEFAULT_TEMPERATURE))]
fn info_nce(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let batch = sk::alignment::AlignmentBatch::new(anchors, positives).map_err(err)?;
    sk::alignment::info_nce_loss(&batch, temperature).map_err(err)
}

/// Smoothed n-gram scorer over flat SID tokens.
#[pyclass(name = "MarkovScorer", frozen)]
struct PyMarkovScorer(retrieval::MarkovScorer);

fn flatten(structure: &catalog::SidStructure, sids: &[Vec<u32>]) -> PyResult<Vec<usize>> {
    let mut out = Vec::new();
    for codes in sids {
        out.extend(catalog::sid_to_flat_tokens(&SemanticId::new(codes.clone()), structure).map_err(err)?);
    }
    Ok(out)
}

#[pymethods]
impl PyMarkovScorer {
    /// Trains on sequences of SIDs (each SID a list of codes).
    #[staticmethod]
    #[pyo3(signature = (sequences, structure, order = retrieval::DEFAULT_ORDER, alpha = retrieval::DEFAULT_ALPHA))]
    fn train(sequences: Vec<Vec<Vec<u32>>>, structure: &PySidStructure, order: usize, alpha: f64) -> PyResult<Self> {
        let streams = sequences
            .iter()
            .map(|s| flatten(&structure.0, s))
            .collect::<PyResult<Vec<_>>>()?;
        retrieval::train_markov_scorer(&streams, order, alpha, &structure.0)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        retrieval::load_markov_scorer(path).map(Self).map_err(err)
    }

    /// Log-probabilities over the next level's codes given a history of SIDs
    /// and a partial SID.
    #[pyo3(signature = (history, partial = Vec::new()))]
    fn next_log_probs(&self, history: Vec<Vec<u32>>, partial: Vec<u32>) -> PyResult<Vec<f64>> {
        let s = self.0.structure();
        let mut ctx = flatten(s, &history)?;
        for (j, &c) in partial.iter().enumerate() {
            if j >= s.levels() || c as usize >= s.level_size(j) {
                return Err(PyValueError::new_err("partial SID out of range"));
            }
            ctx.push(s.offset(j) + c as usize);
        }
        self.0.next_token_log_probs(&ctx).map_err(err)
    }

    /// Top-`k` SIDs after the history, with per-level beam widths.
    fn beam_search(&self, py: Python<'_>, history: Vec<Vec<u32>>, widths: Vec<usize>, k: usize) -> PyResult<Vec<(Vec<u32>, f64)>> {
        let ctx = flatten(self.0.structure(), &history)?;
        let schedule = BeamSchedule::new(widths).map_err(err)?;
        let out = py
            .detach(|| retrieval::dynamic_beam_search(&self.0, &ctx, &schedule, k, None))
            .map_err(err)?;
        Ok(out.into_iter().map(|(s, lp)| (s.codes().to_vec(), lp)).collect())
    }
}

#[pymodule]
fn sidkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySidStructure>()?;
    m.add_class::<PyQuantizer>()?;
    m.add_class::<PyMarkovScorer>()?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    Ok(())
}
