//! Python bindings: tagging schemes, CRF inference, training, prediction
//! and active-learning scores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use avtag::active::{q_lc, q_tf, FlipRecord};
use avtag::corpus::{generate_synthetic, load_corpus, tokenize as split_tokens, ProductProfile, SplitSide, SynthSpec};
use avtag::crf::CrfParams;
use avtag::model::{self, ModelConfig};
use avtag::tags::{SchemeKind, Span};
use avtag::tensor::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Tensor::matrix(n, cols, rows.into_iter().flatten().collect()).map_err(err)
}

fn crf(transitions: Vec<Vec<f64>>, emissions: &Tensor) -> PyResult<CrfParams> {
    CrfParams::new(emissions.cols(), matrix(transitions)?).map_err(err)
}

fn values(v: avtag::tags::ExtractionResult) -> BTreeMap<String, Vec<String>> {
    v.into_iter().map(|(k, set)| (k, set.into_iter().collect())).collect()
}

#[pyclass(name = "TagScheme", module = "pyavtag", from_py_object)]
#[derive(Clone)]
struct PyTagScheme {
    inner: avtag::tags::TagScheme,
}

#[pymethods]
impl PyTagScheme {
    #[new]
    fn new(kind: &str, attributes: Vec<String>) -> PyResult<Self> {
        let kind: SchemeKind = kind.parse().map_err(err)?;
        Ok(PyTagScheme {
            inner: avtag::tags::TagScheme::new(kind, attributes).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn attributes(&self) -> Vec<String> {
        self.inner.attributes.clone()
    }

    fn tag_names(&self) -> Vec<String> {
        self.inner.tag_names()
    }

    /// Tags for `n` tokens given `(attribute, start, end)` spans.
    fn encode(&self, n: usize, spans: Vec<(String, usize, usize)>) -> PyResult<Vec<String>> {
        let spans = spans
            .into_iter()
            .map(|(name, start, end)| {
                let attribute = self
                    .inner
                    .attribute_index(&name)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown attribute {name:?}")))?;
                Ok(Span { attribute, start, end })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let tags = self.inner.encode_spans(n, &spans).map_err(err)?;
        Ok(tags.into_iter().map(|t| self.inner.tag_name(t)).collect())
    }

    /// Attribute values spelled out by `tags` over `tokens`.
    fn decode(&self, tokens: Vec<String>, tags: Vec<String>) -> PyResult<BTreeMap<String, Vec<String>>> {
        if tokens.len() != tags.len() {
            return Err(PyValueError::new_err("tokens and tags differ in length"));
        }
        let tags = self
            .inner
            .parse_tags(&tags)
            .map_err(|i| PyValueError::new_err(format!("unknown tag at position {i}")))?;
        Ok(values(self.inner.decode_tags(&tokens, &tags)))
    }

    fn __repr__(&self) -> String {
        format!("TagScheme({:?}, {:?})", self.kind(), self.inner.attributes)
    }
}

#[pyclass(name = "Model", module = "pyavtag")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn scheme(&self) -> PyTagScheme {
        PyTagScheme {
            inner: self.inner.scheme.clone(),
        }
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    /// Extracted values per attribute.
    fn predict(&self, text: &str) -> PyResult<BTreeMap<String, Vec<String>>> {
        Ok(values(self.inner.predict_text(text).map_err(err)?.values))
    }

    /// One tag name per token of `text`.
    fn tags(&self, text: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.predict_text(text).map_err(err)?.tag_names)
    }

    /// `n x n` attention weights, or `None` for variants without attention.
    fn attention(&self, text: &str) -> PyResult<Option<Vec<Vec<f64>>>> {
        Ok(self.inner.predict_text(text).map_err(err)?.attention.map(|a| a.matrix))
    }

    /// Micro precision, recall and F1 over every record of a corpus file.
    fn evaluate(&self, corpus: PathBuf) -> PyResult<BTreeMap<String, f64>> {
        let records = load_corpus(&corpus).map_err(err)?;
        let data = records
            .iter()
            .map(|r| r.to_tagged(&self.inner.scheme))
            .collect::<avtag::Result<Vec<_>>>()
            .map_err(err)?;
        let m = self.inner.evaluate(&data).map_err(err)?.micro;
        Ok(BTreeMap::from([
            ("precision".to_string(), m.precision),
            ("recall".to_string(), m.recall),
            ("f1".to_string(), m.f1),
        ]))
    }

    /// Least-confidence score of a token sequence.
    fn least_confidence(&self, tokens: Vec<String>) -> PyResult<f64> {
        q_lc(&self.inner, &tokens).map_err(err)
    }
}

/// `(epoch, loss, f1)` per epoch.
type History = Vec<(usize, f64, Option<f64>)>;

/// Trains on the records of `corpus` and returns the model with one
/// `(epoch, loss, f1)` row per epoch. Records hinted as test are held out
/// for evaluation; `config` is a JSON object of model settings.
#[pyfunction]
#[pyo3(signature = (corpus, config=None))]
fn train(py: Python<'_>, corpus: PathBuf, config: Option<&str>) -> PyResult<(PyModel, History)> {
    let config: ModelConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => ModelConfig::default(),
    };
    let records = load_corpus(&corpus).map_err(err)?;
    let attributes: BTreeSet<String> = records.iter().flat_map(|p| p.annotations.keys().cloned()).collect();
    let scheme = avtag::tags::TagScheme::new(config.scheme, attributes.into_iter().collect()).map_err(err)?;
    let (test, train): (Vec<&ProductProfile>, Vec<&ProductProfile>) =
        records.iter().partition(|p| p.split == Some(SplitSide::Test));
    let tag = |side: Vec<&ProductProfile>| {
        side.into_iter()
            .map(|p| p.to_tagged(&scheme))
            .collect::<avtag::Result<Vec<_>>>()
            .map_err(err)
    };
    let (train_set, test_set) = (tag(train)?, tag(test)?);
    let (m, history) = py
        .detach(|| model::train(&train_set, &test_set, &config, &scheme))
        .map_err(err)?;
    let rows = history.records.iter().map(|r| (r.epoch, r.loss, r.f1)).collect();
    Ok((PyModel { inner: m }, rows))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    split_tokens(text)
}

/// Synthetic product-title corpus as JSON lines.
#[pyfunction]
#[pyo3(signature = (n_train=500, n_test=500, owa=0.2, seed=0))]
fn synth(n_train: usize, n_test: usize, owa: f64, seed: u64) -> PyResult<String> {
    let records = generate_synthetic(&SynthSpec::dog_food(n_train, n_test, owa), seed).map_err(err)?;
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r).map_err(err)?);
        out.push('\n');
    }
    Ok(out)
}

/// Log partition function of a CRF with `(K+2) x (K+2)` transitions
/// (start and stop last) over `n x K` emissions.
#[pyfunction]
fn crf_log_partition(transitions: Vec<Vec<f64>>, emissions: Vec<Vec<f64>>) -> PyResult<f64> {
    let e = matrix(emissions)?;
    crf(transitions, &e)?.log_partition(&e, &vec![true; e.rows()]).map_err(err)
}

/// Best path and its score.
#[pyfunction]
fn crf_viterbi(transitions: Vec<Vec<f64>>, emissions: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let e = matrix(emissions)?;
    crf(transitions, &e)?.viterbi(&e, &vec![true; e.rows()]).map_err(err)
}

/// Tag-flip score of successive prediction snapshots for one sample.
#[pyfunction]
#[pyo3(signature = (predictions, normalize=false))]
fn tag_flips(predictions: Vec<Vec<usize>>, normalize: bool) -> PyResult<f64> {
    q_tf(
        &FlipRecord {
            id: String::new(),
            predictions,
        },
        normalize,
    )
    .map_err(err)
}

#[pymodule]
fn pyavtag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTagScheme>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(crf_log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(crf_viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(tag_flips, m)?)?;
    Ok(())
}
