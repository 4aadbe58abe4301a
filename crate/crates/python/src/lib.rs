//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists built from their JSON form.

use std::collections::BTreeSet;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use kgetool::dataset::{hop_histogram as hops, load_dataset as load_samples, ToolCall};
use kgetool::evaluator;
use kgetool::kg::{self, RelationPath, Triple};
use kgetool::llm::ChatResponse;
use kgetool::path_extractor::{self, ExtractionConfig, Strategy};
use kgetool::search_parser;
use kgetool::similarity::LexicalSimilarity;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = PyModule::import(obj.py(), "json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn triples(links: Vec<(String, String, String)>) -> PyResult<BTreeSet<Triple>> {
    links
        .into_iter()
        .map(|(h, r, t)| Triple::new(h, r, t).map_err(value_err))
        .collect()
}

/// An immutable set of (head, relation, tail) triples.
#[pyclass(name = "KnowledgeGraph", frozen)]
struct PyKnowledgeGraph {
    inner: kg::KnowledgeGraph,
}

#[pymethods]
impl PyKnowledgeGraph {
    #[new]
    fn new(triples: Vec<(String, String, String)>) -> PyResult<Self> {
        let parsed = self::triples(triples)?;
        Ok(Self {
            inner: kg::KnowledgeGraph::from_triples(parsed),
        })
    }

    /// Parses any of the accepted KG file layouts.
    #[staticmethod]
    fn from_json(source: &str) -> PyResult<Self> {
        Ok(Self {
            inner: kg::KnowledgeGraph::load(source).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.triples().len()
    }

    fn triples(&self) -> Vec<(String, String, String)> {
        self.inner
            .triples()
            .iter()
            .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
            .collect()
    }

    fn relations(&self) -> Vec<String> {
        self.inner.relation_vocab().iter().cloned().collect()
    }

    fn out_edges(&self, entity: &str) -> Vec<(String, String, String)> {
        self.inner
            .out_edges(entity)
            .iter()
            .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
            .collect()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats())
    }

    fn ground_exact<'py>(&self, py: Python<'py>, start: &str, relations: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let path = RelationPath::new(start, relations).map_err(value_err)?;
        to_py(py, &self.inner.ground_exact(&path))
    }
}

/// Every well-formed `KG.search(...)` in `text` as `(start, [relations])`.
#[pyfunction]
fn parse_kg_search(text: &str) -> PyResult<Vec<(String, Vec<String>)>> {
    let parsed = search_parser::parse_kg_search(text).map_err(value_err)?;
    Ok(parsed
        .searches
        .into_iter()
        .map(|p| (p.start, p.relations))
        .collect())
}

/// Grounds one relation path with the named strategy; relation retrieval
/// ranks candidates lexically.
#[pyfunction]
#[pyo3(signature = (kg, start, relations, strategy="greedy_search", k=3, max_candidates=4096))]
fn extract<'py>(
    py: Python<'py>,
    kg: &PyKnowledgeGraph,
    start: &str,
    relations: Vec<String>,
    strategy: &str,
    k: usize,
    max_candidates: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let strategy: Strategy = serde_json::from_value(serde_json::json!(strategy)).map_err(value_err)?;
    let path = RelationPath::new(start, relations).map_err(value_err)?;
    let config = ExtractionConfig {
        strategy,
        k,
        max_candidates,
    };
    let sim = LexicalSimilarity::default();
    let result = path_extractor::extract(&kg.inner, &path, &config, Some(&sim)).map_err(value_err)?;
    to_py(py, &result)
}

/// Link-level metrics of `extracted` against `gold`.
#[pyfunction]
#[pyo3(signature = (kg, gold, extracted, terminals=None))]
fn grade_extraction<'py>(
    py: Python<'py>,
    kg: &PyKnowledgeGraph,
    gold: Vec<(String, String, String)>,
    extracted: Vec<(String, String, String)>,
    terminals: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let gold = triples(gold)?;
    let extracted = triples(extracted)?;
    let terminals: BTreeSet<String> = match terminals {
        Some(t) => t.into_iter().collect(),
        None => gold.iter().map(|t| t.tail.clone()).collect(),
    };
    let m = evaluator::grade_extraction(&gold, &extracted, None, &kg.inner, &terminals);
    to_py(py, &m)
}

/// The first tool call found in a model reply, or None.
#[pyfunction]
fn extract_tool_call<'py>(py: Python<'py>, text: &str) -> PyResult<Option<Bound<'py, PyAny>>> {
    evaluator::extract_tool_call(&ChatResponse::text(text))
        .map(|c| to_py(py, &c))
        .transpose()
}

/// Metrics for a predicted call (dict or None) against the gold call.
#[pyfunction]
fn grade_tool_use<'py>(
    py: Python<'py>,
    predicted: Option<Bound<'py, PyAny>>,
    gold: Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let gold: ToolCall = from_py(&gold)?;
    let predicted: Option<ToolCall> = predicted.map(|p| from_py(&p)).transpose()?;
    to_py(py, &evaluator::grade_tool_use(predicted.as_ref(), &gold))
}

/// Normalized samples from a raw or normalized dataset file.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, source: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &load_samples(source).map_err(value_err)?)
}

/// Number of samples per hop count.
#[pyfunction]
fn hop_histogram(source: &str) -> PyResult<std::collections::BTreeMap<usize, usize>> {
    Ok(hops(&load_samples(source).map_err(value_err)?))
}

#[pymodule]
fn pykgetool(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKnowledgeGraph>()?;
    m.add_function(wrap_pyfunction!(parse_kg_search, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(grade_extraction, m)?)?;
    m.add_function(wrap_pyfunction!(extract_tool_call, m)?)?;
    m.add_function(wrap_pyfunction!(grade_tool_use, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(hop_histogram, m)?)?;
    Ok(())
}
