//! Python bindings: dataset generation, training, evaluation, retrieval and
//! grounding over dataset directories and checkpoint files.

use std::path::Path;

use find_core::bench::{
    build_similarity_index, generate_corpus, parse_caption as parse, parse_query, read_corpus,
    serialize_caption, write_corpus, CorpusConfig, MockClient,
};
use find_core::interface::build_masks;
use find_core::tasks::{builtin_task, ground_masks, run_interleave_retrieval, Model};
use find_core::trainer::{evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use find_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn model_from(ckpt: &str) -> PyResult<Model> {
    let ck = load_checkpoint(Path::new(ckpt), None, false).map_err(py_err)?;
    Model::with_params(ck.config.model, ck.params).map_err(py_err)
}

/// Canonical form of an interleaved caption. Raises `ValueError` naming the
/// character offset of the first problem.
#[pyfunction]
fn parse_caption(text: &str) -> PyResult<String> {
    let c = parse(text).map_err(|e| py_err(e.into()))?;
    serialize_caption(&c).map_err(py_err)
}

type Grid = Vec<Vec<bool>>;

/// Stream order with content and condition masks of a built-in task.
#[pyfunction]
fn attention_masks(task: &str) -> PyResult<(Vec<String>, Grid, Grid)> {
    let spec = builtin_task(task).map_err(py_err)?;
    let (content, condition) = build_masks(&spec).map_err(py_err)?;
    Ok((
        content.order.clone(),
        content.to_vecs(),
        condition.to_vecs(),
    ))
}

/// Writes a mock-annotated dataset directory; returns (images, captions, entities).
#[pyfunction]
#[pyo3(signature = (out, scenes, seed = 0))]
fn generate(out: &str, scenes: usize, seed: u64) -> PyResult<(usize, usize, usize)> {
    let cfg = CorpusConfig {
        scenes,
        seed,
        ..Default::default()
    };
    let model = Model::new(TrainConfig::default().model, seed).map_err(py_err)?;
    let corpus =
        generate_corpus(&cfg, &MockClient, &model.encoders, &model.params).map_err(py_err)?;
    let index =
        build_similarity_index(&corpus.scenes, &model.encoders, &model.params).map_err(py_err)?;
    write_corpus(Path::new(out), &corpus, &index).map_err(py_err)?;
    let s = corpus.stats();
    Ok((s.images, s.captions, s.entities))
}

/// Trains on a dataset directory and saves a checkpoint; returns the
/// per-step losses.
#[pyfunction]
#[pyo3(signature = (data, ckpt, steps, seed = 0))]
fn train(py: Python<'_>, data: &str, ckpt: &str, steps: usize, seed: u64) -> PyResult<Vec<f64>> {
    let corpus = read_corpus(Path::new(data)).map_err(py_err)?;
    py.detach(|| {
        let mut trainer = Trainer::new(TrainConfig {
            steps,
            seed,
            ..Default::default()
        })?;
        let reports = trainer.run(&corpus, &mut std::io::sink())?;
        save_checkpoint(Path::new(ckpt), &trainer.checkpoint())?;
        Ok(reports.iter().map(|r| r.loss).collect())
    })
    .map_err(py_err)
}

/// Flat metric name to value mapping.
#[pyfunction]
fn evaluate_checkpoint(ckpt: &str, data: &str) -> PyResult<Vec<(String, f64)>> {
    let model = model_from(ckpt)?;
    let corpus = read_corpus(Path::new(data)).map_err(py_err)?;
    Ok(evaluate(&model, &corpus).map_err(py_err)?.flatten())
}

/// Scene ids with scores, best first.
#[pyfunction]
fn retrieve(ckpt: &str, data: &str, query: &str) -> PyResult<Vec<(u64, f64)>> {
    let model = model_from(ckpt)?;
    let corpus = read_corpus(Path::new(data)).map_err(py_err)?;
    let entry = parse_query(query).map_err(|e| py_err(e.into()))?;
    let mut ranked = run_interleave_retrieval(&model, &corpus.scenes, &[entry], &corpus.scenes)
        .map_err(py_err)?;
    Ok(ranked.remove(0))
}

/// One boolean mask per entity of the query.
#[pyfunction]
fn ground(ckpt: &str, data: &str, scene: u64, query: &str) -> PyResult<Vec<Grid>> {
    let model = model_from(ckpt)?;
    let corpus = read_corpus(Path::new(data)).map_err(py_err)?;
    let entry = parse_query(query).map_err(|e| py_err(e.into()))?;
    let s = corpus
        .scene(scene)
        .ok_or_else(|| PyValueError::new_err(format!("dataset has no scene {scene}")))?;
    let masks = ground_masks(&model, s, &entry, &corpus.scenes).map_err(py_err)?;
    Ok(masks
        .iter()
        .map(|m| {
            (0..m.rows())
                .map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect())
                .collect()
        })
        .collect())
}

#[pymodule]
fn pyfind(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(parse_caption, m)?)?;
    m.add_function(wrap_pyfunction!(attention_masks, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(ground, m)?)?;
    Ok(())
}
