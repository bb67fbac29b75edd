//! Python bindings: load or generate models, score, search, prune.

use engine::config::RunConfig;
use engine::cost::{budget_from_ratio, CostModel};
use engine::importance::{kd_loss, score_all, token_importance, ImportanceTable, Task};
use engine::io::{self as eio, LabeledBatch, LoadedModel};
use engine::model::{forward, ModelGraph, PruneMask, TapPoint};
use engine::search::plan;
use engine::tensor::{gram_diff_sq, Tensor};
use engine::toy::{toy_feature_batch, toy_model, ToyConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::collections::HashMap;

fn err(e: engine::error::Error) -> PyErr {
    PyValueError::new_err(format!("[{}] {e}", e.code()))
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(
            "expected a non-empty rectangular matrix",
        ));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    t.data().chunks(t.last_dim()).map(<[f32]>::to_vec).collect()
}

/// Transformer encoder weights.
#[pyclass(frozen)]
struct Model(ModelGraph);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        match eio::load_container(path).map_err(err)? {
            LoadedModel::Transformer(m) => Ok(Self(m)),
            LoadedModel::Cnn(_) => Err(PyValueError::new_err("expected a transformer container")),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (blocks=3, d_model=16, heads=4, ffn=32, classes=5, seed=0))]
    fn toy(
        blocks: usize,
        d_model: usize,
        heads: usize,
        ffn: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ToyConfig {
            n_blocks: blocks,
            d_model,
            n_heads: heads,
            ffn_dim: ffn,
            n_classes: classes,
            ..ToyConfig::default()
        };
        toy_model(&cfg, seed).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        eio::save_model(path, &self.0).map_err(err)
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.0.n_blocks()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.0.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.0.n_heads
    }

    #[getter]
    fn ffn_dims(&self) -> Vec<usize> {
        self.0.ffn_dims()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.0.n_classes()
    }

    #[pyo3(signature = (batch, mask=None))]
    fn logits(&self, batch: &Batch, mask: Option<&Mask>) -> PyResult<Vec<Vec<f32>>> {
        let mask = mask.map_or_else(|| PruneMask::full(&self.0), |m| m.0.clone());
        let trace = forward(&self.0, &batch.0.batch, &mask, TapPoint::Ffn).map_err(err)?;
        Ok(rows(&trace.logits))
    }

    /// Per-sample FLOPs at `seq_len` tokens, under `mask` if given.
    #[pyo3(signature = (seq_len, mask=None))]
    fn flops(&self, seq_len: usize, mask: Option<&Mask>) -> PyResult<u64> {
        let cost = CostModel::new(&self.0, seq_len).map_err(err)?;
        match mask {
            Some(m) => cost.flops(&m.0).map_err(err),
            None => Ok(cost.baseline()),
        }
    }

    fn budget(&self, seq_len: usize, keep_ratio: f64) -> PyResult<u64> {
        let cost = CostModel::new(&self.0, seq_len).map_err(err)?;
        budget_from_ratio(&cost, keep_ratio).map_err(err)
    }

    /// New model with `mask` baked into the weights.
    fn prune(&self, mask: &Mask) -> PyResult<Self> {
        eio::bake_mask(&self.0, &mask.0).map(Self).map_err(err)
    }
}

/// Calibration batch with optional labels.
#[pyclass(frozen)]
struct Batch(LabeledBatch);

#[pymethods]
impl Batch {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        eio::load_batch(path).map(Self).map_err(err)
    }

    /// Standard-normal features `[samples, seq_len, d_model]`.
    #[staticmethod]
    #[pyo3(signature = (d_model, samples=32, seq_len=8, seed=1))]
    fn toy(d_model: usize, samples: usize, seq_len: usize, seed: u64) -> Self {
        Self(LabeledBatch {
            batch: toy_feature_batch(d_model, samples, seq_len, seed),
            labels: None,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        eio::save_batch(path, &self.0).map_err(err)
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.0.batch.batch_size()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.0.batch.seq_len()
    }
}

#[pyclass(frozen)]
struct Table(ImportanceTable);

#[pymethods]
impl Table {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let t: ImportanceTable =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        t.check().map_err(err)?;
        Ok(Self(t))
    }

    fn to_json(&self) -> PyResult<String> {
        eio::to_json_string(&self.0).map_err(err)
    }

    #[getter]
    fn head_scores(&self) -> Vec<Vec<f64>> {
        self.0.head_scores.clone()
    }

    #[getter]
    fn neuron_scores(&self) -> Vec<Vec<f64>> {
        self.0.neuron_scores.clone()
    }

    #[getter]
    fn token_scores(&self) -> Option<Vec<Vec<f64>>> {
        self.0.token_scores.clone()
    }
}

#[pyclass(frozen)]
struct Mask(PruneMask);

#[pymethods]
impl Mask {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(Self)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> PyResult<String> {
        eio::to_json_string(&self.0).map_err(err)
    }

    #[getter]
    fn kept_heads(&self) -> Vec<Vec<usize>> {
        self.0.blocks.iter().map(|b| b.kept_heads()).collect()
    }

    #[getter]
    fn kept_neurons(&self) -> Vec<Vec<usize>> {
        self.0.blocks.iter().map(|b| b.kept_neurons()).collect()
    }

    #[getter]
    fn token_counts(&self) -> Option<Vec<usize>> {
        self.0.token_counts.clone()
    }
}

/// Run settings from a task preset plus `options` (same keys as a config file).
fn run_config(task: &str, options: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::for_task(task.parse::<Task>().map_err(err)?);
    let mut options: Vec<_> = options.unwrap_or_default().into_iter().collect();
    options.sort();
    for (k, v) in options {
        cfg.set(&k, &v).map_err(err)?;
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Head and neuron importance, plus token scores when `tokens` is set.
#[pyfunction]
#[pyo3(signature = (model, batch, task="language", options=None, tokens=false))]
fn score(
    py: Python<'_>,
    model: &Model,
    batch: &Batch,
    task: &str,
    options: Option<HashMap<String, String>>,
    tokens: bool,
) -> PyResult<Table> {
    let cfg = run_config(task, options)?;
    py.detach(|| {
        let mut t = score_all(&model.0, &batch.0.batch, &cfg.score)?;
        if tokens || cfg.mode.uses_tokens() {
            t.token_scores = Some(token_importance(&model.0, &batch.0.batch, &cfg.score)?);
        }
        Ok(Table(t))
    })
    .map_err(err)
}

/// Mask fitting `keep_ratio` of the unpruned FLOPs. Returns
/// `(mask, achieved_flops, budget)`.
#[pyfunction]
#[pyo3(signature = (model, table, keep_ratio, mode="beta", token_share=0.5))]
fn search(
    model: &Model,
    table: &Table,
    keep_ratio: f64,
    mode: &str,
    token_share: f64,
) -> PyResult<(Mask, u64, u64)> {
    let cost = CostModel::new(&model.0, table.0.seq_len).map_err(err)?;
    let budget = budget_from_ratio(&cost, keep_ratio).map_err(err)?;
    let p = plan(
        &table.0,
        &cost,
        budget,
        mode.parse().map_err(err)?,
        token_share,
    )
    .map_err(err)?;
    Ok((Mask(p.mask), p.achieved_flops, budget))
}

/// `‖XXᵀ − YYᵀ‖²_F` for two equally shaped matrices.
#[pyfunction]
#[pyo3(name = "gram_diff_sq")]
fn py_gram_diff_sq(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>) -> PyResult<f64> {
    gram_diff_sq(&matrix(x)?, &matrix(y)?).map_err(err)
}

/// `T² · mean KL(softmax(base/T) ‖ softmax(masked/T))`.
#[pyfunction]
#[pyo3(name = "kd_loss", signature = (base, masked, temperature=4.0))]
fn py_kd_loss(base: Vec<Vec<f32>>, masked: Vec<Vec<f32>>, temperature: f64) -> PyResult<f64> {
    kd_loss(&matrix(base)?, &matrix(masked)?, temperature).map_err(err)
}

#[pymodule]
#[pyo3(name = "trajprune")]
fn trajprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Batch>()?;
    m.add_class::<Table>()?;
    m.add_class::<Mask>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(py_gram_diff_sq, m)?)?;
    m.add_function(wrap_pyfunction!(py_kd_loss, m)?)?;
    Ok(())
}
