//! Reading and writing models, batches, tables and masks.

pub mod container;

pub use container::{Arch, Container, DType, NamedTensor, TensorData};

use crate::cnn::{cnn_forward, ChannelMask, CnnGraph, ConvLayer, PoolKind};
use crate::error::{ContainerError, Error, Result};
use crate::model::{
    forward, Block, CalibrationBatch, LayerNormParams, ModelGraph, Pooling, PruneMask, TapPoint,
};
use crate::tensor::{Tensor, DEFAULT_LN_EPS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TransformerDims {
    n_blocks: usize,
    d_model: usize,
    n_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ffn_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ffn_dims: Option<Vec<usize>>,
    n_classes: usize,
    #[serde(default)]
    pooling: Pooling,
    #[serde(default = "default_eps")]
    ln_eps: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_schedule: Option<Vec<usize>>,
}

fn default_eps() -> f32 {
    DEFAULT_LN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvDims {
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    pool: PoolKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CnnDims {
    in_channels: usize,
    n_classes: usize,
    layers: Vec<ConvDims>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BatchKind {
    Tokens,
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchDims {
    kind: BatchKind,
}

fn dims_of<T: DeserializeOwned>(c: &Container) -> Result<T> {
    serde_json::from_value(c.dims.clone())
        .map_err(|e| ContainerError::Header(format!("dims: {e}")).into())
}

fn f32_tensor(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = c.require(name)?;
    if t.shape != shape {
        return Err(ContainerError::BadTensor {
            name: name.into(),
            detail: format!("shape {:?}, expected {shape:?}", t.shape),
        }
        .into());
    }
    match &t.data {
        TensorData::F32(v) => Tensor::new(t.shape.clone(), v.clone()),
        TensorData::I32(_) => Err(ContainerError::BadTensor {
            name: name.into(),
            detail: "expected f32".into(),
        }
        .into()),
    }
}

fn optional_rows(c: &Container, name: &str, d: usize) -> Result<Option<Tensor>> {
    match c.get(name) {
        None => Ok(None),
        Some(t) => {
            let rows = t.shape[0];
            f32_tensor(c, name, &[rows, d]).map(Some)
        }
    }
}

fn push(c: &mut Container, name: impl Into<String>, t: &Tensor) {
    c.push_f32(name, t.shape(), t.data().to_vec());
}

pub fn model_to_container(m: &ModelGraph) -> Result<Container> {
    m.validate()?;
    let ffn = m.ffn_dims();
    let uniform = ffn.iter().all(|&f| f == ffn[0]);
    let dims = TransformerDims {
        n_blocks: m.n_blocks(),
        d_model: m.d_model,
        n_heads: m.n_heads,
        ffn_dim: uniform.then_some(ffn[0]),
        ffn_dims: (!uniform).then_some(ffn),
        n_classes: m.n_classes(),
        pooling: m.pooling,
        ln_eps: m.ln_eps,
        token_schedule: m.token_schedule.clone(),
    };
    let mut c = Container::new(Arch::Transformer, serde_json::to_value(dims)?);
    for (i, b) in m.blocks.iter().enumerate() {
        for (name, t) in [
            ("wq", &b.wq),
            ("wk", &b.wk),
            ("wv", &b.wv),
            ("wo", &b.wo),
            ("w1", &b.w1),
            ("w2", &b.w2),
            ("ln1.gamma", &b.ln1.gamma),
            ("ln1.beta", &b.ln1.beta),
            ("ln2.gamma", &b.ln2.gamma),
            ("ln2.beta", &b.ln2.beta),
        ] {
            push(&mut c, format!("blocks.{i}.{name}"), t);
        }
    }
    push(&mut c, "classifier.weight", &m.classifier);
    if let Some(e) = &m.embedding {
        push(&mut c, "embedding.weight", e);
    }
    if let Some(p) = &m.positions {
        push(&mut c, "positions.weight", p);
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<ModelGraph> {
    if c.arch != Arch::Transformer {
        return Err(Error::Arch(format!(
            "expected a transformer container, got {:?}",
            c.arch
        )));
    }
    let dims: TransformerDims = dims_of(c)?;
    let d = dims.d_model;
    let ffn = match (&dims.ffn_dims, dims.ffn_dim) {
        (Some(v), _) => v.clone(),
        (None, Some(f)) => vec![f; dims.n_blocks],
        (None, None) => {
            return Err(ContainerError::Header("dims need ffn_dim or ffn_dims".into()).into())
        }
    };
    if ffn.len() != dims.n_blocks {
        return Err(ContainerError::Header(format!(
            "{} ffn dims for {} blocks",
            ffn.len(),
            dims.n_blocks
        ))
        .into());
    }
    let mut blocks = Vec::with_capacity(dims.n_blocks);
    for (i, &f) in ffn.iter().enumerate() {
        let t = |name: &str, shape: &[usize]| f32_tensor(c, &format!("blocks.{i}.{name}"), shape);
        blocks.push(Block {
            wq: t("wq", &[d, d])?,
            wk: t("wk", &[d, d])?,
            wv: t("wv", &[d, d])?,
            wo: t("wo", &[d, d])?,
            w1: t("w1", &[d, f])?,
            w2: t("w2", &[f, d])?,
            ln1: LayerNormParams {
                gamma: t("ln1.gamma", &[d])?,
                beta: t("ln1.beta", &[d])?,
            },
            ln2: LayerNormParams {
                gamma: t("ln2.gamma", &[d])?,
                beta: t("ln2.beta", &[d])?,
            },
        });
    }
    let model = ModelGraph {
        d_model: d,
        n_heads: dims.n_heads,
        blocks,
        classifier: f32_tensor(c, "classifier.weight", &[d, dims.n_classes])?,
        embedding: optional_rows(c, "embedding.weight", d)?,
        positions: optional_rows(c, "positions.weight", d)?,
        pooling: dims.pooling,
        ln_eps: dims.ln_eps,
        token_schedule: dims.token_schedule,
    };
    model.validate()?;
    Ok(model)
}

pub fn cnn_to_container(g: &CnnGraph) -> Result<Container> {
    g.validate()?;
    let dims = CnnDims {
        in_channels: g.in_channels,
        n_classes: g.n_classes(),
        layers: g
            .layers
            .iter()
            .map(|l| ConvDims {
                out_channels: l.out_channels(),
                kernel: l.kernel(),
                stride: l.stride,
                pad: l.pad,
                pool: l.pool,
            })
            .collect(),
    };
    let mut c = Container::new(Arch::Cnn, serde_json::to_value(dims)?);
    for (i, l) in g.layers.iter().enumerate() {
        push(&mut c, format!("conv.{i}.weight"), &l.weight);
        c.push_f32(format!("conv.{i}.scale"), &[l.scale.len()], l.scale.clone());
        c.push_f32(format!("conv.{i}.shift"), &[l.shift.len()], l.shift.clone());
    }
    push(&mut c, "classifier.weight", &g.classifier);
    Ok(c)
}

pub fn cnn_from_container(c: &Container) -> Result<CnnGraph> {
    if c.arch != Arch::Cnn {
        return Err(Error::Arch(format!(
            "expected a cnn container, got {:?}",
            c.arch
        )));
    }
    let dims: CnnDims = dims_of(c)?;
    let mut layers = Vec::with_capacity(dims.layers.len());
    let mut c_in = dims.in_channels;
    for (i, l) in dims.layers.iter().enumerate() {
        let co = l.out_channels;
        layers.push(ConvLayer {
            weight: f32_tensor(
                c,
                &format!("conv.{i}.weight"),
                &[co, c_in, l.kernel, l.kernel],
            )?,
            scale: f32_tensor(c, &format!("conv.{i}.scale"), &[co])?.into_data(),
            shift: f32_tensor(c, &format!("conv.{i}.shift"), &[co])?.into_data(),
            stride: l.stride,
            pad: l.pad,
            pool: l.pool,
        });
        c_in = co;
    }
    let g = CnnGraph {
        in_channels: dims.in_channels,
        layers,
        classifier: f32_tensor(c, "classifier.weight", &[c_in, dims.n_classes])?,
    };
    g.validate()?;
    Ok(g)
}

/// Either model family a container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Transformer(ModelGraph),
    Cnn(CnnGraph),
}

impl LoadedModel {
    /// Logits of the unpruned model.
    pub fn logits(&self, batch: &CalibrationBatch) -> Result<Tensor> {
        match self {
            LoadedModel::Transformer(m) => {
                Ok(forward(m, batch, &PruneMask::full(m), TapPoint::Ffn)?.logits)
            }
            LoadedModel::Cnn(g) => match batch {
                CalibrationBatch::Features(t) => {
                    Ok(cnn_forward(g, t, &ChannelMask::full(g))?.logits)
                }
                _ => Err(Error::Arch("cnn needs an image batch".into())),
            },
        }
    }
}

pub fn load_container(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let c = Container::read(path)?;
    match c.arch {
        Arch::Transformer => Ok(LoadedModel::Transformer(model_from_container(&c)?)),
        Arch::Cnn => Ok(LoadedModel::Cnn(cnn_from_container(&c)?)),
        Arch::Batch => Err(Error::Arch("container holds a batch, not a model".into())),
    }
}

pub fn save_model(path: impl AsRef<Path>, m: &ModelGraph) -> Result<()> {
    model_to_container(m)?.write(path)
}

pub fn save_cnn(path: impl AsRef<Path>, g: &CnnGraph) -> Result<()> {
    cnn_to_container(g)?.write(path)
}

/// A calibration or evaluation batch with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub batch: CalibrationBatch,
    pub labels: Option<Vec<i32>>,
}

pub fn batch_to_container(b: &LabeledBatch) -> Result<Container> {
    let (kind, mut c);
    match &b.batch {
        CalibrationBatch::Tokens {
            ids,
            batch,
            seq_len,
        } => {
            kind = BatchKind::Tokens;
            c = Container::new(Arch::Batch, serde_json::to_value(BatchDims { kind })?);
            c.push_i32("tokens", &[*batch, *seq_len], ids.clone());
        }
        CalibrationBatch::Features(t) => {
            kind = BatchKind::Features;
            c = Container::new(Arch::Batch, serde_json::to_value(BatchDims { kind })?);
            push(&mut c, "features", t);
        }
    }
    if let Some(labels) = &b.labels {
        if labels.len() != b.batch.batch_size() {
            return Err(Error::Shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                b.batch.batch_size()
            )));
        }
        c.push_i32("labels", &[labels.len()], labels.clone());
    }
    Ok(c)
}

pub fn batch_from_container(c: &Container) -> Result<LabeledBatch> {
    if c.arch != Arch::Batch {
        return Err(Error::Arch(format!(
            "expected a batch container, got {:?}",
            c.arch
        )));
    }
    let dims: BatchDims = dims_of(c)?;
    let bad = |name: &str, detail: &str| -> Error {
        ContainerError::BadTensor {
            name: name.into(),
            detail: detail.into(),
        }
        .into()
    };
    let batch = match dims.kind {
        BatchKind::Tokens => {
            let t = c.require("tokens")?;
            match (&t.data, t.shape.as_slice()) {
                (TensorData::I32(ids), &[b, s]) => CalibrationBatch::tokens(ids.clone(), b, s)?,
                _ => return Err(bad("tokens", "expected i32 [B, T]")),
            }
        }
        BatchKind::Features => {
            let t = c.require("features")?;
            match &t.data {
                TensorData::F32(v) if t.shape.len() >= 2 => {
                    CalibrationBatch::Features(Tensor::new(t.shape.clone(), v.clone())?)
                }
                _ => return Err(bad("features", "expected f32 [B, ...]")),
            }
        }
    };
    let labels = match c.get("labels") {
        None => None,
        Some(t) => match &t.data {
            TensorData::I32(v) if t.shape == [batch.batch_size()] => Some(v.clone()),
            _ => return Err(bad("labels", "expected i32 [B]")),
        },
    };
    Ok(LabeledBatch { batch, labels })
}

pub fn save_batch(path: impl AsRef<Path>, b: &LabeledBatch) -> Result<()> {
    batch_to_container(b)?.write(path)
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<LabeledBatch> {
    batch_from_container(&Container::read(path)?)
}

/// Bakes `mask` into new weights. Removed neurons are dropped from `W1`/`W2`
/// (one zero neuron stays if a block loses all of them); removed heads keep
/// their slots with zeroed `Wq`/`Wk`/`Wv` columns and `Wo` rows. Token
/// counts become the model's default schedule.
pub fn bake_mask(m: &ModelGraph, mask: &PruneMask) -> Result<ModelGraph> {
    mask.check(m)?;
    let d = m.d_model;
    let dh = m.head_dim();
    let mut out = m.clone();
    for (b, bm) in out.blocks.iter_mut().zip(&mask.blocks) {
        for h in (0..m.n_heads).filter(|&h| !bm.heads[h]) {
            for w in [&mut b.wq, &mut b.wk, &mut b.wv] {
                for row in w.data_mut().chunks_mut(d) {
                    row[h * dh..(h + 1) * dh].fill(0.0);
                }
            }
            b.wo.data_mut()[h * dh * d..(h + 1) * dh * d].fill(0.0);
        }
        let kept = bm.kept_neurons();
        let f = b.ffn_dim();
        if kept.len() == f {
            continue;
        }
        let (w1, w2) = if kept.is_empty() {
            (Tensor::zeros(&[d, 1]), Tensor::zeros(&[1, d]))
        } else {
            let w1: Vec<f32> = (0..d)
                .flat_map(|r| kept.iter().map(move |&j| (r, j)))
                .map(|(r, j)| b.w1.data()[r * f + j])
                .collect();
            let w2: Vec<f32> = kept
                .iter()
                .flat_map(|&j| b.w2.data()[j * d..(j + 1) * d].iter().copied())
                .collect();
            (
                Tensor::new(vec![d, kept.len()], w1)?,
                Tensor::new(vec![kept.len(), d], w2)?,
            )
        };
        b.w1 = w1;
        b.w2 = w2;
    }
    out.token_schedule = mask.token_counts.clone();
    out.validate()?;
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Logits recorded alongside an exported model for cross-checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Hex SHA-256 of the batch container file.
    pub batch_hash: String,
    /// `[B][n_classes]`.
    pub logits: Vec<Vec<f32>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn make_reference(model: &LoadedModel, batch_bytes: &[u8]) -> Result<Reference> {
    let batch = batch_from_container(&Container::from_bytes(batch_bytes)?)?;
    let logits = model.logits(&batch.batch)?;
    let c = logits.shape()[1];
    Ok(Reference {
        batch_hash: sha256_hex(batch_bytes),
        logits: logits.data().chunks(c).map(<[f32]>::to_vec).collect(),
    })
}

/// Max-abs logit difference against `reference`, after checking that the
/// batch file is the one it was recorded on.
pub fn verify_reference(
    model: &LoadedModel,
    batch_bytes: &[u8],
    reference: &Reference,
) -> Result<f32> {
    let hash = sha256_hex(batch_bytes);
    if hash != reference.batch_hash.to_ascii_lowercase() {
        return Err(Error::ReferenceMismatch(format!(
            "batch hash {hash} does not match reference {}",
            reference.batch_hash
        )));
    }
    let ours = make_reference(model, batch_bytes)?;
    if ours.logits.len() != reference.logits.len()
        || ours
            .logits
            .iter()
            .zip(&reference.logits)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Shape("reference logits shape differs".into()));
    }
    Ok(ours
        .logits
        .iter()
        .flatten()
        .zip(reference.logits.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max))
}
