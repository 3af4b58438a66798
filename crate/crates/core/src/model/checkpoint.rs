//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, counters, hypergraphs, tensor names and shapes), then
//! every parameter followed by every momentum buffer as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    run: serde_json::Value,
    iteration: u64,
    epoch: usize,
    seed: u64,
    outphase: Hypergraph,
    pending: Option<Hypergraph>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(state: &ModelState, run_config: &serde_json::Value, path: &Path) -> Result<()> {
    let header = Header {
        model: state.config.clone(),
        run: run_config.clone(),
        iteration: state.iteration,
        epoch: state.epoch,
        seed: state.seed,
        outphase: state.outphase.clone(),
        pending: state.pending.clone(),
        tensors: state
            .params
            .names()
            .iter()
            .zip(state.params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let numel = state.params.numel();
    let mut out = Vec::with_capacity(20 + json.len() + 16 * numel);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in state.params.tensors().iter().chain(&state.velocity) {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn checked(g: Hypergraph, nodes: usize) -> Result<Hypergraph> {
    if g.nodes() != nodes {
        return Err(Error::Checkpoint(format!(
            "hypergraph has {} nodes, model has {nodes}",
            g.nodes()
        )));
    }
    Hypergraph::new(
        g.nodes(),
        g.edges(),
        g.incidence_matrix().to_vec(),
        g.weights().to_vec(),
    )
    .map_err(|e| Error::Checkpoint(format!("stored hypergraph invalid: {e}")))
}

/// Restores a model and the run configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + header_len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;

    let mut state = ModelState::new(header.model, header.seed)?;
    let expected: Vec<(&str, &[usize])> = state
        .params
        .names()
        .iter()
        .map(String::as_str)
        .zip(state.params.tensors().iter().map(Tensor::shape))
        .collect();
    let stored: Vec<(&str, &[usize])> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    if expected != stored {
        return Err(corrupt(
            "parameter names or shapes do not match the stored model config",
        ));
    }
    let blob = &bytes[20 + header_len..];
    if blob.len() != 16 * state.params.numel() {
        return Err(corrupt("tensor data length mismatch"));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in state.params.tensors_mut().iter_mut().chain(state.velocity.iter_mut()) {
        for x in t.data_mut() {
            *x = values.next().expect("length checked");
        }
    }
    let v = state.config.joints();
    state.outphase = checked(header.outphase, v)?;
    state.pending = header.pending.map(|g| checked(g, v)).transpose()?;
    state.iteration = header.iteration;
    state.epoch = header.epoch;
    Ok((state, header.run))
}
