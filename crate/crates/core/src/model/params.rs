use super::{ModelConfig, ModelError};
use crate::autodiff::{Matrix, ParamId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
    buffer_names: Vec<String>,
    buffers: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Weight matrix with entries uniform in ±sqrt(6/(fan_in+fan_out)).
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Matrix::new(rows, cols, data).expect("sized"))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn buffer(&self, id: usize) -> &[f64] {
        &self.buffers[id]
    }

    pub fn buffer_mut(&mut self, id: usize) -> &mut Vec<f64> {
        &mut self.buffers[id]
    }

    pub fn num_buffers(&self) -> usize {
        self.buffers.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata, e.g. the training iteration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `u64` header length (little endian), the JSON header, then every
/// parameter and buffer as little-endian `f64` in manifest order.
pub fn write_checkpoint(
    out: &mut impl Write,
    config: &ModelConfig,
    store: &ParamStore,
    meta: serde_json::Value,
) -> Result<(), ModelError> {
    let mut tensors: Vec<TensorEntry> = store
        .iter()
        .map(|(_, name, m)| TensorEntry { name: name.to_string(), shape: vec![m.rows(), m.cols()], dtype: "f64".into() })
        .collect();
    tensors.extend(
        store
            .buffer_names
            .iter()
            .zip(&store.buffers)
            .map(|(n, b)| TensorEntry { name: n.clone(), shape: vec![b.len()], dtype: "f64".into() }),
    );
    let header = CheckpointHeader { format_version: CHECKPOINT_VERSION, config: config.clone(), tensors, meta };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    let mut bytes = Vec::with_capacity(8 * (store.num_scalars() + store.buffers.iter().map(Vec::len).sum::<usize>()));
    for x in store.values.iter().flat_map(|m| m.data()).chain(store.buffers.iter().flatten()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&bytes).map_err(io)
}

/// Reads a checkpoint into its header and a flat list of named tensors.
pub fn read_checkpoint(input: &mut impl Read) -> Result<(CheckpointHeader, Vec<(String, Vec<usize>, Vec<f64>)>), ModelError> {
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(ModelError::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(ModelError::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let mut raw = vec![0u8; 8 * n];
        input.read_exact(&mut raw).map_err(io)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((t.name.clone(), t.shape.clone(), data));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, tensors))
}

/// Copies checkpoint tensors into a store built for the same config,
/// checking names and shapes.
pub(crate) fn load_into(store: &mut ParamStore, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<(), ModelError> {
    let expected = store.len() + store.num_buffers();
    if tensors.len() != expected {
        return Err(ModelError::Checkpoint(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let buffer_index: HashMap<String, usize> =
        store.buffer_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    for (name, shape, data) in tensors {
        if let Some(id) = store.find(&name) {
            let m = &store.values[id];
            if shape != [m.rows(), m.cols()] {
                return Err(ModelError::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", m.shape())));
            }
            store.values[id] = Matrix::new(m.rows(), m.cols(), data).expect("shape checked");
        } else if let Some(&b) = buffer_index.get(&name) {
            if shape != [store.buffers[b].len()] {
                return Err(ModelError::Checkpoint(format!("{name}: wrong buffer length")));
            }
            store.buffers[b] = data;
        } else {
            return Err(ModelError::Checkpoint(format!("unknown tensor {name}")));
        }
    }
    Ok(())
}

pub fn save_to_path(path: &Path, config: &ModelConfig, store: &ParamStore, meta: serde_json::Value) -> Result<(), ModelError> {
    let file = std::fs::File::create(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, config, store, meta)?;
    w.flush().map_err(|e| ModelError::Checkpoint(e.to_string()))
}
