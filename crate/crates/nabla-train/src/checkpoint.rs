//! Binary checkpoint format.
//!
//! Layout, little-endian throughout: magic `NBLN`, u32 format version,
//! u32-length-prefixed model-spec JSON, u32-length-prefixed manifest
//! JSON, raw f32 payload. The manifest names every tensor with its
//! shape and byte offset into the payload; offsets must tile the
//! payload exactly, so truncation, overlap, and trailing garbage are
//! all detectable. The decoder never panics on malformed input.

use std::collections::BTreeMap;
use std::path::Path;

use nabla_core::model::{Model, ModelSpec};
use nabla_core::optim::{AdamState, SgdState};
use nabla_core::{Scalar, Shape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NBLN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated: need {need} more bytes at offset {at}")]
    Truncated { at: usize, need: usize },
    #[error("spec block: {0}")]
    BadSpec(String),
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("restore mismatch: {0}")]
    Mismatch(String),
}

/// One stored tensor: name, values, and whether the entry trains.
#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f32>,
    pub trainable: bool,
}

/// Optimizer state captured alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimSnapshot {
    Adam { step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
    Sgd { velocity: Vec<Vec<f32>> },
}

fn to_f32<E: Scalar>(buf: &[E]) -> Vec<f32> {
    buf.iter().map(|&x| x.to_f32_()).collect()
}

fn from_f32<E: Scalar>(buf: &[f32]) -> Vec<E> {
    buf.iter().map(|&x| E::from_f32(x)).collect()
}

impl OptimSnapshot {
    pub fn adam<E: Scalar>(state: &AdamState<E>) -> Self {
        OptimSnapshot::Adam {
            step: state.step,
            m: state.m.iter().map(|b| to_f32(b)).collect(),
            v: state.v.iter().map(|b| to_f32(b)).collect(),
        }
    }

    pub fn sgd<E: Scalar>(state: &SgdState<E>) -> Self {
        OptimSnapshot::Sgd { velocity: state.velocity.iter().map(|b| to_f32(b)).collect() }
    }

    pub fn restore_adam<E: Scalar>(&self) -> Option<AdamState<E>> {
        match self {
            OptimSnapshot::Adam { step, m, v } => Some(AdamState {
                step: *step,
                m: m.iter().map(|b| from_f32(b)).collect(),
                v: v.iter().map(|b| from_f32(b)).collect(),
            }),
            OptimSnapshot::Sgd { .. } => None,
        }
    }

    pub fn restore_sgd<E: Scalar>(&self) -> Option<SgdState<E>> {
        match self {
            OptimSnapshot::Sgd { velocity } => {
                Some(SgdState { velocity: velocity.iter().map(|b| from_f32(b)).collect() })
            }
            OptimSnapshot::Adam { .. } => None,
        }
    }
}

/// A fully decoded checkpoint: spec, epoch, every parameter tensor
/// (trainable and running-stat alike) and optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub epoch: usize,
    pub tensors: Vec<StoredTensor>,
    pub optimizer: Option<OptimSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 4],
    offset: u64,
    elements: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    offset: u64,
    elements: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    kind: String,
    step: u64,
    buffers: Vec<BufferMeta>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    epoch: u64,
    tensors: Vec<TensorMeta>,
    optimizer: Option<OptimMeta>,
}

impl Checkpoint {
    /// Captures every parameter-set entry of the model as f32.
    pub fn from_model<E: Scalar>(model: &Model<E>, epoch: usize, optimizer: Option<OptimSnapshot>) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, e)| StoredTensor {
                name: e.name.clone(),
                shape: e.value.shape(),
                values: to_f32(e.value.data()),
                trainable: e.trainable,
            })
            .collect();
        Checkpoint { version: FORMAT_VERSION, spec: model.spec.clone(), epoch, tensors, optimizer }
    }

    /// Rebuilds a model from the stored spec and restores every tensor.
    /// Strict: the checkpoint and the freshly built model must name the
    /// exact same tensors with the exact same shapes.
    pub fn into_model<E: Scalar>(&self) -> Result<Model<E>> {
        let mut model: Model<E> = Model::build(&self.spec, 0)?;
        let by_name: BTreeMap<&str, &StoredTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch("duplicate tensor names".into()).into());
        }
        let mut used = 0usize;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let entry = model.params.entry_mut(id);
            let stored = by_name.get(entry.name.as_str()).ok_or_else(|| {
                Error::from(CheckpointError::Mismatch(format!("checkpoint lacks tensor '{}'", entry.name)))
            })?;
            if stored.shape != entry.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor '{}' stored as {:?}, model wants {:?}",
                    entry.name, stored.shape.0, entry.value.shape().0
                ))
                .into());
            }
            let restored = from_f32::<E>(&stored.values);
            entry.value.data_mut().copy_from_slice(&restored);
            used += 1;
        }
        if used != self.tensors.len() {
            let extra: Vec<&str> = self
                .tensors
                .iter()
                .map(|t| t.name.as_str())
                .filter(|n| model.params.id_of(n).is_none())
                .collect();
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint tensors not in model: {}",
                extra.join(", ")
            ))
            .into());
        }
        Ok(model)
    }

    /// Copies every stored tensor whose name and shape match a target
    /// tensor, leaving the rest of the model at its current values.
    /// Never fails; the report partitions the model's tensor names into
    /// loaded and skipped (checkpoint-only tensors are ignored).
    pub fn transfer_into<E: Scalar>(&self, model: &mut Model<E>) -> TransferReport {
        let by_name: BTreeMap<&str, &StoredTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut report = TransferReport::default();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let entry = model.params.entry_mut(id);
            match by_name.get(entry.name.as_str()) {
                Some(stored) if stored.shape == entry.value.shape() => {
                    let restored = from_f32::<E>(&stored.values);
                    entry.value.data_mut().copy_from_slice(&restored);
                    report.loaded.push(entry.name.clone());
                }
                _ => report.skipped.push(entry.name.clone()),
            }
        }
        report
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload: Vec<f32> = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            tensors.push(TensorMeta {
                name: t.name.clone(),
                shape: t.shape.0,
                offset: (payload.len() * 4) as u64,
                elements: t.values.len() as u64,
                trainable: t.trainable,
            });
            payload.extend_from_slice(&t.values);
        }
        let optimizer = self.optimizer.as_ref().map(|snap| {
            let (kind, step, buffers): (&str, u64, Vec<&Vec<f32>>) = match snap {
                OptimSnapshot::Adam { step, m, v } => ("adam", *step, m.iter().chain(v.iter()).collect()),
                OptimSnapshot::Sgd { velocity } => ("sgd", 0, velocity.iter().collect()),
            };
            let metas = buffers
                .into_iter()
                .map(|b| {
                    let meta = BufferMeta { offset: (payload.len() * 4) as u64, elements: b.len() as u64 };
                    payload.extend_from_slice(b);
                    meta
                })
                .collect();
            OptimMeta { kind: kind.to_string(), step, buffers: metas }
        });
        let manifest = Manifest { epoch: self.epoch as u64, tensors, optimizer };
        let spec_json = serde_json::to_vec(&self.spec).expect("spec serializes");
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(16 + spec_json.len() + manifest_json.len() + payload.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec_json);
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for v in &payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint from raw bytes. Every length and offset is
    /// validated before use; malformed input yields an error, never a
    /// panic or a partial checkpoint.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let spec_len = r.u32()? as usize;
        let spec_json = r.take(spec_len)?;
        let spec: ModelSpec =
            serde_json::from_slice(spec_json).map_err(|e| CheckpointError::BadSpec(e.to_string()))?;
        spec.validate().map_err(|e| CheckpointError::BadSpec(e.to_string()))?;
        let manifest_len = r.u32()? as usize;
        let manifest_json = r.take(manifest_len)?;
        let manifest: Manifest =
            serde_json::from_slice(manifest_json).map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

        let payload_bytes = &r.bytes[r.pos..];
        if payload_bytes.len() % 4 != 0 {
            return Err(CheckpointError::TrailingBytes { extra: payload_bytes.len() % 4 });
        }
        let payload: Vec<f32> = payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        // The manifest regions must tile the payload exactly and in
        // order: no overlap, no gaps, no unreferenced tail.
        let mut cursor = 0u64;
        let mut region = |offset: u64, elements: u64| -> std::result::Result<(usize, usize), CheckpointError> {
            if offset != cursor {
                return Err(CheckpointError::BadManifest(format!(
                    "region at byte {offset} should start at {cursor} (overlap or gap)"
                )));
            }
            let bytes_len = elements
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::BadManifest("element count overflow".into()))?;
            let end = offset
                .checked_add(bytes_len)
                .ok_or_else(|| CheckpointError::BadManifest("region end overflow".into()))?;
            if end > (payload.len() * 4) as u64 {
                return Err(CheckpointError::Truncated {
                    at: payload.len() * 4,
                    need: (end - (payload.len() * 4) as u64) as usize,
                });
            }
            cursor = end;
            Ok(((offset / 4) as usize, elements as usize))
        };

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for meta in &manifest.tensors {
            let numel = meta
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| CheckpointError::BadManifest(format!("shape overflow for '{}'", meta.name)))?;
            if numel != meta.elements {
                return Err(CheckpointError::BadManifest(format!(
                    "tensor '{}': shape {:?} holds {numel} elements, manifest says {}",
                    meta.name, meta.shape, meta.elements
                )));
            }
            let (start, len) = region(meta.offset, meta.elements)?;
            tensors.push(StoredTensor {
                name: meta.name.clone(),
                shape: Shape(meta.shape),
                values: payload[start..start + len].to_vec(),
                trainable: meta.trainable,
            });
        }

        let optimizer = match &manifest.optimizer {
            None => None,
            Some(meta) => {
                let mut buffers = Vec::with_capacity(meta.buffers.len());
                for b in &meta.buffers {
                    let (start, len) = region(b.offset, b.elements)?;
                    buffers.push(payload[start..start + len].to_vec());
                }
                match meta.kind.as_str() {
                    "adam" => {
                        if buffers.len() % 2 != 0 {
                            return Err(CheckpointError::BadManifest(format!(
                                "adam state with {} buffers (need an even count)",
                                buffers.len()
                            )));
                        }
                        let v = buffers.split_off(buffers.len() / 2);
                        Some(OptimSnapshot::Adam { step: meta.step, m: buffers, v })
                    }
                    "sgd" => Some(OptimSnapshot::Sgd { velocity: buffers }),
                    other => {
                        return Err(CheckpointError::BadManifest(format!("unknown optimizer kind '{other}'")))
                    }
                }
            }
        };

        let extra = (payload.len() * 4) as u64 - cursor;
        if extra > 0 {
            return Err(CheckpointError::TrailingBytes { extra: extra as usize });
        }
        Ok(Checkpoint {
            version,
            spec,
            epoch: manifest.epoch as usize,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Checkpoint::decode(&bytes)?)
    }
}

/// Names copied into / left out of a transfer-learning target.
#[derive(Debug, Clone, Default)]
pub struct TransferReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CheckpointError::Truncated { at: self.pos, need: n })?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated { at: self.pos, need: end - self.bytes.len() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
