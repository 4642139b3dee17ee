//! Checkpoint files: `SLCK`, a little-endian `u32` format version, a UTF-8
//! JSON manifest, then the raw little-endian `f64` payload of every tensor in
//! directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{AdamSlot, AdamState, Rng, Tensor};
use crate::train::{EpochLog, TrainConfig, Trainer, TrainerState};

pub const MAGIC: &[u8; 4] = b"SLCK";
pub const FORMAT_VERSION: u32 = 1;

/// A complete training snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    /// Parameter values by name, in model construction order.
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub state: TrainerState,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
    adam_steps: Vec<u64>,
    global_step: u64,
    trainer: TrainerState,
    history: Vec<EpochLog>,
}

impl Checkpoint {
    pub(crate) fn capture(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            vocab: t.vocab.clone(),
            params: t.model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            adam: t.adam.clone(),
            state: t.state.clone(),
            history: t.history.clone(),
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config(self.vocab.len()), &mut Rng::new(0))?;
        if model.store.len() != self.params.len() {
            return Err(Error::CheckpointPayload(format!(
                "checkpoint holds {} parameters, mode {} needs {}",
                self.params.len(),
                self.config.mode,
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::CheckpointPayload(format!("unknown parameter {name}")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::CheckpointPayload(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // Directory: parameters, then Adam first moments, then second moments.
        let mut dir: Vec<(String, &Tensor)> = Vec::new();
        for (name, value) in &self.params {
            dir.push((name.clone(), value));
        }
        for ((name, _), slot) in self.params.iter().zip(&self.adam.slots) {
            dir.push((format!("adam.m/{name}"), &slot.m));
        }
        for ((name, _), slot) in self.params.iter().zip(&self.adam.slots) {
            dir.push((format!("adam.v/{name}"), &slot.v));
        }
        let mut tensors = Vec::with_capacity(dir.len());
        let mut offset = 0;
        for (name, value) in &dir {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                offset,
            });
            offset += value.len() * 8;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors,
            adam_steps: self.adam.slots.iter().map(|s| s.t).collect(),
            global_step: self.state.global_step,
            trainer: self.state.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, value) in &dir {
            for x in value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::CheckpointHeader("missing SLCK magic bytes".into()));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let rest = &bytes[8..];
        let mut stream = serde_json::Deserializer::from_slice(rest).into_iter::<Manifest>();
        let manifest = match stream.next() {
            Some(Ok(m)) => m,
            Some(Err(e)) => return Err(Error::CheckpointHeader(format!("unreadable manifest: {e}"))),
            None => return Err(Error::CheckpointHeader("missing manifest".into())),
        };
        let payload = &rest[stream.byte_offset()..];

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0;
        for entry in &manifest.tensors {
            if entry.offset != expected_offset {
                return Err(Error::CheckpointPayload(format!("tensor {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * 8;
            if end > payload.len() {
                return Err(Error::CheckpointPayload(format!(
                    "payload truncated: tensor {} needs bytes up to {end}, file has {}",
                    entry.name,
                    payload.len()
                )));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| Error::CheckpointPayload(e.to_string()))?);
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::CheckpointPayload(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected_offset
            )));
        }
        let k = manifest.adam_steps.len();
        if manifest.tensors.len() != 3 * k {
            return Err(Error::CheckpointPayload(format!(
                "{} tensors for {k} parameters",
                manifest.tensors.len()
            )));
        }
        if manifest.global_step != manifest.trainer.global_step {
            return Err(Error::CheckpointHeader("inconsistent global step".into()));
        }
        let mut it = tensors.into_iter();
        let values: Vec<Tensor> = it.by_ref().take(k).collect();
        let ms: Vec<Tensor> = it.by_ref().take(k).collect();
        let vs: Vec<Tensor> = it.collect();
        for i in 0..k {
            if ms[i].shape() != values[i].shape() || vs[i].shape() != values[i].shape() {
                return Err(Error::CheckpointPayload(format!(
                    "optimizer moments of {} do not match its shape",
                    manifest.tensors[i].name
                )));
            }
        }
        let params = manifest.tensors[..k].iter().map(|e| e.name.clone()).zip(values).collect();
        let slots = ms
            .into_iter()
            .zip(vs)
            .zip(&manifest.adam_steps)
            .map(|((m, v), &t)| AdamSlot { m, v, t })
            .collect();
        Ok(Self {
            config: manifest.config,
            vocab: manifest.vocab,
            params,
            adam: AdamState { slots },
            state: manifest.trainer,
            history: manifest.history,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
