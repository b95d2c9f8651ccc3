//! Checkpoint files: a one-line JSON manifest followed by a little-endian
//! `f32` payload.
//!
//! ```text
//! {"magic":"INFINET1", "config":{..}, "tensors":[{"name":..,"shape":..,"offset":..}, ..], ..}\n
//! <payload: f32 LE values of every tensor, concatenated in manifest order>
//! ```
//!
//! Tensor order is the canonical parameter order of the architecture
//! (trainable tensors and batch-norm running statistics), followed by the
//! optimizer velocity of each trainable tensor. Offsets count `f32` elements
//! from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::TensorError;
use crate::loss::ClassWeights;
use crate::model::{Arch, InfiNet, InfiNetConfig, ModelParameters};
use crate::optim::Velocity;
use crate::tensor::{Shape, Tensor};
use crate::training::TrainConfig;
use crate::volume::{write_atomic, Axis, VolumeError};

pub const CHECKPOINT_MAGIC: &str = "INFINET1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an InfiNet checkpoint or unsupported version (found `{found}`)")]
    Version { found: String },
    #[error("tensor `{name}`: manifest shape {manifest:?} does not match expected {expected:?}")]
    Shape {
        name: String,
        manifest: [usize; 4],
        expected: [usize; 4],
    },
    #[error("truncated payload: manifest implies {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<VolumeError> for CheckpointError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(io) => CheckpointError::Io(io),
            other => CheckpointError::Manifest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: [usize; 4],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    config: InfiNetConfig,
    arch: Arch,
    epoch: usize,
    seed: u64,
    #[serde(default)]
    view: Option<Axis>,
    #[serde(default)]
    loss_history: Vec<f64>,
    #[serde(default)]
    lr_history: Vec<f64>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    class_weights: Option<ClassWeights>,
    tensors: Vec<TensorRecord>,
    payload_floats: usize,
}

/// Everything needed to run a model or resume its training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: InfiNet<f32>,
    pub velocity: Velocity<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub view: Option<Axis>,
    pub loss_history: Vec<f64>,
    pub lr_history: Vec<f64>,
    pub train_config: Option<TrainConfig>,
    pub class_weights: Option<ClassWeights>,
}

impl Checkpoint {
    /// Wraps a bare model (no optimizer state or history).
    pub fn from_model(model: InfiNet<f32>, seed: u64) -> Self {
        Self {
            model,
            velocity: Velocity::new(),
            epoch: 0,
            seed,
            view: None,
            loss_history: Vec::new(),
            lr_history: Vec::new(),
            train_config: None,
            class_weights: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: &str, kind: TensorKind, t: &Tensor<f32>| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                kind,
                shape: t.shape().dims(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        };
        for (name, entry) in self.model.params().iter() {
            let kind = if entry.trainable {
                TensorKind::Param
            } else {
                TensorKind::Buffer
            };
            push(name, kind, &entry.tensor);
        }
        for (name, v) in &self.velocity {
            push(name, TensorKind::Velocity, v);
        }
        let manifest = Manifest {
            magic: CHECKPOINT_MAGIC.to_string(),
            config: *self.model.config(),
            arch: self.model.arch(),
            epoch: self.epoch,
            seed: self.seed,
            view: self.view,
            loss_history: self.loss_history.clone(),
            lr_history: self.lr_history.clone(),
            train_config: self.train_config.clone(),
            class_weights: self.class_weights.clone(),
            tensors,
            payload_floats: payload.len(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        out.reserve(payload.len() * 4);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let magic_probe = &bytes[..bytes.len().min(64)];
        let probe = String::from_utf8_lossy(magic_probe);
        let expected_prefix = format!("{{\"magic\":\"{CHECKPOINT_MAGIC}\"");
        if !probe.starts_with(&expected_prefix) {
            return Err(CheckpointError::Version {
                found: probe.chars().take(24).collect(),
            });
        }
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Manifest("missing manifest terminator".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Version { found: manifest.magic });
        }
        let payload = &bytes[nl + 1..];
        let expected_bytes = manifest.payload_floats * 4;
        if payload.len() != expected_bytes {
            return Err(CheckpointError::Truncated {
                expected: expected_bytes,
                actual: payload.len(),
            });
        }

        let template = InfiNet::<f32>::new(manifest.config, manifest.arch, 0)?;
        let mut params = ModelParameters::new();
        let mut velocity = Velocity::new();
        for rec in &manifest.tensors {
            let expected = match rec.kind {
                TensorKind::Velocity => template.params().get(&rec.name).filter(|e| e.trainable),
                _ => template.params().get(&rec.name),
            }
            .ok_or_else(|| CheckpointError::Manifest(format!("unexpected tensor `{}`", rec.name)))?
            .tensor
            .shape();
            if rec.shape != expected.dims() {
                return Err(CheckpointError::Shape {
                    name: rec.name.clone(),
                    manifest: rec.shape,
                    expected: expected.dims(),
                });
            }
            let len = expected.numel();
            let end = rec
                .offset
                .checked_add(len)
                .filter(|&e| e <= manifest.payload_floats)
                .ok_or_else(|| CheckpointError::Manifest(format!("tensor `{}` overruns the payload", rec.name)))?;
            let data = payload[rec.offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_vec(Shape::from_dims(rec.shape), data)?;
            match rec.kind {
                TensorKind::Velocity => {
                    velocity.insert(rec.name.clone(), tensor);
                }
                kind => params.insert(rec.name.clone(), tensor, kind == TensorKind::Param),
            }
        }
        let model = InfiNet::from_parameters(manifest.config, manifest.arch, params)?;
        Ok(Self {
            model,
            velocity,
            epoch: manifest.epoch,
            seed: manifest.seed,
            view: manifest.view,
            loss_history: manifest.loss_history,
            lr_history: manifest.lr_history,
            train_config: manifest.train_config,
            class_weights: manifest.class_weights,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    write_atomic(path.as_ref(), &checkpoint.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}
