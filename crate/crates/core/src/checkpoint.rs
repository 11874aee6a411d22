//! Binary checkpoint: `b"FPI1"`, a little-endian `u32` header length, the
//! JSON header, then every parameter as little-endian `f32` in manifest
//! order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::FpiModel;
use crate::params::ParamStore;
use crate::rng::rng;
use crate::train::Normalization;

pub const MAGIC: &[u8; 4] = b"FPI1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("payload has {got} bytes, manifest needs {want}")]
    Payload { got: usize, want: usize },
    #[error("checkpoint parameter {0} does not match the model built from its config")]
    Manifest(String),
    #[error("checkpoint config conflicts with the given config: {0}")]
    Conflict(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub normalization: Normalization,
    pub step: usize,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, normalization: Normalization, step: usize, epoch: usize, store: ParamStore<f32>) -> Self {
        let params = store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.shape(id).to_vec(),
            })
            .collect();
        Checkpoint {
            header: Header {
                config,
                normalization,
                step,
                epoch,
                params,
            },
            store,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.store.num_values() * 4);
        for id in self.store.ids() {
            for v in self.store.values(id) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|source| CheckpointError::Io { path: "<reader>".into(), source })?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(8..8 + len).ok_or_else(|| CheckpointError::Header("truncated".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[8 + len..];
        let want: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != want {
            return Err(CheckpointError::Payload { got: payload.len(), want });
        }
        let mut store = ParamStore::new();
        let mut at = 0;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let vals = payload[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            at += 4 * n;
            store.add(p.name.clone(), &p.shape, vals);
        }
        Ok(Checkpoint { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(io)?;
        std::fs::write(path, buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Rebuilds the model from the stored config and checks that the stored
    /// parameters match it name for name and shape for shape.
    pub fn model(&self) -> Result<FpiModel, CheckpointError> {
        let (model, fresh) = FpiModel::init::<f32>(self.header.config.model.clone(), &mut rng(0))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if fresh.len() != self.store.len() {
            return Err(CheckpointError::Manifest(format!("count {} vs {}", self.store.len(), fresh.len())));
        }
        for id in fresh.ids() {
            if fresh.name(id) != self.store.name(id) || fresh.shape(id) != self.store.shape(id) {
                return Err(CheckpointError::Manifest(self.store.name(id).to_string()));
            }
        }
        Ok(model)
    }

    /// Errors unless `other` describes the same model and loss.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<(), CheckpointError> {
        let mine = &self.header.config;
        if mine.model != other.model {
            return Err(CheckpointError::Conflict(format!("model {:?} vs {:?}", mine.model, other.model)));
        }
        if mine.loss != other.loss {
            return Err(CheckpointError::Conflict(format!("loss {:?} vs {:?}", mine.loss, other.loss)));
        }
        Ok(())
    }
}
