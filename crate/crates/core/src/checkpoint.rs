//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `EVG1`, the header length as a little-endian
//! `u64`, a JSON header, then every parameter value as a little-endian `f32`
//! in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Ontology;
use crate::model::{ModelConfig, ModelError, Parser};
use crate::tensor::{ParamGroup, ParamStore};

pub const MAGIC: &[u8; 4] = b"EVG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("config hash mismatch: header says {stored}, config hashes to {computed}")]
    ConfigHash { stored: String, computed: String },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("labels not in the checkpoint vocabulary: {}", .0.join(", "))]
    Vocabulary(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    hyperparameters: serde_json::Value,
    step: u64,
    epoch: usize,
    params: Vec<ParamEntry>,
}

/// Parameters plus the metadata needed to rebuild the parser.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub hyperparameters: serde_json::Value,
    pub step: u64,
    pub epoch: usize,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config.hash(),
            model: self.config.clone(),
            hyperparameters: self.hyperparameters.clone(),
            step: self.step,
            epoch: self.epoch,
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.n_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, rebuilding the parser layout from the stored
    /// configuration. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Parser, Checkpoint), CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("missing magic bytes".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(4..12)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CheckpointError::Truncated("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(CheckpointError::Truncated(format!(
                "header needs {header_len} bytes, {} available",
                body.len()
            )));
        }
        let version: serde_json::Value = serde_json::from_slice(&body[..header_len])?;
        let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version { found });
        }
        let header: Header = serde_json::from_value(version)?;
        let computed = header.model.hash();
        if computed != header.config_hash {
            return Err(CheckpointError::ConfigHash {
                stored: header.config_hash,
                computed,
            });
        }

        let (parser, mut params) = Parser::new::<f32>(header.model.clone())?;
        if params.len() != header.params.len() {
            return Err(CheckpointError::Layout(format!(
                "{} stored parameters, model has {}",
                header.params.len(),
                params.len()
            )));
        }
        for ((_, p), entry) in params.iter().zip(&header.params) {
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || p.group != entry.group {
                return Err(CheckpointError::Layout(format!(
                    "stored {} {:?}, model expects {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let data = &body[header_len..];
        let expected = 4 * params.n_values();
        if data.len() < expected {
            return Err(CheckpointError::Truncated(format!(
                "{expected} parameter bytes expected, {} present",
                data.len()
            )));
        }
        if data.len() > expected {
            return Err(CheckpointError::TrailingBytes(data.len() - expected));
        }
        let mut chunks = data.chunks_exact(4);
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                let c = chunks.next().expect("length checked");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok((
            parser,
            Checkpoint {
                config: header.model,
                hyperparameters: header.hyperparameters,
                step: header.step,
                epoch: header.epoch,
                params,
            },
        ))
    }

    /// Writes through a temporary sibling file so a crash never leaves a
    /// partial checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Parser, Checkpoint), CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Fails when `ontology` uses labels the model cannot produce.
pub fn check_vocabulary(config: &ModelConfig, ontology: &Ontology) -> Result<(), CheckpointError> {
    let mut unknown: Vec<String> = ontology
        .event_types
        .iter()
        .filter(|t| !config.event_types.contains(t))
        .map(|t| format!("event type `{t}`"))
        .collect();
    unknown.extend(
        ontology
            .roles
            .iter()
            .filter(|r| !config.roles.contains(r))
            .map(|r| format!("role `{r}`")),
    );
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::Vocabulary(unknown))
    }
}
