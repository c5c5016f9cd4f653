//! Checkpoint format: one JSON header line followed by the raw
//! little-endian f32 parameter blob in header order. The loader refuses
//! files whose version or architecture string does not match what the
//! caller expects.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ParamStore;
use super::tape::Arr;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("architecture mismatch: file has {found:?}, expected {expected:?}")]
    Architecture { found: String, expected: String },
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error("blob truncated: expected {expected} floats, got {got}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub architecture: String,
    pub input_size: usize,
    /// free-form creation metadata: config hash, stage lineage, anchor
    /// layout, feature dimensions
    pub meta: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<EntryMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    architecture: &str,
    input_size: usize,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        architecture: architecture.to_string(),
        input_size,
        meta,
        entries: params
            .ids()
            .map(|id| EntryMeta {
                name: params.name(id).to_string(),
                shape: params.get(id).shape().to_vec(),
                trainable: params.is_trainable(id),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for id in params.ids() {
        for &v in params.get(id).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into an already constructed parameter store (the
/// network must be rebuilt from its config first, which fixes names and
/// shapes).
pub fn load_checkpoint(
    path: &Path,
    params: &mut ParamStore,
    expected_architecture: &str,
) -> Result<CheckpointHeader, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    {
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header_line.push(byte[0]);
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.architecture != expected_architecture {
        return Err(CheckpointError::Architecture {
            found: header.architecture,
            expected: expected_architecture.to_string(),
        });
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(CheckpointError::Truncated {
            expected: total,
            got: blob.len() / 4,
        });
    }
    let mut values: BTreeMap<String, Arr> = BTreeMap::new();
    let mut off = 0usize;
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = [
                blob[off + i * 4],
                blob[off + i * 4 + 1],
                blob[off + i * 4 + 2],
                blob[off + i * 4 + 3],
            ];
            data.push(f32::from_le_bytes(b));
        }
        off += n * 4;
        values.insert(
            e.name.clone(),
            Arr::from_shape_vec(ndarray::IxDyn(&e.shape), data)
                .map_err(|e| CheckpointError::Params(e.to_string()))?,
        );
    }
    params
        .fill_from(|name| values.get(name))
        .map_err(CheckpointError::Params)?;
    Ok(header)
}
