//! Checkpoint container: magic, u32 header length, JSON header (format
//! version, config), then the named parameter arrays as little-endian f32,
//! row-major, in header order. Loading validates every expected parameter
//! name and shape against the header's config.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::parameter_shapes;
use super::{ModelConfig, ModelError, ModelParameters};

const MAGIC: &[u8; 4] = b"SRTT";

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config().clone(),
        params: params
            .iter()
            .map(|(name, arr)| ParamEntry {
                name: name.to_string(),
                rows: arr.nrows(),
                cols: arr.ncols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, arr) in params.iter() {
        for &v in arr.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::MalformedCheckpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::MalformedCheckpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    // Validate the header's name/shape list against the config exactly.
    let expected = parameter_shapes(&header.config);
    if header.params.len() != expected.len() {
        return Err(ModelError::MalformedCheckpoint(format!(
            "{} parameters listed, config requires {}",
            header.params.len(),
            expected.len()
        )));
    }
    for entry in &header.params {
        match expected.get(&entry.name) {
            None => {
                return Err(ModelError::MalformedCheckpoint(format!(
                    "unexpected parameter `{}`",
                    entry.name
                )))
            }
            Some(&(rows, cols)) if (rows, cols) != (entry.rows, entry.cols) => {
                return Err(ModelError::MalformedCheckpoint(format!(
                    "parameter `{}` has shape {}x{}, expected {rows}x{cols}",
                    entry.name, entry.rows, entry.cols
                )))
            }
            Some(_) => {}
        }
    }

    let mut params = ModelParameters::init(&header.config, 0)?;
    let mut buf = [0u8; 4];
    for entry in &header.params {
        let mut arr = Array2::<f64>::zeros((entry.rows, entry.cols));
        for v in arr.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| {
                ModelError::MalformedCheckpoint(format!("truncated payload at `{}`", entry.name))
            })?;
            *v = f32::from_le_bytes(buf) as f64;
        }
        params.set(&entry.name, arr)?;
    }
    // Trailing bytes indicate corruption.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::MalformedCheckpoint("trailing bytes".into()));
    }
    Ok(params)
}
