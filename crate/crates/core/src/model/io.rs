//! Model file format:
//!
//! ```text
//! magic    8 bytes   b"RANETMDL"
//! version  u32 LE
//! hlen     u32 LE    length of the JSON header
//! header   hlen bytes  {"config": ModelConfig, "params": [{name, shape, trainable}]}
//! payload  f32 LE values of every registry entry, in header order
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelGraph};
use crate::error::{Error, Result};

pub const FILE_MAGIC: [u8; 8] = *b"RANETMDL";
pub const FILE_VERSION: u32 = 1;
const PREAMBLE: usize = FILE_MAGIC.len() + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn header_of(model: &ModelGraph) -> Header {
    Header {
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamHeader {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    }
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&header_of(model))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&FILE_MAGIC)?;
    out.write_all(&FILE_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::Truncated {
        expected: expected as u64,
        found: found as u64,
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode(bytes: &[u8]) -> Result<ModelGraph> {
    let magic_len = FILE_MAGIC.len().min(bytes.len());
    if bytes[..magic_len] != FILE_MAGIC[..magic_len] {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated(PREAMBLE, bytes.len()));
    }
    let version = read_u32(bytes, FILE_MAGIC.len());
    if version != FILE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FILE_VERSION,
        });
    }
    let header_end = PREAMBLE + read_u32(bytes, FILE_MAGIC.len() + 4) as usize;
    if bytes.len() < header_end {
        return Err(truncated(header_end, bytes.len()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;

    let mut model = ModelGraph::construct(&header.config, None)?;
    let expected = header_of(&model);
    if expected.params.len() != header.params.len() {
        return Err(Error::ParamMismatch(format!(
            "config implies {} parameters, file lists {}",
            expected.params.len(),
            header.params.len()
        )));
    }
    if let Some((want, got)) = expected
        .params
        .iter()
        .zip(&header.params)
        .find(|(want, got)| want != got)
    {
        return Err(Error::ParamMismatch(format!(
            "expected {} {:?}, file has {} {:?}",
            want.name, want.shape, got.name, got.shape
        )));
    }

    let total = header_end + 4 * model.params.total_count();
    if bytes.len() < total {
        return Err(truncated(total, bytes.len()));
    }
    if bytes.len() > total {
        return Err(Error::ParamMismatch(format!(
            "{} unexpected trailing bytes",
            bytes.len() - total
        )));
    }
    let mut payload = bytes[header_end..].chunks_exact(4);
    for p in model.params.iter_mut() {
        for (v, raw) in p.value.data_mut().iter_mut().zip(&mut payload) {
            *v = f32::from_le_bytes(raw.try_into().expect("4 bytes"));
        }
    }
    Ok(model)
}
