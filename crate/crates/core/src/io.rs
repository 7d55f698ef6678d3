//! Self-describing binary parameter dumps.
//!
//! Layout: the 8-byte magic `MTPV0001`, a little-endian `u32` length and that
//! many bytes of model-spec JSON, a little-endian `u64` coordinate count, then
//! the coordinates as little-endian `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

const MAGIC: &[u8; 8] = b"MTPV0001";

pub fn encode_params(spec: &ModelSpec, theta: &[f64]) -> Result<Vec<u8>> {
    if theta.len() != spec.param_count() {
        return Err(Error::Dimension(format!(
            "model has {} parameters, got {}",
            spec.param_count(),
            theta.len()
        )));
    }
    let header = serde_json::to_vec(spec)?;
    let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + 8 * theta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::InvalidInput("parameter dump is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_params(mut bytes: &[u8]) -> Result<(ModelSpec, ParamVector)> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::InvalidInput(
            "not a parameter dump (bad magic)".into(),
        ));
    }
    let len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
    let spec: ModelSpec = serde_json::from_slice(take(&mut bytes, len)?)?;
    spec.validate()?;
    let count = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    if count != spec.param_count() {
        return Err(Error::Dimension(format!(
            "dump holds {count} coordinates but its model needs {}",
            spec.param_count()
        )));
    }
    let raw = take(&mut bytes, 8 * count)?;
    if !bytes.is_empty() {
        return Err(Error::InvalidInput(
            "trailing bytes after parameter dump".into(),
        ));
    }
    let coords = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let theta = ParamVector::new(&spec, coords)?;
    Ok((spec, theta))
}

pub fn save_params(path: impl AsRef<Path>, spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    std::fs::write(path, encode_params(spec, theta)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ModelSpec, ParamVector)> {
    decode_params(&std::fs::read(path)?)
}
