//! Binary parameter checkpoints.
//!
//! Layout, little-endian: magic `HCKP`, format version `u32`, entry count
//! `u64`, then per entry the name (`u32` length + UTF-8), rank `u32`, dims
//! (`u64` each) and values (`f64` each).

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"HCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamStore) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        let shape = p.tensor().shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor().numel() * 8);
        for v in p.tensor().values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Format("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    if &read_array::<4, _>(&mut input)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut input)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len.min(1 << 16)];
        if len > name.len() {
            return Err(CheckpointError::Format("name too long".into()));
        }
        input.read_exact(&mut name).map_err(|_| CheckpointError::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Format("name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)?;
        if rank > 8 {
            return Err(CheckpointError::Format(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut input)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(CheckpointError::Format(format!("{name} has {numel} elements")));
        }
        let mut values = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(read_array(&mut input)?));
        }
        entries.push(CheckpointEntry { name, shape, values });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(entries)
}

/// Trainable store holding the entries, for transfer via `Model::load_extractor`.
pub fn to_store(entries: &[CheckpointEntry]) -> Result<ParamStore, CheckpointError> {
    let mut store = ParamStore::new();
    for e in entries {
        let t = Tensor::new(e.shape.clone(), e.values.clone()).map_err(|err| CheckpointError::Format(format!("{}: {err}", e.name)))?;
        store.add(e.name.clone(), t, false);
    }
    Ok(store)
}

/// Loads every parameter of `model` from `entries`, frozen ones included.
/// Names, shapes and the entry count must match exactly.
pub fn restore(model: &mut Model, entries: &[CheckpointEntry]) -> Result<(), CheckpointError> {
    let store = model.params_mut();
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!("{} entries for {} parameters", entries.len(), store.len())));
    }
    let plan: Vec<_> = entries
        .iter()
        .map(|e| {
            let p = store.by_name(&e.name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {}", e.name)))?;
            if p.tensor().shape() != e.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: shape {:?}, model has {:?}",
                    e.name,
                    e.shape,
                    p.tensor().shape()
                )));
            }
            Ok(p.id)
        })
        .collect::<Result<_, _>>()?;
    for (id, e) in plan.into_iter().zip(entries) {
        store.load_values(id, &e.values).map_err(|err| CheckpointError::Mismatch(err.to_string()))?;
    }
    Ok(())
}
