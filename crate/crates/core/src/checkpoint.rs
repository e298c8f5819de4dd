//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"XLMMCKPT"
//! u32    format version
//! u32    entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, rank × u64 extents
//! then every entry's values as f64, in entry order
//! ```
//!
//! Entries follow the canonical parameter order, so a checkpoint is only
//! accepted by a config that allocates exactly the same tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XLMMCKPT";
pub const VERSION: u32 = 1;

// Sanity bounds so a corrupt header fails cleanly instead of allocating.
const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_len(store.len())?.to_le_bytes())?;
    for e in store.entries() {
        w.write_all(&u32_len(e.name.len())?.to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&u32_len(e.value.shape().len())?.to_le_bytes())?;
        for &s in e.value.shape() {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
    }
    for e in store.entries() {
        for x in e.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads `(name, tensor)` pairs in file order.
pub fn read_params(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut header = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {len} out of range")));
        }
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        header.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in header {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&model.params, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Builds a model for `config` and replaces its parameters with the ones in
/// the file. Names and shapes must match the config's layout exactly.
pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let tensors = read_params(&mut r)?;
    restore(config, tensors)
}

pub fn restore(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Model> {
    let mut model = Model::new(config)?;
    if tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "config expects {} tensors, checkpoint has {}",
            model.params.len(),
            tensors.len()
        )));
    }
    for (entry, (name, value)) in model.params.entries_mut().iter_mut().zip(tensors) {
        if entry.name != name || entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {} {:?}",
                entry.name,
                entry.value.shape(),
                name,
                value.shape()
            )));
        }
        entry.value = value;
    }
    Ok(model)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit the header")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
