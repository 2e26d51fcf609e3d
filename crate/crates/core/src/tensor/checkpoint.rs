//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MORF" | version: u32 | entry count: u32
//! per entry: name length: u32 | name (UTF-8) | rank: u32 | dims: u32 * rank | f32 * product(dims)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"MORF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_entries(
    w: &mut impl Write,
    entries: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, entries.len() as u32)?;
    for (name, t) in entries {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            write_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(r)?;
    let mut entries = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(CheckpointError::Corrupt(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} for {name}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| CheckpointError::Corrupt(format!("dims {dims:?} for {name}")))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::constant(dims, data)));
    }
    Ok(entries)
}

/// Stores UTF-8 text as a rank-1 entry, one byte value per element.
pub fn text_entry(text: &str) -> Tensor {
    let data: Vec<f32> = text.bytes().map(f32::from).collect();
    Tensor::constant(vec![data.len()], data)
}

pub fn entry_text(t: &Tensor) -> Result<String, CheckpointError> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(CheckpointError::Corrupt(format!(
                    "non-byte value {v} in text entry"
                )))
            }
        })
        .collect::<Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
