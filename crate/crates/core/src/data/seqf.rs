//! `SEQF` sequence container.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "SEQF"
//! 4       4          version (u32 LE, = 1)
//! 8       4          L, tokens (u32 LE)
//! 12      4          D, values per token (u32 LE)
//! 16      4·L·D      f32 LE values, token-major
//! ```
//!
//! Nothing may follow the payload.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEQF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

fn parse_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a sequence container from memory. `path` only labels errors.
pub fn decode_sequence(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(parse_err(path, 0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let len = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if len == 0 {
        return Err(parse_err(path, 8, "sequence has zero tokens"));
    }
    if dim == 0 {
        return Err(parse_err(path, 12, "tokens have zero values"));
    }
    let payload = len
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| parse_err(path, 8, format!("L·D overflow for L={len}, D={dim}")))?;
    if bytes.len() < payload {
        let whole_tokens = (bytes.len() - HEADER_LEN) / (4 * dim);
        return Err(parse_err(
            path,
            (HEADER_LEN + whole_tokens * dim * 4) as u64,
            format!("truncated payload: header declares {len} tokens, file holds {whole_tokens}"),
        ));
    }
    if bytes.len() > payload {
        return Err(parse_err(
            path,
            payload as u64,
            format!("{} trailing bytes after payload", bytes.len() - payload),
        ));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((len, dim), values).expect("size checked"))
}

pub fn encode_sequence(values: &Array2<f32>) -> Result<Vec<u8>> {
    let (len, dim) = values.dim();
    let l32 = u32::try_from(len).map_err(|_| Error::ContractViolation(format!("{len} tokens exceed u32")))?;
    let d32 = u32::try_from(dim).map_err(|_| Error::ContractViolation(format!("{dim} values exceed u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * len * dim);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&l32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_sequence_file(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes, path)
}

pub fn write_sequence_file(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sequence(values)?).map_err(|e| Error::io(path, e))
}

/// Integer columns stored as integral floats (patch labels with `D = 1`,
/// grid coordinates with `D = 2`).
pub fn read_integer_file(path: impl AsRef<Path>, expected_dim: usize) -> Result<Vec<Vec<i64>>> {
    let path = path.as_ref();
    let values = read_sequence_file(path)?;
    if values.ncols() != expected_dim {
        return Err(parse_err(
            path,
            12,
            format!("expected {expected_dim} values per token, found {}", values.ncols()),
        ));
    }
    values
        .outer_iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| {
                    if v.fract() != 0.0 || !v.is_finite() || v.abs() > 16_777_216.0 {
                        Err(parse_err(
                            path,
                            (HEADER_LEN + 4 * (t * expected_dim + j)) as u64,
                            format!("value {v} is not an exactly representable integer"),
                        ))
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn write_integer_file(path: impl AsRef<Path>, rows: &[Vec<i64>], dim: usize) -> Result<()> {
    let mut values = Array2::<f32>::zeros((rows.len(), dim));
    for (t, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::ContractViolation(format!("row {t} has {} values, expected {dim}", row.len())));
        }
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > 16_777_216 {
                return Err(Error::ContractViolation(format!("{v} is not exactly representable as f32")));
            }
            values[[t, j]] = v as f32;
        }
    }
    write_sequence_file(path, &values)
}
