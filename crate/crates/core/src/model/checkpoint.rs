//! `S4MC` model checkpoint.
//!
//! ```text
//! "S4MC" | version u32 | input_dim hidden_dim state_dim num_classes
//! num_ssm_layers multitask(0/1) num_patch_classes discretization(0 bilinear, 1 zoh)
//! (all u32) | parameters as f32, declaration order, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{MilModel, ModelConfig, Param, Trainable};
use crate::error::{Error, Result};
use crate::ssm::Discretization;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S4MC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 * 4;

fn parse_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn to_u32(v: usize, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{field} = {v} does not fit in u32")))
}

pub fn encode_checkpoint(model: &MilModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let fields = [
        VERSION,
        to_u32(c.input_dim, "input_dim")?,
        to_u32(c.hidden_dim, "hidden_dim")?,
        to_u32(c.state_dim, "state_dim")?,
        to_u32(c.num_classes, "num_classes")?,
        to_u32(c.num_ssm_layers, "num_ssm_layers")?,
        u32::from(c.multitask),
        to_u32(c.num_patch_classes, "num_patch_classes")?,
        match c.discretization {
            Discretization::Bilinear => 0,
            Discretization::Zoh => 1,
        },
    ];
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for p in model.params() {
        for &v in p.value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MilModel> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(path, bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(parse_err(path, 0, "bad checkpoint magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != VERSION {
        return Err(parse_err(path, 4, format!("unsupported checkpoint version {}", word(0))));
    }
    let flag = |i: usize, what: &str| match word(i) {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(parse_err(path, 4 + 4 * i, format!("{what} must be 0 or 1, found {other}"))),
    };
    let config = ModelConfig {
        input_dim: word(1) as usize,
        hidden_dim: word(2) as usize,
        state_dim: word(3) as usize,
        num_classes: word(4) as usize,
        num_ssm_layers: word(5) as usize,
        multitask: flag(6, "multitask flag")?,
        num_patch_classes: word(7) as usize,
        discretization: if flag(8, "discretization")? {
            Discretization::Zoh
        } else {
            Discretization::Bilinear
        },
    };
    config.validate()?;

    let mut at = HEADER_LEN;
    let mut params = Vec::new();
    for (name, rows, cols) in config.layout() {
        let n = rows * cols;
        let end = at + 4 * n;
        if end > bytes.len() {
            return Err(parse_err(path, at, format!("truncated while reading {name}")));
        }
        let values: Vec<f64> = bytes[at..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        params.push(Param {
            name,
            value: Array2::from_shape_vec((rows, cols), values).expect("sized"),
        });
        at = end;
    }
    if at != bytes.len() {
        return Err(parse_err(path, at, format!("{} trailing bytes", bytes.len() - at)));
    }
    MilModel::from_params(config, params)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &MilModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<MilModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
