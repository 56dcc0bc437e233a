//! Binary model checkpoints.
//!
//! Layout: the magic `IDCLCKPT`, a `u32` format version, a length-prefixed
//! JSON metadata block, a `u64` tensor count, then per tensor a
//! length-prefixed name, `u64` rows, `u64` cols and little-endian `f64`
//! entries in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{GraphShape, IdclModel};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"IDCLCKPT";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub shape: GraphShape,
    pub dataset_hash: String,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub best_val_recall: Option<f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(r: &mut impl Read, limit: usize, what: &str) -> Result<usize> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(corrupt(format!("{what} length {n} exceeds {limit}")));
    }
    Ok(n)
}

/// Serializes the model with its metadata.
pub fn write_checkpoint(w: &mut impl Write, model: &IdclModel, meta: &CheckpointMeta) -> Result<()> {
    let io = |e: std::io::Error| corrupt(format!("write failed: {e}"));
    let json = serde_json::to_vec(meta).map_err(|e| corrupt(e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    write_u64(w, json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    write_u64(w, model.params.len() as u64).map_err(io)?;
    for (name, t) in model.params.iter() {
        write_u64(w, name.len() as u64).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_u64(w, t.nrows() as u64).map_err(io)?;
        write_u64(w, t.ncols() as u64).map_err(io)?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

/// Parses a checkpoint and checks the tensors against its own config.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(IdclModel, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("file is too short"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|_| corrupt("truncated header"))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = read_len(r, 1 << 24, "metadata")?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
    let count = read_len(r, 1 << 16, "tensor table")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = read_len(r, MAX_NAME, "tensor name")?;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l <= 1 << 32)
            .ok_or_else(|| corrupt(format!("tensor `{name}` is too large")))?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| corrupt(format!("truncated tensor `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| corrupt(e.to_string()))?;
        if params.contains(&name) {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| corrupt(e.to_string()))? != 0 {
        return Err(corrupt("trailing bytes after the tensor table"));
    }
    let model = IdclModel {
        config: meta.config.clone(),
        shape: meta.shape,
        params,
    };
    model.check().map_err(|e| corrupt(format!("inconsistent checkpoint: {e}")))?;
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &IdclModel, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, meta)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(IdclModel, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and refuses it unless `d`, `K` and `L` match `expected`.
pub fn load_checkpoint_matching(path: &Path, expected: &TrainConfig) -> Result<(IdclModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    let got = &model.config;
    let want = (expected.dim, expected.intents, expected.layers);
    let have = (got.dim, got.intents, got.layers);
    if have != want {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint has (d, K, L) = {have:?}, expected {want:?}",
            path.display()
        )));
    }
    Ok((model, meta))
}
