//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "LMOECKPT"
//! version      u32      currently 1
//! config_len   u64
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! step         u64
//! count        u32      number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len bytes of UTF-8, e.g. "blocks.0.lsm.w_q"
//!   rank       u32
//!   dims       rank × u64
//!   data       product(dims) × f64
//! }
//! ```
//!
//! Tensors appear in [`Model::visit`] order; loading matches them by name
//! against a freshly built model of the stored config.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::params::{build_model, Model};

pub const MAGIC: &[u8; 8] = b"LMOECKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, cfg: &ModelConfig, step: u64, model: &Model<Tensor>) -> Result<()> {
    let config = serde_json::to_vec(cfg)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&step.to_le_bytes())?;
    let mut named = Vec::new();
    model.visit(&mut |n, t| named.push((n, t)));
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read, n: u64) -> Result<Vec<u8>> {
    if n > 1 << 32 {
        return Err(Error::Format(format!("implausible field length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub model: Model<Tensor>,
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    if &read_array::<8>(r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(r)?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(r, len)?)?;
    config.validate()?;
    let step = read_u64(r)?;
    let count = read_u32(r)? as usize;
    let skeleton = build_model(&config, &mut Rng::seed(0))?;
    let names = skeleton.names();
    if count != names.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", names.len())));
    }
    let mut leaves = Vec::with_capacity(count);
    for want in &names {
        let n = read_u32(r)? as u64;
        let name = String::from_utf8(read_bytes(r, n)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != want {
            return Err(Error::Format(format!("expected tensor `{want}`, found `{name}`")));
        }
        let rank = read_u32(r)? as usize;
        let dims = (0..rank).map(|_| Ok(read_u64(r)? as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = read_bytes(r, numel as u64 * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        leaves.push(Tensor::new(&dims, data)?);
    }
    let model = skeleton.with_leaves(leaves)?;
    Ok(Checkpoint { config, step, model })
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, step: u64, model: &Model<Tensor>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, cfg, step, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
