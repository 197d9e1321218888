//! Model checkpoints: a small binary container holding the model
//! configuration as JSON plus every named parameter tensor as f32 data.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! "MIQA"            4-byte magic
//! version           = 1
//! config_len        followed by that many bytes of config JSON
//! tensor_count
//! per tensor:
//!   name_len, name bytes (UTF-8)
//!   ndim, ndim dims
//!   numel f32 values (LE bytes)
//! ```
//!
//! Saving the result of a load reproduces the file byte for byte, and a
//! loaded model's forward pass is bit-identical to the saved one's.

use std::fs;
use std::path::Path;

use crate::arch::{IqaModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MIQA";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &[(String, Tensor)],
) -> Result<()> {
    let cfg_json = serde_json::to_string(cfg)
        .map_err(|e| Error::config(format!("config not serializable: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, cfg_json.len() as u32);
    out.extend_from_slice(cfg_json.as_bytes());
    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        push_u32(&mut out, shape.len() as u32);
        for &d in shape {
            push_u32(&mut out, d as u32);
        }
        for &v in tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Saves a model's configuration and current parameter values.
pub fn save_model(path: &Path, model: &IqaModel) -> Result<()> {
    save_checkpoint(path, &model.cfg, &model.named_params())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated while reading {what} ({n} bytes at {})", self.pos),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads back the configuration and raw named tensors of a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MIQA"));
    }
    let version_at = r.pos as u64;
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let cfg_len = r.read_u32("config length")? as usize;
    let cfg_at = r.pos as u64;
    let cfg_bytes = r.take(cfg_len, "config JSON")?;
    let cfg: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::format(cfg_at, format!("bad config JSON: {e}")))?;
    cfg.validate()?;
    let count = r.read_u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.read_u32("name length")? as usize;
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(name_at, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.read_u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after last tensor", buf.len() - r.pos),
        ));
    }
    Ok((cfg, params))
}

/// Rebuilds a model from a checkpoint; its forward pass matches the saved
/// model bit for bit. Fails if the stored tensors do not exactly cover the
/// parameter set the configuration implies.
pub fn load_model(path: &Path) -> Result<IqaModel> {
    let (cfg, stored) = load_checkpoint(path)?;
    let model = IqaModel::init(cfg, 0)?;
    let live = model.named_params();
    if stored.len() != live.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, configuration implies {}",
            stored.len(),
            live.len()
        )));
    }
    let mut by_name: std::collections::HashMap<&str, &Tensor> =
        live.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, tensor) in &stored {
        let target = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::config(format!("checkpoint tensor `{name}` not in model"))
        })?;
        if target.shape() != tensor.shape() {
            return Err(Error::config(format!(
                "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        target.set_data(&tensor.to_vec());
    }
    Ok(model)
}
