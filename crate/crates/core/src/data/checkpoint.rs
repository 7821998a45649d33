//! `KRMT` checkpoints.
//!
//! Layout (little-endian): magic `KRMT`, `u32` version, `u32` config length,
//! the [`ModelConfig`] as JSON, its 32-byte SHA-256, `u32` parameter count,
//! then per parameter `u32` name length, name, `u32` rank, `u32` extents and
//! f32 values; a SHA-256 of everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Kramt, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KRMT";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    hex(&Sha256::digest(serde_json::to_vec(config).expect("config serialises")))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(crate::error::read_file(path)?)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a KRMT checkpoint (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checkpoint("integrity hash mismatch: file is corrupted or tampered".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let json_len = r.u32()?;
    let json = r.take(json_len)?;
    if Sha256::digest(json).as_slice() != r.take(32)? {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let config: ModelConfig = serde_json::from_slice(json)?;
    let n = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.insert(name, t)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((config, params))
}

pub fn save_checkpoint(model: &Kramt, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&model.config, &model.params)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Kramt> {
    let bytes = crate::error::read_file(path)?;
    let (config, params) = decode_checkpoint(&bytes)?;
    Kramt::from_params(config, params)
}

/// Field-by-field differences between two configurations, `name: a -> b`.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let va = serde_json::to_value(a).expect("config serialises");
    let vb = serde_json::to_value(b).expect("config serialises");
    let (Some(oa), Some(ob)) = (va.as_object(), vb.as_object()) else {
        return vec![];
    };
    oa.iter()
        .filter(|(k, v)| ob.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: {v} -> {}", ob.get(k).cloned().unwrap_or_default()))
        .collect()
}

/// Loads a checkpoint and refuses it unless its configuration equals
/// `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Kramt> {
    let model = load_checkpoint(path)?;
    let diff = config_diff(expected, &model.config);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with a different model config ({})",
            diff.join(", ")
        )));
    }
    Ok(model)
}
