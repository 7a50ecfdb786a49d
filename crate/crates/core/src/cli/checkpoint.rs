//! Binary container for trained models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DIARKIT1"
//! version  u32
//! config   u32 length + UTF-8 TOML snapshot
//! count    u32
//! entry    u32 name length, name, u8 dtype, u32 rank, u64 dims[rank], payload
//! sha256   32 bytes over everything before it
//! ```
//!
//! Payloads are row-major. Dtype `1` is `f32`, `2` is `f64`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{Config, ModelConfig};
use crate::eda::EdaModel;
use crate::error::{Error, Result};
use crate::pipeline::Diarizer;
use crate::tensor::{ParamStore, Tensor};
use crate::tsvad::TsVadModel;

pub const MAGIC: &[u8; 8] = b"DIARKIT1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes named tensors as `f32`.
pub fn encode(config: &str, entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a diarkit checkpoint".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("checksum mismatch (file truncated)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let config = r.string()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            d => return Err(Error::Checkpoint(format!("entry `{name}` has unknown dtype {d}"))),
        };
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(Container { config, entries })
}

impl Diarizer {
    pub fn params(&self) -> &ParamStore {
        match self {
            Diarizer::TsVad(m) => &m.params,
            Diarizer::Eda(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Diarizer::TsVad(m) => &mut m.params,
            Diarizer::Eda(m) => &mut m.params,
        }
    }
}

/// A freshly initialized model for `cfg`.
pub fn build_model(cfg: &Config, seed: u64) -> Result<Diarizer> {
    Ok(match cfg.model_config()? {
        ModelConfig::TsVad(c) => Diarizer::TsVad(TsVadModel::new(c, seed)?),
        ModelConfig::Eda(c) => Diarizer::Eda(EdaModel::new(c, seed)?),
    })
}

/// Writes `model` with a snapshot of `cfg`. Parameters are first rounded to
/// `f32` in place so the live model and the file agree exactly.
pub fn save_checkpoint(model: &mut Diarizer, cfg: &Config, path: &Path) -> Result<()> {
    model.params_mut().round_to_f32();
    let snapshot = cfg.to_toml()?;
    let params = model.params();
    let entries: Vec<(&str, &Tensor)> = params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    let bytes = encode(&snapshot, &entries);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Diarizer, Config)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = decode(&bytes)?;
    let cfg = Config::from_toml(&c.config)?;
    let mut model = build_model(&cfg, 0)?;
    let store = model.params_mut();
    if store.len() != c.entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, the configured model has {}",
            c.entries.len(),
            store.len()
        )));
    }
    for (name, t) in c.entries {
        store.load(&name, t)?;
    }
    Ok((model, cfg))
}
