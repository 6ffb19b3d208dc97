//! Binary weight files.
//!
//! All integers little-endian:
//!
//! ```text
//! "MSCW"  u32 version (=1)  u32 entry count
//! per entry:  u16 name length, UTF-8 name, u8 ndim, ndim × u32 dims,
//!             product(dims) × f64 payload
//! u32 CRC32 over all payload bytes, in entry order
//! u8 mode (0 = multi_scale, 1 = single_scale)
//! config: u32 side, u32 hidden, u8 block count, block count × u32 widths
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{BackboneConfig, Mode, ModelConfig, ModelError, ModelParams};
use crate::param::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSCW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic: not a weight file")]
    BadMagic,
    #[error("unsupported weight file version {0} (expected {VERSION})")]
    Version(u32),
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("weight file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("weight file holds a {found} model but {expected} was required")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn encode_weights(model: &ModelParams) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    let cfg = model.config();
    out.push(match cfg.mode {
        Mode::MultiScale => 0,
        Mode::SingleScale => 1,
    });
    out.extend_from_slice(&(cfg.backbone.side as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.hidden as u32).to_le_bytes());
    out.push(cfg.backbone.widths.len() as u8);
    for &w in &cfg.backbone.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(WeightsError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| WeightsError::BadMagic)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32("entry count")? as usize;
    let mut crc = crc32fast::Hasher::new();
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| WeightsError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| WeightsError::Malformed(format!("tensor {name:?} is too large")))?;
        let payload = r.take(len, "payload")?;
        crc.update(payload);
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| WeightsError::Malformed(format!("{name:?}: {e}")))?;
        params
            .push(name, value)
            .map_err(|e| WeightsError::Malformed(e.to_string()))?;
    }
    let stored = r.u32("checksum")?;
    let computed = crc.finalize();
    if stored != computed {
        return Err(WeightsError::Crc { stored, computed });
    }
    let mode = match r.u8("mode")? {
        0 => Mode::MultiScale,
        1 => Mode::SingleScale,
        m => return Err(WeightsError::Malformed(format!("unknown mode byte {m}"))),
    };
    let side = r.u32("config")? as usize;
    let hidden = r.u32("config")? as usize;
    let blocks = r.u8("config")? as usize;
    let mut widths = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        widths.push(r.u32("config")? as usize);
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let config = ModelConfig {
        backbone: BackboneConfig { widths, side },
        hidden,
        mode,
    };
    Ok(ModelParams::from_parts(config, params)?)
}

pub fn save_weights(model: &ModelParams, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams, WeightsError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes)
}

/// Loads a weight file and rejects it unless it holds a model of `mode`.
pub fn load_weights_for(path: impl AsRef<Path>, mode: Mode) -> Result<ModelParams, WeightsError> {
    let model = load_weights(path)?;
    if model.mode() != mode {
        return Err(WeightsError::ModeMismatch {
            expected: mode,
            found: model.mode(),
        });
    }
    Ok(model)
}
