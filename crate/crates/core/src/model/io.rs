//! Parameter file: little-endian, 20-byte header
//! `{magic "DFTM", version u32, K u32, d u32, layers u32}` followed by the
//! flat view as `f64`. The positional table size is implied by the payload
//! length.

use std::fs;
use std::path::Path;

use super::{Layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"DFTM";
pub const PARAM_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(cfg.d_model as u32).to_le_bytes());
        out.extend_from_slice(&(cfg.n_layers as u32).to_le_bytes());
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "parameter file too short: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != PARAM_MAGIC {
            return Err(Error::Format("bad magic, expected DFTM".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != PARAM_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: PARAM_VERSION,
            });
        }
        let (k, d, layers) = (word(8) as usize, word(12) as usize, word(16) as usize);
        if k == 0 || d == 0 {
            return Err(Error::Format(format!("degenerate header K={k} d={d}")));
        }
        let payload = &bytes[HEADER_LEN..];
        if payload.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "truncated payload: {} bytes is not a whole number of f64",
                payload.len()
            )));
        }
        let count = payload.len() / 8;
        let fixed = Layout::fixed_size(ModelConfig::new(k, d, layers, 0));
        if count <= fixed || (count - fixed) % d != 0 {
            return Err(Error::Format(format!(
                "truncated payload: {count} values do not fit K={k} d={d} layers={layers}"
            )));
        }
        let config = ModelConfig::new(k, d, layers, (count - fixed) / d);
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ModelParams::from_flat(config, data)
    }
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params.to_bytes()).map_err(|e| Error::file(path, e))
}

/// Load a parameter file. With `expect`, the stored shape must match.
pub fn load_params(path: impl AsRef<Path>, expect: Option<&ModelConfig>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let params = ModelParams::from_bytes(&bytes)?;
    if let Some(cfg) = expect {
        if params.config() != *cfg {
            return Err(Error::ShapeMismatch(format!(
                "file holds {:?}, expected {cfg:?}",
                params.config()
            )));
        }
    }
    Ok(params)
}
