//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        5 bytes  "XDST1"
//! version      u32
//! config_len   u64, then config_len bytes of canonical JSON (sorted keys)
//! n_tensors    u64
//! per tensor:  name_len u32, name bytes, rank u32, rank x u64 dims,
//!              product(dims) x f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::{Scalar, Tensor};

use super::{parameter_layout, EncoderConfig, SentenceEncoder};

pub const MAGIC: &[u8; 5] = b"XDST1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Canonical JSON for a config: object keys sorted, no whitespace.
fn canonical_config(config: &EncoderConfig) -> Result<String> {
    // serde_json's default map is ordered by key
    let value = serde_json::to_value(config)?;
    Ok(serde_json::to_string(&value)?)
}

pub fn write_checkpoint<T: Scalar>(encoder: &SentenceEncoder<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = canonical_config(encoder.config())?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(encoder.params().len() as u64).to_le_bytes());
    for p in encoder.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.tensor.data() {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(encoder: &SentenceEncoder<T>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(encoder)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SentenceEncoder<T>> {
    read_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.fail(at, format!("{what} {v} exceeds the file size")))
    }
}

/// Parses a checkpoint; every tensor's name and dims must agree with the
/// layout implied by the embedded config.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<SentenceEncoder<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(version_at, format!("unsupported version {version}")));
    }
    let config_len = r.len("config length")?;
    let config_at = r.pos;
    let config_bytes = r.take(config_len, "config")?;
    let config: EncoderConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| r.fail(config_at, format!("invalid config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| r.fail(config_at, format!("invalid config: {e}")))?;

    let layout = parameter_layout(&config);
    let count_at = r.pos;
    let count = r.u64("tensor count")?;
    if count != layout.len() as u64 {
        return Err(r.fail(
            count_at,
            format!("config implies {} tensors, header says {count}", layout.len()),
        ));
    }
    let mut params = ParamStore::new();
    for (name, shape, decay) in layout {
        let name_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let got = r.take(name_len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(r.fail(
                name_at,
                format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(got)),
            ));
        }
        let dims_at = r.pos;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dimension")?);
        }
        if dims.len() != shape.len() || dims.iter().zip(&shape).any(|(&a, &b)| a != b as u64) {
            return Err(r.fail(
                dims_at,
                format!("tensor `{name}` has dims {dims:?}, config implies {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        params.add(name, Tensor::new(&shape, data)?, decay);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    SentenceEncoder::from_store(config, params)
}
