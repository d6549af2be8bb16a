//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "FPEFTCKP"
//! version     u32      = 1
//! header_len  u32
//! header      header_len bytes of UTF-8 JSON (CheckpointHeader)
//! entries     u32
//! per entry:
//!   name_len  u16, name (UTF-8)
//!   role      u8   0 backbone-weight, 1 backbone-bias, 2 head, 3 adapter, 4 prompt
//!   flags     u8   bit 0 trainable, bit 1 transmitted
//!   ndim      u8,  dims u32 × ndim
//!   data      numel × width bytes, width from header.precision (4 or 8)
//! ```
//!
//! See `docs/checkpoint-format.md` for the full description.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GlobalModel, ModelSpec, ParamEntry, ParameterRegistry, Role};
use crate::error::{Error, Result};
use crate::peft::TuningMode;
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"FPEFTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    spec: ModelSpec,
    mode: Option<TuningMode>,
    meta: CheckpointMeta,
}

pub fn to_bytes<T: Real>(model: &GlobalModel<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        precision: T::PRECISION,
        spec: model.spec().clone(),
        mode: model.mode().copied(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.registry().len() as u32).to_le_bytes());
    for (e, w) in model.registry().entries().iter().zip(model.weights()) {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.role.code());
        out.push(u8::from(e.trainable) | (u8::from(e.transmitted) << 1));
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in w.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            location: format!("byte {}", self.pos),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if the precision differs.
pub fn from_bytes<T: Real>(bytes: &[u8], source: &str) -> Result<(GlobalModel<T>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(8)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(format!("bad header: {e}")))?;

    // Rebuild the expected registry and check the stored one against it.
    let mut expected = ParameterRegistry::for_spec(&header.spec)?;
    if let Some(mode) = &header.mode {
        expected.apply_mode(&header.spec, mode)?;
    }
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.err(format!("{count} entries, spec implies {}", expected.len())));
    }
    let width = header.precision.byte_width();
    let mut entries = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for want in expected.entries() {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| r.err("entry name is not UTF-8"))?
            .to_string();
        let role = Role::from_code(r.u8()?).ok_or_else(|| r.err("unknown role code"))?;
        let flags = r.u8()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let entry = ParamEntry {
            name,
            shape,
            role,
            trainable: flags & 1 != 0,
            transmitted: flags & 2 != 0,
        };
        if entry.name != want.name || entry.shape != want.shape || entry.role != want.role {
            return Err(r.err(format!("entry {} does not match the model spec ({})", entry.name, want.name)));
        }
        if entry.transmitted && !entry.trainable {
            return Err(r.err(format!("{} is transmitted but frozen", entry.name)));
        }
        let raw = r.take(entry.numel() * width)?;
        let data: Vec<T> = match header.precision {
            Precision::F32 => raw.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect(),
            Precision::F64 => raw.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect(),
        };
        weights.push(Tensor::new(entry.shape.clone(), data)?);
        entries.push(entry);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last entry"));
    }
    let mut registry = ParameterRegistry::default();
    for e in entries {
        registry.push(e)?;
    }
    let model = GlobalModel::from_parts(header.spec, registry, weights, header.mode)?;
    Ok((model, header.meta))
}

pub fn save<T: Real>(model: &GlobalModel<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(GlobalModel<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}

/// SHA-256 of the serialised checkpoint, hex encoded.
pub fn content_hash<T: Real>(model: &GlobalModel<T>, meta: &CheckpointMeta) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(model, meta)?)))
}
