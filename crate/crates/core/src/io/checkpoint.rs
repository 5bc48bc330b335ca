//! Checkpoint container.
//!
//! ```text
//! magic "FCK1" | u32 version | u32 header_len | header (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 ndim | u32 dims[ndim] | f32 data
//! ```
//!
//! The JSON header is `{"kind": "codec" | "vocoder", "config": {...}}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{push_f32s, ByteReader};
use crate::codec::{CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::vocoder::{Vocoder, VocoderConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Codec,
    Vocoder,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::format("checkpoint", format!("header: {e}"))
}

impl Checkpoint {
    fn from_store(kind: ModelKind, config: serde_json::Value, params: &ParamStore) -> Self {
        Self {
            kind,
            config,
            tensors: params
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            config: self.config.clone(),
        })
        .map_err(json_err)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len())
                .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported {
                what: "checkpoint version",
                detail: format!("{version}"),
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(json_err)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", format!("{name}: shape overflows")))?;
            let data = r.f32s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    /// Copies every tensor into `params`, which must hold exactly the same names.
    fn load_into(&self, params: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors stored, model has {}", self.tensors.len(), params.len()),
            ));
        }
        for (name, t) in &self.tensors {
            params
                .set(name, t.clone())
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                "checkpoint",
                format!("holds a {:?} model, expected {:?}", self.kind, kind),
            ));
        }
        Ok(())
    }

    pub fn into_codec(self) -> Result<CodecModel> {
        self.expect_kind(ModelKind::Codec)?;
        let config: CodecConfig = serde_json::from_value(self.config.clone()).map_err(json_err)?;
        let mut model = CodecModel::new(config, 0)?;
        self.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn into_vocoder(self) -> Result<Vocoder> {
        self.expect_kind(ModelKind::Vocoder)?;
        let config: VocoderConfig = serde_json::from_value(self.config.clone()).map_err(json_err)?;
        let mut model = Vocoder::new(config, 0)?;
        self.load_into(&mut model.params)?;
        Ok(model)
    }
}

pub fn save_codec(path: impl AsRef<Path>, model: &CodecModel) -> Result<()> {
    let config = serde_json::to_value(&model.config).map_err(json_err)?;
    let ck = Checkpoint::from_store(ModelKind::Codec, config, &model.params);
    Ok(std::fs::write(path, ck.to_bytes()?)?)
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<CodecModel> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.into_codec()
}

pub fn save_vocoder(path: impl AsRef<Path>, model: &Vocoder) -> Result<()> {
    let config = serde_json::to_value(model.config).map_err(json_err)?;
    let ck = Checkpoint::from_store(ModelKind::Vocoder, config, &model.params);
    Ok(std::fs::write(path, ck.to_bytes()?)?)
}

pub fn load_vocoder(path: impl AsRef<Path>) -> Result<Vocoder> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.into_vocoder()
}
