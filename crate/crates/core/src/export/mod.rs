//! Frozen model files (`KDFZ`) and tape-free inference.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KDFZ" | version u32 | model type u8 | header len u32 | header (JSON spec)
//! blob count u32
//! per blob: name len u16 | name | dtype u8 | ndim u8 | dims u32[ndim] | data
//! crc32 of everything above
//! ```
//!
//! int8 blob data starts with its f32 scale `max|w| / 127`.

mod infer;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub use infer::{FrozenNet, Scratch};

pub const MAGIC: &[u8; 4] = b"KDFZ";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F16,
    Int8,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::F32, Precision::F16, Precision::Int8];

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::Int8 => "int8",
        }
    }

    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F16 => 1,
            Precision::Int8 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Precision::ALL.into_iter().find(|p| p.code() == code)
    }

    /// Encoded data bytes for `n` values.
    fn data_len(self, n: usize) -> usize {
        match self {
            Precision::F32 => 4 * n,
            Precision::F16 => 2 * n,
            Precision::Int8 => 4 + n,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown precision `{s}` (expected f32, f16 or int8)")))
    }
}

fn type_code(spec: &ModelSpec) -> u8 {
    match spec {
        ModelSpec::Transformer(_) => 0,
        ModelSpec::Bilstm(_) => 1,
        ModelSpec::Cnn(_) => 2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Int8 { scale: f32, values: Vec<i8> },
}

impl BlobData {
    pub fn encode(values: &[f32], precision: Precision) -> Self {
        match precision {
            Precision::F32 => BlobData::F32(values.to_vec()),
            Precision::F16 => BlobData::F16(values.iter().map(|&v| f16::from_f32(v)).collect()),
            Precision::Int8 => {
                let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let scale = max / 127.0;
                let values = values
                    .iter()
                    .map(|&v| if scale > 0.0 { (v / scale).round().clamp(-127.0, 127.0) as i8 } else { 0 })
                    .collect();
                BlobData::Int8 { scale, values }
            }
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            BlobData::F32(_) => Precision::F32,
            BlobData::F16(_) => Precision::F16,
            BlobData::Int8 { .. } => Precision::Int8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F16(v) => v.len(),
            BlobData::Int8 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dequantize(&self) -> Vec<f32> {
        match self {
            BlobData::F32(v) => v.clone(),
            BlobData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            BlobData::Int8 { scale, values } => values.iter().map(|&q| q as f32 * scale).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: BlobData,
}

/// A decoded frozen file: spec header plus named weight blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    spec: ModelSpec,
    blobs: Vec<Blob>,
    checksum: u32,
}

impl FrozenModel {
    /// Every parameter is stored at `precision`.
    pub fn from_model(model: &Model, precision: Precision) -> Result<Self> {
        let blobs = model
            .params()
            .iter()
            .map(|(name, t)| Blob {
                name: name.to_string(),
                dims: t.shape().to_vec(),
                data: BlobData::encode(t.data(), precision),
            })
            .collect();
        let mut out = FrozenModel {
            spec: model.spec().clone(),
            blobs,
            checksum: 0,
        };
        let bytes = out.encode_body()?;
        out.checksum = crc32fast::hash(&bytes);
        Ok(out)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    /// Precision of the weight blobs (the first one, as all are written alike).
    pub fn precision(&self) -> Precision {
        self.blobs.first().map_or(Precision::F32, |b| b.data.precision())
    }

    pub fn parameter_count(&self) -> usize {
        self.blobs.iter().map(|b| b.data.len()).sum()
    }

    /// Dequantized live model.
    pub fn to_model(&self) -> Result<Model> {
        let entries = self
            .blobs
            .iter()
            .map(|b| Ok((b.name.clone(), Tensor::new(b.dims.clone(), b.data.dequantize())?)))
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(self.spec.clone(), ParamSet::new(entries)?)
    }

    /// Tape-free inference engine over the dequantized weights.
    pub fn net(&self) -> Result<FrozenNet> {
        FrozenNet::new(&self.to_model()?)
    }

    fn encode_body(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.spec).map_err(|e| Error::Contract(format!("spec header: {e}")))?;
        let mut out = Vec::with_capacity(encoded_len(&self.spec, self.precision()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(type_code(&self.spec));
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            let name = b.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("blob name `{}` too long", b.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(b.data.precision().code());
            out.push(u8::try_from(b.dims.len()).map_err(|_| Error::Contract(format!("blob `{}` has too many dims", b.name)))?);
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::Int8 { scale, values } => {
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend(values.iter().map(|&q| q as u8));
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.encode_body()?;
        out.extend_from_slice(&crc32fast::hash(&out).to_le_bytes());
        Ok(out)
    }

    /// Decode and validate. The checksum is verified before any blob is
    /// parsed; nothing is returned unless the whole file is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(frozen("magic", "file does not start with KDFZ"));
        }
        if bytes.len() < 8 {
            return Err(frozen("version", "file truncated before version"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(frozen("checksum", "file truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(frozen(
                "checksum",
                format!("stored {stored:08x}, computed {computed:08x} (corrupted or truncated)"),
            ));
        }

        let mut r = Reader { bytes: body, pos: 8 };
        let type_byte = r.u8("model type")?;
        let header_len = r.u32("header length")? as usize;
        let header = r.take(header_len, "header")?;
        let spec: ModelSpec = serde_json::from_slice(header).map_err(|e| frozen("header", e.to_string()))?;
        spec.validate().map_err(|e| frozen("header", e.to_string()))?;
        if type_byte != type_code(&spec) {
            return Err(frozen(
                "model type",
                format!("type byte {type_byte} does not match {} header", spec.family()),
            ));
        }
        let count = r.u32("blob count")? as usize;
        let expected = spec.parameter_shapes();
        if count != expected.len() {
            return Err(frozen("blob count", format!("{count} blobs, spec has {} parameters", expected.len())));
        }
        let mut blobs = Vec::with_capacity(count);
        for (want_name, want_dims) in expected {
            let name_len = r.u16("blob name")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "blob name")?)
                .map_err(|_| frozen("blob name", "not UTF-8"))?
                .to_string();
            if name != want_name {
                return Err(frozen("blob name", format!("expected `{want_name}`, found `{name}`")));
            }
            let dtype = r.u8("blob dtype")?;
            let precision = Precision::from_code(dtype).ok_or_else(|| frozen("blob dtype", format!("unknown dtype {dtype}")))?;
            let ndim = r.u8("blob ndim")? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32("blob dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != want_dims {
                return Err(frozen("blob dims", format!("`{name}` has {dims:?}, spec says {want_dims:?}")));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(precision.data_len(n), "blob data")?;
            let data = match precision {
                Precision::F32 => BlobData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                Precision::F16 => BlobData::F16(raw.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().expect("2"))).collect()),
                Precision::Int8 => BlobData::Int8 {
                    scale: f32::from_le_bytes(raw[..4].try_into().expect("4")),
                    values: raw[4..].iter().map(|&b| b as i8).collect(),
                },
            };
            blobs.push(Blob { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(frozen("length", format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(FrozenModel {
            spec,
            blobs,
            checksum: computed,
        })
    }
}

fn frozen(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Frozen {
        field,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| frozen(field, "file ends early"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

/// Exact file size for `spec` written at `precision`.
pub fn encoded_len(spec: &ModelSpec, precision: Precision) -> usize {
    let header = serde_json::to_vec(spec).map_or(0, |h| h.len());
    let blobs: usize = spec
        .parameter_shapes()
        .iter()
        .map(|(name, dims)| 2 + name.len() + 2 + 4 * dims.len() + precision.data_len(dims.iter().product()))
        .sum();
    4 + 4 + 1 + 4 + header + 4 + blobs + 4
}

pub fn export_frozen(model: &Model, path: &Path, precision: Precision) -> Result<FrozenModel> {
    let frozen = FrozenModel::from_model(model, precision)?;
    fs::write(path, frozen.to_bytes()?).map_err(|e| Error::io(path, e))?;
    Ok(frozen)
}

pub fn load_frozen(path: &Path) -> Result<FrozenModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrozenModel::from_bytes(&bytes)
}
