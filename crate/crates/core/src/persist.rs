//! Checkpoint files for full models and for adapter sets.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order. The header
//! carries a SHA-256 of the payload. Writes go through a temporary file in the
//! destination directory and are renamed into place.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{is_head, Model, ModelConfig, ModelError, HEAD_BIAS, HEAD_WEIGHT};
use crate::lora::{lora_a_name, lora_b_name, LoraAdapter, LoraConfig, LoraError, PeftModel};
use crate::tensor::NdArray;

pub const MAGIC: &[u8; 8] = b"CNXLORA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongKind {
        expected: CheckpointKind,
        found: CheckpointKind,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = PersistError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// byte offset from the start of the payload
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub class_names: Vec<String>,
    pub created_by: String,
    pub tensors: Vec<TensorEntry>,
    /// lowercase hex SHA-256 of the payload
    pub checksum: String,
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|t| t.nbytes).sum()
    }
}

/// A decoded checkpoint: header plus tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: IndexMap<String, NdArray<f32>>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn payload_digest(tensors: &[(String, &NdArray<f32>)]) -> String {
    let mut h = Sha256::new();
    for (_, t) in tensors {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn build_header(
    kind: CheckpointKind,
    model: &ModelConfig,
    lora: Option<&LoraConfig>,
    class_names: &[String],
    tensors: &[(String, &NdArray<f32>)],
) -> Header {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let nbytes = 4 * t.len() as u64;
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    Header {
        format_version: FORMAT_VERSION,
        kind,
        model: model.clone(),
        lora: lora.cloned(),
        class_names: class_names.to_vec(),
        created_by: format!("convnext-lora {}", env!("CARGO_PKG_VERSION")),
        tensors: entries,
        checksum: payload_digest(tensors),
    }
}

/// Streams a checkpoint; returns the number of bytes written.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: CheckpointKind,
    model: &ModelConfig,
    lora: Option<&LoraConfig>,
    class_names: &[String],
    tensors: &[(String, &NdArray<f32>)],
) -> io::Result<u64> {
    let header = build_header(kind, model, lora, class_names, tensors);
    let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, t) in tensors {
        for chunk in t.data().chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(16 + json.len() as u64 + header.payload_len())
}

/// Tensors of a full model, in layout order.
pub fn base_tensors(model: &Model<f32>) -> Vec<(String, &NdArray<f32>)> {
    model.params().iter().map(|(n, p)| (n.clone(), &p.value)).collect()
}

/// Adapter pairs followed by the head.
pub fn adapter_tensors(peft: &PeftModel<f32>) -> Vec<(String, &NdArray<f32>)> {
    let mut out = Vec::new();
    for (layer, ad) in peft.adapters() {
        out.push((lora_a_name(layer), &ad.a));
        out.push((lora_b_name(layer), &ad.b));
    }
    for name in [HEAD_WEIGHT, HEAD_BIAS] {
        out.push((name.to_string(), peft.base().param(name).expect("models always have a head")));
    }
    out
}

pub fn write_model<W: Write>(w: W, model: &Model<f32>, class_names: &[String]) -> io::Result<u64> {
    write_checkpoint(w, CheckpointKind::Base, model.config(), None, class_names, &base_tensors(model))
}

pub fn write_adapter<W: Write>(w: W, peft: &PeftModel<f32>, class_names: &[String]) -> io::Result<u64> {
    write_checkpoint(
        w,
        CheckpointKind::Adapter,
        peft.model_config(),
        Some(peft.config()),
        class_names,
        &adapter_tensors(peft),
    )
}

fn atomic_write(path: &Path, f: impl FnOnce(&mut BufWriter<&mut fs::File>) -> io::Result<u64>) -> Result<u64> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    let n = {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w).map_err(io_err(path))?
    };
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PersistError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(n)
}

/// Writes a full-model checkpoint; returns its size in bytes.
pub fn save_model(model: &Model<f32>, class_names: &[String], path: &Path) -> Result<u64> {
    atomic_write(path, |w| write_model(w, model, class_names))
}

/// Writes only the adapters and the head; returns the size in bytes.
pub fn save_adapter(peft: &PeftModel<f32>, class_names: &[String], path: &Path) -> Result<u64> {
    atomic_write(path, |w| write_adapter(w, peft, class_names))
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 {
        return Err(PersistError::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(PersistError::Truncated {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = 16u64.saturating_add(len);
    if (bytes.len() as u64) < end {
        return Err(PersistError::Truncated {
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    let end = end as usize;
    // the version is checked before the full schema so newer files get a clear error
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| PersistError::Header(e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| PersistError::Header(e.to_string()))?;
    let mut expect = 0;
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        if t.dtype != "f32" || t.offset != expect || t.nbytes != 4 * numel as u64 {
            return Err(PersistError::Header(format!("bad index entry for `{}`", t.name)));
        }
        expect += t.nbytes;
    }
    Ok((header, end))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    let need = header.payload_len();
    if (payload.len() as u64) < need {
        return Err(PersistError::Truncated {
            expected: start as u64 + need,
            actual: bytes.len() as u64,
        });
    }
    if payload.len() as u64 > need {
        return Err(PersistError::Header(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - need
        )));
    }
    let digest: String = Sha256::digest(payload).iter().map(|b| format!("{b:02x}")).collect();
    if digest != header.checksum {
        return Err(PersistError::Checksum);
    }
    let mut tensors = IndexMap::new();
    for t in &header.tensors {
        let raw = &payload[t.offset as usize..(t.offset + t.nbytes) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = NdArray::new(t.shape.clone(), data).map_err(|e| PersistError::Header(e.to_string()))?;
        if tensors.insert(t.name.clone(), arr).is_some() {
            return Err(PersistError::Header(format!("duplicate tensor `{}`", t.name)));
        }
    }
    Ok(Checkpoint { header, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}

/// Header only; the payload is not verified.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(parse_header(&bytes)?.0)
}

fn expect_kind(h: &Header, kind: CheckpointKind) -> Result<()> {
    if h.kind != kind {
        return Err(PersistError::WrongKind {
            expected: kind,
            found: h.kind,
        });
    }
    Ok(())
}

impl Checkpoint {
    pub fn into_model(self) -> Result<(Model<f32>, Vec<String>)> {
        expect_kind(&self.header, CheckpointKind::Base)?;
        let model = Model::from_tensors(&self.header.model, self.tensors)?;
        Ok((model, self.header.class_names))
    }

    /// Attaches the stored adapters and head to `base`, whose backbone must
    /// match the one the adapters were trained on.
    pub fn into_peft(mut self, mut base: Model<f32>) -> Result<(PeftModel<f32>, Vec<String>)> {
        expect_kind(&self.header, CheckpointKind::Adapter)?;
        let h = &self.header;
        let lora = h
            .lora
            .clone()
            .ok_or_else(|| PersistError::Header("adapter checkpoint without LoRA config".into()))?;
        if !base.config().same_backbone(&h.model) {
            return Err(PersistError::Incompatible(format!(
                "adapters expect depths {:?} dims {:?} at {}px, base has depths {:?} dims {:?} at {}px",
                h.model.depths,
                h.model.dims,
                h.model.image_size,
                base.config().depths,
                base.config().dims,
                base.config().image_size
            )));
        }
        if let Some(bad) = self
            .tensors
            .keys()
            .find(|n| !(is_head(n) || n.ends_with(".lora_a") || n.ends_with(".lora_b")))
        {
            return Err(PersistError::Header(format!("unexpected tensor `{bad}` in adapter checkpoint")));
        }
        base.reset_head(h.model.num_classes, 0)?;
        for name in [HEAD_WEIGHT, HEAD_BIAS] {
            let t = self
                .tensors
                .shift_remove(name)
                .ok_or_else(|| PersistError::Header(format!("missing `{name}`")))?;
            let dst = base.param_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(PersistError::Incompatible(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
        }
        let mut adapters = IndexMap::new();
        for (name, a) in &self.tensors {
            let Some(layer) = name.strip_suffix(".lora_a") else {
                continue;
            };
            let b = self
                .tensors
                .get(&lora_b_name(layer))
                .ok_or_else(|| PersistError::Header(format!("`{name}` has no matching B")))?;
            adapters.insert(
                layer.to_string(),
                LoraAdapter {
                    a: a.clone(),
                    b: b.clone(),
                    rank: lora.rank,
                    alpha: lora.alpha,
                    dropout_p: lora.dropout,
                    target: layer.to_string(),
                },
            );
        }
        let classes = self.header.class_names;
        let peft = PeftModel::from_parts(base, lora, adapters).map_err(|e| match e {
            LoraError::Model(m) => PersistError::Model(m),
            other => PersistError::Incompatible(other.to_string()),
        })?;
        Ok((peft, classes))
    }
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, Vec<String>)> {
    read_checkpoint(path)?.into_model()
}

pub fn load_adapter(path: &Path, base: Model<f32>) -> Result<(PeftModel<f32>, Vec<String>)> {
    read_checkpoint(path)?.into_peft(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = Model::<f32>::build(&ModelConfig::toy(3), 4).unwrap();
        let mut bytes = Vec::new();
        let n = write_model(&mut bytes, &m, &names(3)).unwrap();
        assert_eq!(n, bytes.len() as u64);
        let (back, classes) = decode_checkpoint(&bytes).unwrap().into_model().unwrap();
        assert_eq!(classes, names(3));
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&mut again, &back, &classes).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let m = Model::<f32>::build(&ModelConfig::toy(2), 0).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m, &names(2)).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bad), Err(PersistError::Checksum)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(PersistError::Truncated { .. })
        ));
        assert!(matches!(decode_checkpoint(&bytes[..12]), Err(PersistError::Truncated { .. })));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(PersistError::BadMagic)));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let m = Model::<f32>::build(&ModelConfig::toy(2), 0).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m, &names(2)).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert!(matches!(ck.into_peft(m), Err(PersistError::WrongKind { .. })));
    }

    #[test]
    fn future_versions_are_rejected() {
        let m = Model::<f32>::build(&ModelConfig::toy(2), 0).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &m, &names(2)).unwrap();
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let pos = text.find("\"format_version\":1").unwrap();
        bytes[16 + pos + 17] = b'9';
        assert!(matches!(decode_checkpoint(&bytes), Err(PersistError::UnsupportedVersion(9))));
    }
}
