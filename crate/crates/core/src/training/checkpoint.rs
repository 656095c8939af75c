//! Binary checkpoint layout:
//!
//! ```text
//! b"WVTGCKPT" | header length (u64 LE) | JSON header | f32 LE blob
//! ```
//!
//! The header lists every tensor with its shape and its offset, in
//! elements, into the blob. Parameters and batch-norm buffers share the
//! `params` section; Adam moments, when present, live under `optimizer`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffops::{AdamHyper, AdamState, MomentBuffers, Tensor};
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WVTGCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint tensor layout mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint was written for a different model configuration (hash {found}, expected {expected}); pass --force to override")]
    ConfigMismatch { found: String, expected: String },
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredConfigs {
    pub model: ModelConfig,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub step: u64,
    pub hyper: AdamHyper,
    /// `{param}.m` and `{param}.v` for each parameter, in parameter order.
    pub moments: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub configs: StoredConfigs,
    pub phase: String,
    pub step: u64,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerSection>,
}

/// A decoded checkpoint: header plus one value vector per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Vec<f32>>,
    pub moments: Vec<Vec<f32>>,
}

/// SHA-256 of the model configuration's JSON form, hex encoded.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the raw bytes of every parameter and buffer.
pub fn params_digest(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    for p in model.params().params() {
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    for b in model.params().buffers() {
        for v in b.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    blob: Vec<u8>,
    offset: usize,
}

impl BlobWriter {
    fn push(&mut self, name: String, t: &Tensor<f32>) -> TensorEntry {
        let e = TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: self.offset,
        };
        self.offset += t.len();
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        e
    }
}

/// Serializes the model (and optionally its optimizer) to bytes.
pub fn encode_checkpoint(
    model: &Model<f32>,
    classes: &[String],
    phase: &str,
    step: u64,
    optimizer: Option<&AdamState<f32>>,
) -> Vec<u8> {
    let mut w = BlobWriter {
        blob: Vec::new(),
        offset: 0,
    };
    let mut params = Vec::new();
    for p in model.params().params() {
        params.push(w.push(p.name.clone(), &p.value));
    }
    for b in model.params().buffers() {
        params.push(w.push(b.name.clone(), &b.value));
    }
    let optimizer = optimizer.map(|st| {
        let mut moments = Vec::new();
        for mb in &st.moments {
            moments.push(w.push(format!("{}.m", mb.name), &mb.m));
            moments.push(w.push(format!("{}.v", mb.name), &mb.v));
        }
        OptimizerSection {
            step: st.step,
            hyper: st.hyper,
            moments,
        }
    });
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(model.config()),
        configs: StoredConfigs {
            model: model.config().clone(),
            classes: classes.to_vec(),
        },
        phase: phase.to_string(),
        step,
        params,
        optimizer,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> CheckpointResult<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::CorruptHeader("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::CorruptHeader("header length exceeds file".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(CheckpointError::VersionMismatch {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(CheckpointError::CorruptHeader("no format_version".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let blob = &bytes[end..];
    let mut cursor = 0usize;
    let mut read = |e: &TensorEntry| -> CheckpointResult<Vec<f32>> {
        if e.dtype != "f32" {
            return Err(CheckpointError::ShapeMismatch(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != cursor {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{}: offset {} but the previous tensor ends at {}",
                e.name, e.offset, cursor
            )));
        }
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (cursor * 4, (cursor + n) * 4);
        if hi > blob.len() {
            return Err(CheckpointError::ShapeMismatch(format!("{}: data runs past the end of the file", e.name)));
        }
        cursor += n;
        Ok(blob[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    };
    let params = header.params.iter().map(&mut read).collect::<CheckpointResult<Vec<_>>>()?;
    let moments = match &header.optimizer {
        Some(o) => o.moments.iter().map(&mut read).collect::<CheckpointResult<Vec<_>>>()?,
        None => Vec::new(),
    };
    if cursor * 4 != blob.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "blob holds {} bytes, header describes {}",
            blob.len(),
            cursor * 4
        )));
    }
    Ok(Checkpoint {
        header,
        params,
        moments,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    classes: &[String],
    phase: &str,
    step: u64,
    optimizer: Option<&AdamState<f32>>,
) -> CheckpointResult<()> {
    fs::write(path, encode_checkpoint(model, classes, phase, step, optimizer)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> CheckpointResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Builds a model from the stored configuration and loads its values.
    pub fn to_model(&self) -> CheckpointResult<Model<f32>> {
        let mut model = Model::new(self.header.configs.model.clone(), 0)
            .map_err(|e| CheckpointError::CorruptHeader(format!("stored model config: {e}")))?;
        self.apply(&mut model, false)?;
        Ok(model)
    }

    /// Copies stored values into `model`. Refuses a different model
    /// configuration unless `force`; names and shapes must match either way.
    pub fn apply(&self, model: &mut Model<f32>, force: bool) -> CheckpointResult<()> {
        let expected = config_hash(model.config());
        if !force && self.header.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch {
                found: self.header.config_hash.clone(),
                expected,
            });
        }
        let store = model.params_mut();
        let n_params = store.params().len();
        let n_buffers = store.buffers().len();
        if self.header.params.len() != n_params + n_buffers {
            return Err(CheckpointError::ShapeMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.params.len(),
                n_params + n_buffers
            )));
        }
        let check = |e: &TensorEntry, name: &str, shape: &[usize]| {
            if e.name != name || e.shape != shape {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "checkpoint {} {:?} vs model {} {:?}",
                    e.name, e.shape, name, shape
                )));
            }
            Ok(())
        };
        for (i, p) in store.params().iter().enumerate() {
            check(&self.header.params[i], &p.name, p.value.shape())?;
        }
        for (i, b) in store.buffers().iter().enumerate() {
            check(&self.header.params[n_params + i], &b.name, b.value.shape())?;
        }
        for (p, v) in store.params_mut().iter_mut().zip(&self.params) {
            p.value.data_mut().copy_from_slice(v);
            p.zero_grad();
        }
        for (b, v) in store.buffers_mut().iter_mut().zip(&self.params[n_params..]) {
            b.value.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Rebuilds the stored optimizer state, if any.
    pub fn optimizer(&self) -> CheckpointResult<Option<AdamState<f32>>> {
        let Some(section) = &self.header.optimizer else {
            return Ok(None);
        };
        if section.moments.len() % 2 != 0 {
            return Err(CheckpointError::ShapeMismatch("moments must come in m/v pairs".into()));
        }
        let mut moments = Vec::with_capacity(section.moments.len() / 2);
        for (pair, vals) in section.moments.chunks(2).zip(self.moments.chunks(2)) {
            let name = pair[0]
                .name
                .strip_suffix(".m")
                .ok_or_else(|| CheckpointError::ShapeMismatch(format!("unexpected moment {}", pair[0].name)))?;
            let to_tensor = |e: &TensorEntry, v: &Vec<f32>| {
                Tensor::from_vec(&e.shape, v.clone()).map_err(|err| CheckpointError::ShapeMismatch(err.to_string()))
            };
            moments.push(MomentBuffers {
                name: name.to_string(),
                m: to_tensor(&pair[0], &vals[0])?,
                v: to_tensor(&pair[1], &vals[1])?,
            });
        }
        Ok(Some(AdamState {
            hyper: section.hyper,
            step: section.step,
            moments,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk(3);
        cfg.clip_len = 512;
        cfg.frontend.width_scale = 0.125;
        cfg.backend.width_scale = 1.0 / 64.0;
        cfg.attention.hidden = 8;
        cfg
    }

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let mut opt = AdamState::default();
        opt.step = 4;
        opt.moments = m
            .params()
            .params()
            .iter()
            .map(|p| MomentBuffers {
                name: p.name.clone(),
                m: p.value.map(|v| v * 0.5),
                v: p.value.map(|v| v * v),
            })
            .collect();
        let a = encode_checkpoint(&m, &classes(), "phase1", 12, Some(&opt));
        let ck = decode_checkpoint(&a).unwrap();
        let m2 = ck.to_model().unwrap();
        let opt2 = ck.optimizer().unwrap().unwrap();
        let b = encode_checkpoint(&m2, &classes(), "phase1", 12, Some(&opt2));
        assert_eq!(a, b);
        assert_eq!(params_digest(&m), params_digest(&m2));
    }

    #[test]
    fn tampered_offset_is_a_shape_mismatch() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let mut ck = decode_checkpoint(&encode_checkpoint(&m, &classes(), "p", 0, None)).unwrap();
        ck.header.params[1].offset += 1;
        let json = serde_json::to_vec(&ck.header).unwrap();
        let original = encode_checkpoint(&m, &classes(), "p", 0, None);
        let old_len = u64::from_le_bytes(original[8..16].try_into().unwrap()) as usize;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&original[16 + old_len..]);
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::ShapeMismatch(_))));
    }

    #[test]
    fn errors_are_distinct() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let good = encode_checkpoint(&m, &classes(), "p", 0, None);
        assert!(matches!(decode_checkpoint(&good[..10]), Err(CheckpointError::CorruptHeader(_))));
        let mut garbled = good.clone();
        garbled[17] = b'!';
        assert!(matches!(decode_checkpoint(&garbled), Err(CheckpointError::CorruptHeader(_))));
        let text = String::from_utf8_lossy(&good[16..]).replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut v2 = good[..16].to_vec();
        v2.extend_from_slice(text.as_bytes());
        assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        assert!(matches!(decode_checkpoint(&good[..good.len() - 4]), Err(CheckpointError::ShapeMismatch(_))));
    }

    #[test]
    fn other_width_is_refused() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&m, &classes(), "p", 0, None)).unwrap();
        let mut wide_cfg = tiny();
        wide_cfg.frontend.width_scale = 0.25;
        let mut wide = Model::<f32>::new(wide_cfg, 0).unwrap();
        assert!(matches!(ck.apply(&mut wide, false), Err(CheckpointError::ConfigMismatch { .. })));
        assert!(matches!(ck.apply(&mut wide, true), Err(CheckpointError::ShapeMismatch(_))));
    }
}
