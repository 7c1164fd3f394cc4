//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE schema version, `u64` LE manifest length,
//! the JSON manifest, then the raw little-endian payload. Every tensor entry
//! in the manifest records its offset and length (in elements) within the
//! payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{numel, Tensor};
use crate::train_eval::OptimizerState;

pub const MAGIC: &[u8; 8] = b"CNTNCKPT";
pub const SCHEMA_VERSION: u32 = 1;

/// Payload element type. `F64` round-trips bitwise; `F32` halves the size at
/// the cost of rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub step: usize,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<OptimizerState>, step: usize) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params.clone(),
            optimizer,
            step,
        }
    }

    /// Rebuilds the model, checking names and shapes against the stored config.
    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.config, self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    dtype: Dtype,
    step: usize,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerManifest>,
}

struct PayloadWriter {
    dtype: Dtype,
    bytes: Vec<u8>,
    offset: usize,
}

impl PayloadWriter {
    fn push(&mut self, name: &str, kind: ParamKind, t: &Tensor) -> TensorEntry {
        for &v in t.data() {
            match self.dtype {
                Dtype::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        let e = TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: self.offset,
            len: t.numel(),
        };
        self.offset += t.numel();
        e
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    let mut w = PayloadWriter {
        dtype,
        bytes: Vec::new(),
        offset: 0,
    };
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, e)| w.push(name, e.kind, &e.tensor))
        .collect();
    let optimizer = ckpt.optimizer.as_ref().map(|o| OptimizerManifest {
        step: o.step,
        m: o.m.iter().map(|(n, t)| w.push(n, ParamKind::Buffer, t)).collect(),
        v: o.v.iter().map(|(n, t)| w.push(n, ParamKind::Buffer, t)).collect(),
    });
    let manifest = Manifest {
        schema: SCHEMA_VERSION,
        dtype,
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&manifest)?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&SCHEMA_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&w.bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_tensor(payload: &[u8], dtype: Dtype, e: &TensorEntry) -> Result<Tensor> {
    if numel(&e.shape) != e.len {
        return Err(corrupt(format!("`{}`: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
    }
    let wd = dtype.width();
    let start = e.offset.checked_mul(wd).ok_or_else(|| corrupt("offset overflow"))?;
    let end = start + e.len * wd;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| corrupt(format!("`{}` extends past the end of the payload", e.name)))?;
    let data = match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    };
    Tensor::new(e.shape.clone(), data)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(mlen))
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.schema != version {
        return Err(corrupt("header and manifest disagree on the schema version"));
    }
    let payload = &bytes[20 + mlen..];
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum::<usize>()
        + manifest
            .optimizer
            .as_ref()
            .map_or(0, |o| o.m.iter().chain(&o.v).map(|t| t.len).sum());
    if payload.len() != total * manifest.dtype.width() {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            total * manifest.dtype.width()
        )));
    }

    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        params.insert(e.name.clone(), read_tensor(payload, manifest.dtype, e)?, e.kind);
    }
    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let read = |list: &[TensorEntry]| -> Result<_> {
                list.iter()
                    .map(|e| Ok((e.name.clone(), read_tensor(payload, manifest.dtype, e)?)))
                    .collect()
            };
            Some(OptimizerState {
                step: o.step,
                m: read(&o.m)?,
                v: read(&o.v)?,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        config: manifest.config,
        params,
        optimizer,
        step: manifest.step,
    })
}

/// Loads parameters for a model built from `config`, failing with a shape
/// mismatch when the checkpoint was produced under different dimensions.
pub fn load_into(path: &Path, config: &ModelConfig) -> Result<Model> {
    let ckpt = load_checkpoint(path)?;
    Model::from_params(config.clone(), ckpt.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn model() -> Model {
        Model::new(ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let opt = OptimizerState {
            step: 3,
            m: BTreeMap::from([("a".to_string(), Tensor::full(&[2], 0.1))]),
            v: BTreeMap::from([("a".to_string(), Tensor::full(&[2], 1.0 / 3.0))]),
        };
        save_checkpoint(&path, &Checkpoint::from_model(&m, Some(opt.clone()), 42), Dtype::F64).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, *m.config());
        assert_eq!(back.step, 42);
        assert_eq!(back.optimizer, Some(opt));
        for (name, e) in m.params.iter() {
            let got = back.params.entry(name).unwrap();
            assert_eq!(got.kind, e.kind);
            let a: Vec<u64> = e.tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = got.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        assert!(back.into_model().is_ok());
    }

    #[test]
    fn f32_payload_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &Checkpoint::from_model(&m, None, 0), Dtype::F32).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (name, e) in m.params.iter() {
            let got = &back.params.entry(name).unwrap().tensor;
            for (a, b) in e.tensor.data().iter().zip(got.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Checkpoint::from_model(&model(), None, 0), Dtype::F64).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [5, 30, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Checkpoint::from_model(&model(), None, 0), Dtype::F64).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn wider_config_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Checkpoint::from_model(&model(), None, 0), Dtype::F64).unwrap();
        let wide = ModelConfig {
            channels: 16,
            backbone_widths: vec![8, 8, 8, 16],
            ..ModelConfig::tiny()
        };
        assert!(matches!(load_into(&path, &wide), Err(Error::ParamShapeMismatch { .. })));
    }
}
