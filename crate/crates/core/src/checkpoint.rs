//! Binary container shared by checkpoints and dataset caches.
//!
//! Layout: the magic bytes `HASS`, a little-endian `u32` version, a
//! little-endian `u32` header length, the JSON header, then raw
//! little-endian tensor payloads in header order. The header lists each
//! tensor's name, dtype (`f32` or `u32`), shape and byte offset into the
//! payload section.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Result};
use crate::model::{DraftHead, ModelConfig, TargetModel};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HASS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U32(_) => "u32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorInfo>,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self { kind: kind.to_string(), meta, entries: Vec::new() }
    }

    pub fn push_f32(&mut self, name: &str, t: &Tensor<f32>) {
        self.entries.push(Entry { name: name.into(), shape: t.shape().to_vec(), payload: Payload::F32(t.data().to_vec()) });
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        self.entries.push(Entry { name: name.into(), shape: shape.to_vec(), payload: Payload::U32(data) });
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        match self.entries.iter().find(|e| e.name == name) {
            Some(e) => Ok(e),
            None => bail!(Format, "container has no tensor named {name}"),
        }
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::F32(v) => Tensor::new(e.shape.clone(), v.clone()),
            Payload::U32(_) => bail!(Format, "tensor {name} is u32, expected f32"),
        }
    }

    pub fn u32_data(&self, name: &str) -> Result<&[u32]> {
        match &self.get(name)?.payload {
            Payload::U32(v) => Ok(v),
            Payload::F32(_) => bail!(Format, "tensor {name} is f32, expected u32"),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.payload.len() {
                bail!(Shape, "tensor {} has shape {:?} but {} elements", e.name, e.shape, e.payload.len());
            }
            tensors.push(TensorInfo { name: e.name.clone(), dtype: e.payload.dtype().into(), shape: e.shape.clone(), offset });
            offset += 4 * e.payload.len();
        }
        let header = serde_json::to_vec(&Header { kind: self.kind.clone(), meta: self.meta.clone(), tensors })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses a whole container; nothing is returned unless every tensor
    /// is present and complete.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            bail!(Format, "missing HASS magic");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            bail!(Format, "unsupported container version {version}");
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let Some(header_bytes) = bytes.get(12..12 + hlen) else {
            bail!(Format, "truncated header");
        };
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| crate::HassError::Format(format!("bad header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != expected_offset {
                bail!(Format, "tensor {} at offset {} (expected {})", t.name, t.offset, expected_offset);
            }
            let Some(raw) = payload.get(t.offset..t.offset + 4 * n) else {
                bail!(Format, "tensor {} is truncated", t.name);
            };
            expected_offset += 4 * n;
            let words = raw.chunks_exact(4).map(|c| c.try_into().expect("4 bytes"));
            let payload = match t.dtype.as_str() {
                "f32" => Payload::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => Payload::U32(words.map(u32::from_le_bytes).collect()),
                other => bail!(Format, "tensor {} has unknown dtype {other}", t.name),
            };
            entries.push(Entry { name: t.name, shape: t.shape, payload });
        }
        if payload.len() != expected_offset {
            bail!(Format, "{} trailing payload bytes", payload.len() - expected_offset);
        }
        Ok(Self { kind: header.kind, meta: header.meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Header metadata of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default)]
    pub train_embedding: bool,
    /// Free-form provenance (training configuration, loss summary).
    #[serde(default)]
    pub extra: Value,
}

pub const TARGET_KIND: &str = "target";
pub const DRAFT_KIND: &str = "draft";

pub fn target_container(model: &TargetModel<f32>, seed: u64, extra: Value) -> Result<Container> {
    let meta = CheckpointMeta { config: model.config().clone(), seed, train_embedding: false, extra };
    let mut c = Container::new(TARGET_KIND, serde_json::to_value(meta)?);
    for (name, p) in model.named_params() {
        c.push_f32(&name, p);
    }
    Ok(c)
}

pub fn save_target(model: &TargetModel<f32>, seed: u64, extra: Value, path: &Path) -> Result<()> {
    target_container(model, seed, extra)?.save(path)
}

fn meta_of(c: &Container, kind: &str) -> Result<CheckpointMeta> {
    if c.kind != kind {
        bail!(Load, "expected a {kind} checkpoint, found {}", c.kind);
    }
    serde_json::from_value(c.meta.clone()).map_err(|e| crate::HassError::Load(format!("bad checkpoint header: {e}")))
}

pub fn target_from_container(c: &Container) -> Result<(TargetModel<f32>, CheckpointMeta)> {
    let meta = meta_of(c, TARGET_KIND)?;
    let params = TargetModel::<f32>::param_names(&meta.config)
        .iter()
        .map(|n| c.f32_tensor(n).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok((TargetModel::from_params(meta.config.clone(), params)?, meta))
}

pub fn load_target(path: &Path) -> Result<(TargetModel<f32>, CheckpointMeta)> {
    target_from_container(&Container::load(path)?)
}

pub fn draft_container(head: &DraftHead<f32>, seed: u64, extra: Value) -> Result<Container> {
    let meta = CheckpointMeta { config: head.config().clone(), seed, train_embedding: head.train_embedding(), extra };
    let mut c = Container::new(DRAFT_KIND, serde_json::to_value(meta)?);
    for (name, p) in head.named_params() {
        c.push_f32(&name, p);
    }
    Ok(c)
}

pub fn save_draft(head: &DraftHead<f32>, seed: u64, extra: Value, path: &Path) -> Result<()> {
    draft_container(head, seed, extra)?.save(path)
}

/// Loads a draft head onto `target`; the vocabulary and width must match.
pub fn draft_from_container(c: &Container, target: &TargetModel<f32>) -> Result<(DraftHead<f32>, CheckpointMeta)> {
    let meta = meta_of(c, DRAFT_KIND)?;
    let tc = target.config();
    if meta.config.vocab_size != tc.vocab_size || meta.config.d_model != tc.d_model {
        bail!(
            Load,
            "draft head (vocab {}, d_model {}) does not fit target (vocab {}, d_model {})",
            meta.config.vocab_size,
            meta.config.d_model,
            tc.vocab_size,
            tc.d_model
        );
    }
    if meta.config != *tc {
        bail!(Load, "draft head was trained against a different target configuration");
    }
    let params = DraftHead::<f32>::param_names(meta.train_embedding)
        .iter()
        .map(|n| c.f32_tensor(n).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok((DraftHead::from_params(target, params, meta.train_embedding)?, meta))
}

pub fn load_draft(path: &Path, target: &TargetModel<f32>) -> Result<(DraftHead<f32>, CheckpointMeta)> {
    draft_from_container(&Container::load(path)?, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 7, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, max_seq_len: 16, rms_norm_eps: 1e-5 }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let t = TargetModel::<f32>::new(tiny(), &mut Rng::new(3)).unwrap();
        let a = dir.path().join("a.ckpt");
        save_target(&t, 3, serde_json::json!({"note": 1}), &a).unwrap();
        let (t2, meta) = load_target(&a).unwrap();
        assert_eq!(meta.config, tiny());
        assert_eq!(meta.seed, 3);
        let b = dir.path().join("b.ckpt");
        save_target(&t2, meta.seed, meta.extra, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        for (p, q) in t.params().iter().zip(t2.params()) {
            assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let d = DraftHead::new(&t2, &mut Rng::new(4));
        let c = dir.path().join("d.ckpt");
        save_draft(&d, 4, Value::Null, &c).unwrap();
        let (d2, _) = load_draft(&c, &t2).unwrap();
        assert!(d2.shares_weights_with(&t2));
        assert_eq!(*d2.fuse_w, *d.fuse_w);
    }

    #[test]
    fn header_echoes_the_config() {
        let t = TargetModel::<f32>::new(tiny(), &mut Rng::new(3)).unwrap();
        let c = Container::from_bytes(&target_container(&t, 0, Value::Null).unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(c.meta["config"], serde_json::to_value(tiny()).unwrap());
    }

    #[test]
    fn truncated_or_foreign_files_are_format_errors() {
        let t = TargetModel::<f32>::new(tiny(), &mut Rng::new(3)).unwrap();
        let bytes = target_container(&t, 0, Value::Null).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 11, 40, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(crate::HassError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(crate::HassError::Format(_))));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(Container::from_bytes(&bad), Err(crate::HassError::Format(_))));
    }

    #[test]
    fn mismatched_draft_is_a_load_error() {
        let t = TargetModel::<f32>::new(tiny(), &mut Rng::new(3)).unwrap();
        let d = DraftHead::new(&t, &mut Rng::new(4));
        let c = draft_container(&d, 0, Value::Null).unwrap();
        let other = TargetModel::<f32>::new(ModelConfig { vocab_size: 9, ..tiny() }, &mut Rng::new(3)).unwrap();
        assert!(matches!(draft_from_container(&c, &other), Err(crate::HassError::Load(_))));
        assert!(matches!(target_from_container(&c), Err(crate::HassError::Load(_))));
    }
}
