//! Model files: magic bytes, a length-prefixed JSON manifest, then raw
//! little-endian f32 arrays in manifest order.
//!
//! With frozen embeddings the embedding table is not written; it is rebuilt
//! from the store and the saved lexicon on load.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
use crate::model::{ErModel, ModelConfig, ModelError};

pub const MAGIC: &[u8; 7] = b"DEEPER1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error(
        "embedding fingerprint mismatch: model was trained with {expected:016x}, store is {found:016x} (use force to load anyway)"
    )]
    Fingerprint { expected: u64, found: u64 },
    #[error("array `{name}`: {msg}")]
    Array { name: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub ngram: NgramHashConfig,
    pub schema: Vec<String>,
    pub embedding_fingerprint: u64,
    pub lexicon: Vec<String>,
    pub arrays: Vec<ArrayEntry>,
    /// Free-form training metadata (epoch, dev scores).
    #[serde(default)]
    pub training: serde_json::Value,
}

impl Manifest {
    pub fn of(model: &ErModel, training: serde_json::Value) -> Self {
        let arrays = model
            .params()
            .iter()
            .filter(|(id, p)| *id != model.ids().embedding || p.requires_grad)
            .map(|(_, p)| ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            tokenizer: *model.tokenizer(),
            ngram: *model.store().ngram_config(),
            schema: model.schema.clone(),
            embedding_fingerprint: model.store().fingerprint(),
            lexicon: model.lexicon().tokens().to_vec(),
            arrays,
            training,
        }
    }
}

pub fn save(model: &ErModel, path: impl AsRef<Path>, training: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest::of(model, training);
    let json = serde_json::to_vec(&manifest).expect("serializable");
    let mut out = Vec::with_capacity(json.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for entry in &manifest.arrays {
        let id = model.params().id(&entry.name).expect("listed from the store");
        for &x in model.params().get(id).value.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Vec<u8>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Manifest("length exceeds file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    Ok((manifest, bytes.split_off(end)))
}

/// Loads a model against `store`. A store whose fingerprint differs from the
/// one recorded at save time is refused unless `force` is set.
/// `preferred` when its fingerprint matches the manifest, otherwise a
/// hashed-only store of the manifest's dimension and n-gram settings.
pub fn store_for(manifest: &Manifest, preferred: Option<Arc<EmbeddingStore>>) -> Arc<EmbeddingStore> {
    match preferred {
        Some(s) if s.fingerprint() == manifest.embedding_fingerprint => s,
        _ => Arc::new(EmbeddingStore::hashed_only(manifest.config.embedding_dim, manifest.ngram)),
    }
}

pub fn load(path: impl AsRef<Path>, store: Arc<EmbeddingStore>, force: bool) -> Result<(ErModel, Manifest)> {
    let (manifest, payload) = read_manifest(path)?;
    if store.fingerprint() != manifest.embedding_fingerprint {
        let err = CheckpointError::Fingerprint {
            expected: manifest.embedding_fingerprint,
            found: store.fingerprint(),
        };
        if !force {
            return Err(err);
        }
        warn!("{err}; loading anyway");
    }
    let mut model = ErModel::new(manifest.config.clone(), manifest.tokenizer, store)?;
    model.intern_tokens(manifest.lexicon.iter().map(String::as_str));
    model.schema = manifest.schema.clone();

    let mut offset = 0;
    for entry in &manifest.arrays {
        let array_err = |msg: String| CheckpointError::Array {
            name: entry.name.clone(),
            msg,
        };
        let id = model
            .params()
            .id(&entry.name)
            .ok_or_else(|| array_err("not a parameter of this model".into()))?;
        let expected = model.params().get(id).value.shape().to_vec();
        if expected != entry.shape {
            return Err(array_err(format!("shape {:?}, model expects {:?}", entry.shape, expected)));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| array_err("truncated file".into()))?;
        offset += 4 * n;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        model.params_mut().get_mut(id).value =
            Tensor::new(entry.shape.clone(), data).map_err(|e| array_err(e.to_string()))?;
    }
    if offset != payload.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing bytes after arrays",
            payload.len() - offset
        )));
    }
    Ok((model, manifest))
}
