//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta            key = value document (format, model config, taxonomy digest,
//!                       in-distribution categories, thresholds, free-form extras)
//! <dir>/taxonomy.tsv    taxonomy document
//! <dir>/tensors/<name>  one tensor per parameter
//! ```
//!
//! Tensor files: magic `HOTTNSR1`, `u32` rank, `rank` x `u64` dims, then
//! row-major little-endian `f32` values.

use crate::autograd::Matrix;
use crate::kv::{KvDoc, KvError};
use crate::model::{ModelConfig, ModelError, ModelState};
use crate::taxonomy::{Taxonomy, TaxonomyError};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const TENSOR_MAGIC: &[u8; 8] = b"HOTTNSR1";
pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta";
pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
const TENSOR_DIR: &str = "tensors";
const MODEL_PREFIX: &str = "model.";
const EXTRA_PREFIX: &str = "extra.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("malformed tensor `{path}`: {reason}")]
    BadTensor { path: PathBuf, reason: String },
    #[error("malformed checkpoint meta: {0}")]
    BadMeta(String),
    #[error("taxonomy digest mismatch: meta says {expected}, file hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Calibrated decision thresholds.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Thresholds {
    pub t_ood: f64,
    /// Distance threshold; absent for variants without prototypes.
    pub t_triage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Taxonomy with in-distribution flags applied.
    pub taxonomy: Taxonomy,
    pub thresholds: Option<Thresholds>,
    /// Free-form metadata (training summary, selection metric, ...).
    pub extra: KvDoc,
}

pub fn write_tensor<W: Write>(mut w: W, m: &Matrix) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&2u32.to_le_bytes())?;
    for d in [m.nrows(), m.ncols()] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    let bad = |reason: &str| CheckpointError::BadTensor {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("missing magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + rank * 8;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + i * 8..20 + i * 8].try_into().expect("8 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count * 4 {
        return Err(bad("payload size disagrees with dims"));
    }
    let values: Vec<f64> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (r, c) = match dims[..] {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => return Err(bad("only rank 1 or 2 supported")),
    };
    Matrix::from_shape_vec((r, c), values).map_err(|e| bad(&e.to_string()))
}

fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(model: ModelState, taxonomy: Taxonomy) -> Self {
        Self {
            model,
            taxonomy,
            thresholds: None,
            extra: KvDoc::new(),
        }
    }

    fn meta(&self) -> KvDoc {
        let mut meta = KvDoc::new();
        meta.set("format_version", FORMAT_VERSION);
        meta.set("taxonomy_digest", digest_bytes(self.taxonomy.to_document().as_bytes()));
        let ids: Vec<String> = self.taxonomy.id_level3().iter().map(|i| i.to_string()).collect();
        meta.set("id_level3", ids.join(","));
        if let Some(t) = self.thresholds {
            meta.set("t_ood", t.t_ood);
            if let Some(tt) = t.t_triage {
                meta.set("t_triage", tt);
            }
        }
        for (k, v) in self.model.config.to_kv().entries() {
            meta.set(&format!("{MODEL_PREFIX}{k}"), v);
        }
        for (k, v) in self.extra.entries() {
            meta.push(&format!("{EXTRA_PREFIX}{k}"), v);
        }
        meta.set("params", self.model.names().join(","));
        meta
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors = dir.join(TENSOR_DIR);
        std::fs::create_dir_all(&tensors)?;
        for (name, value) in self.model.names().iter().zip(self.model.values()) {
            let f = std::fs::File::create(tensors.join(name))?;
            write_tensor(std::io::BufWriter::new(f), value)?;
        }
        std::fs::write(dir.join(TAXONOMY_FILE), self.taxonomy.to_document())?;
        std::fs::write(dir.join(META_FILE), self.meta().render())?;
        Ok(())
    }

    /// Rewrites only the `meta` document (e.g. after calibration).
    pub fn save_meta(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(META_FILE), self.meta().render())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = KvDoc::parse(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let version: u32 = meta.require("format_version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadMeta(format!("unsupported format version {version}")));
        }
        let tax_doc = std::fs::read_to_string(dir.join(TAXONOMY_FILE))?;
        let expected: String = meta.require("taxonomy_digest")?;
        let actual = digest_bytes(tax_doc.as_bytes());
        if expected != actual {
            return Err(CheckpointError::DigestMismatch { expected, actual });
        }
        let mut taxonomy = Taxonomy::parse(&tax_doc)?;
        let ids: BTreeSet<usize> = meta
            .get("id_level3")
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| CheckpointError::BadMeta(format!("bad id_level3 entry `{s}`"))))
            .collect::<Result<_>>()?;
        if ids.iter().any(|&i| i >= taxonomy.level3.len()) {
            return Err(CheckpointError::BadMeta("id_level3 index out of range".into()));
        }
        taxonomy.apply_id_set(&ids);
        let mut model_kv = KvDoc::new();
        let mut extra = KvDoc::new();
        for (k, v) in meta.entries() {
            if let Some(rest) = k.strip_prefix(MODEL_PREFIX) {
                model_kv.set(rest, v);
            } else if let Some(rest) = k.strip_prefix(EXTRA_PREFIX) {
                extra.push(rest, v);
            }
        }
        let config = ModelConfig::from_kv(&model_kv)?;
        let names: Vec<String> = meta
            .require::<String>("params")?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut params = Vec::with_capacity(names.len());
        for n in names {
            let m = read_tensor(&dir.join(TENSOR_DIR).join(&n))?;
            params.push((n, m));
        }
        let model = ModelState::from_parts(config, params);
        let reference = crate::model::init_model(&model.config, 0)?;
        if reference.names() != model.names()
            || reference.values().iter().zip(model.values()).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(CheckpointError::BadMeta("parameter set does not match the model config".into()));
        }
        let thresholds = match meta.get("t_ood") {
            None => None,
            Some(_) => Some(Thresholds {
                t_ood: meta.require("t_ood")?,
                t_triage: meta.get("t_triage").map(|_| meta.require("t_triage")).transpose()?,
            }),
        };
        Ok(Self {
            model,
            taxonomy,
            thresholds,
            extra,
        })
    }

    /// SHA-256 over meta and every tensor file.
    pub fn digest(dir: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(std::fs::read(dir.join(META_FILE))?);
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir.join(TENSOR_DIR))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            h.update(p.file_name().expect("file").as_encoded_bytes());
            h.update(std::fs::read(&p)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 as f64 * 0.25);
        let p = dir.path().join("t");
        write_tensor(std::fs::File::create(&p).unwrap(), &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], TENSOR_MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 16 + 15 * 4);
        assert_eq!(read_tensor(&p).unwrap(), m);
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&p), Err(CheckpointError::BadTensor { .. })));
    }
}
