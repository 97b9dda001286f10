//! Checkpoint files: a `key = value` text manifest plus one little-endian
//! binary blob.
//!
//! ```text
//! format = tacticraft-checkpoint
//! version = 1
//! dtype = f32
//! blob = base.bin
//! meta.fusion_method = add
//! tensor.base.core.lstm.wx = 256x1024 @ 0
//! ```
//!
//! Tensor lines appear in blob order; offsets are byte offsets into the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::NumericError;
use crate::tensor::{ParamStore, Tensor};

const FORMAT: &str = "tacticraft-checkpoint";
const VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("blob {path}: {msg}")]
    Blob { path: PathBuf, msg: String },
    #[error("tensor `{name}`: {msg}")]
    Mismatch { name: String, msg: String },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone().frozen())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    /// Copies values into every tensor of `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self.get(&name).ok_or_else(|| CheckpointError::Mismatch {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(CheckpointError::Mismatch {
                    name,
                    msg: format!("shape {:?} in checkpoint, {:?} expected", src.shape(), dst.shape()),
                });
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    /// Writes `<stem>.manifest` and `<stem>.bin`. Returns the manifest path.
    pub fn save(&self, stem: &Path, dtype: Dtype) -> Result<PathBuf, CheckpointError> {
        let manifest_path = stem.with_extension("manifest");
        let blob_path = stem.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut text = format!(
            "format = {FORMAT}\nversion = {VERSION}\ndtype = {}\nblob = {blob_name}\n",
            dtype.as_str()
        );
        for (k, v) in &self.meta {
            text.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            text.push_str(&format!("tensor.{name} = {} @ {}\n", dims.join("x"), blob.len()));
            for &v in t.values() {
                match dtype {
                    Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;
        fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads from a manifest path (or a stem; `.manifest` is appended if missing).
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let manifest_path = if path.extension().is_some_and(|e| e == "manifest") {
            path.to_path_buf()
        } else {
            path.with_extension("manifest")
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let bad = |line: usize, msg: String| CheckpointError::Manifest {
            path: manifest_path.clone(),
            line,
            msg,
        };

        let mut header = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut specs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(i + 1, format!("expected `key = value`, got `{line}`")))?;
            if let Some(name) = k.strip_prefix("tensor.") {
                let (dims, off) = v
                    .split_once(" @ ")
                    .ok_or_else(|| bad(i + 1, format!("tensor entry `{v}` lacks `@ offset`")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(i + 1, format!("bad shape `{dims}`")))?;
                let offset = off
                    .parse::<usize>()
                    .map_err(|_| bad(i + 1, format!("bad offset `{off}`")))?;
                specs.push((i + 1, name.to_string(), shape, offset));
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else {
                header.insert(k.to_string(), v.to_string());
            }
        }
        if header.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad(1, "not a tacticraft checkpoint manifest".into()));
        }
        let dtype = match header.get("dtype").map(String::as_str) {
            Some("f32") => Dtype::F32,
            Some("f64") => Dtype::F64,
            other => return Err(bad(0, format!("unsupported dtype {other:?}"))),
        };
        let blob_name = header.get("blob").ok_or_else(|| bad(0, "missing `blob` key".into()))?;
        let blob_path = manifest_path.with_file_name(blob_name);
        let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
        let blob_err = |msg: String| CheckpointError::Blob {
            path: blob_path.clone(),
            msg,
        };

        let w = dtype.width();
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(specs.len());
        for (line, name, shape, offset) in specs {
            if offset != expected_offset {
                return Err(bad(line, format!("tensor `{name}` at offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * w;
            if end > blob.len() {
                return Err(blob_err(format!(
                    "tensor `{name}` spans bytes {offset}..{end} but blob has {} bytes",
                    blob.len()
                )));
            }
            let values: Vec<f64> = blob[offset..end]
                .chunks_exact(w)
                .map(|c| match dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            if let Some(j) = values.iter().position(|v| !v.is_finite()) {
                return Err(blob_err(format!(
                    "non-finite value in tensor `{name}` at byte offset {}",
                    offset + j * w
                )));
            }
            tensors.push((name, Tensor::new(shape, values)?));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(blob_err(format!(
                "manifest accounts for {expected_offset} bytes but blob has {}",
                blob.len()
            )));
        }
        Ok(Self { meta, tensors })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}
