//! Run manifests: one per artifact, enough to re-run the command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Effective configuration, command specific.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    /// SHA-256 over git-style blob hashes of every input file.
    pub input_hash: String,
    /// Kept apart so everything else is reproducible byte for byte.
    pub timestamps: Timestamps,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `sha256("blob <len>\0" ++ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Hash of a list of input paths; directories are walked in sorted order.
pub fn hash_inputs(paths: &[PathBuf]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for root in paths {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(format!("{} {}\n", blob_hash(&fs::read(&f)?), rel.display()).as_bytes());
        }
    }
    Ok(hex(&h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value, inputs: &[PathBuf], started: u64) -> std::io::Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            input_hash: hash_inputs(inputs)?,
            timestamps: Timestamps {
                started_unix: started,
                finished_unix: now_unix(),
            },
        })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(path, text)
    }
}

/// Manifest location for a single-file artifact.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
