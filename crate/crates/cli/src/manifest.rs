//! Per-stage run manifests: what was written, under which config and seed.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub created_unix: u64,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn file_name(stage: &str) -> String {
        format!("manifest_{stage}.toml")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    Ok((hex(&h.finalize()), n))
}

/// Hash of the effective configuration in canonical TOML form.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    Ok(sha256_bytes(cfg.to_toml()?.as_bytes()))
}

/// Every regular file under `dir`, sorted by relative path.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Write `manifest_<stage>.toml` into `dir` covering `artifacts` (files or
/// directories, relative to `dir`). Directories are expanded file by file.
pub fn write_manifest(dir: &Path, stage: &str, cfg: &PipelineConfig, artifacts: &[&str]) -> Result<Manifest> {
    let mut listed = Vec::new();
    for a in artifacts {
        let p = dir.join(a);
        let files = if p.is_dir() { files_under(&p)? } else { vec![p] };
        for f in files {
            let (sha256, bytes) = sha256_file(&f)?;
            let rel = f.strip_prefix(dir).unwrap_or(&f);
            listed.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256,
                bytes,
            });
        }
    }
    let m = Manifest {
        stage: stage.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        artifacts: listed,
    };
    let path = dir.join(Manifest::file_name(stage));
    std::fs::write(&path, toml::to_string(&m)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(m)
}
