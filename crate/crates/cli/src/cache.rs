//! On-disk cache for extracted features and pretrained detectors.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const CACHE_ENV: &str = "WEATHERGAN_CACHE_DIR";

/// `$WEATHERGAN_CACHE_DIR`, else `$HOME/.cache/weathergan`, else `.weathergan-cache`.
pub fn cache_dir() -> PathBuf {
    if let Some(d) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    match std::env::var_os("HOME") {
        Some(h) => PathBuf::from(h).join(".cache").join("weathergan"),
        None => PathBuf::from(".weathergan-cache"),
    }
}

/// Content key of a set of files plus a free-form tag.
pub fn content_key(files: &[PathBuf], tag: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for f in files {
        let bytes = fs::read(f).with_context(|| format!("cli: reading {}", f.display()))?;
        h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().take(16).map(|b| format!("{:02x}", b)).collect())
}

pub fn entry(kind: &str, key: &str) -> PathBuf {
    cache_dir().join(kind).join(key)
}

/// Files under `dir` (not recursive), sorted.
pub fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("cli: listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_file() {
            v.push(p);
        }
    }
    v.sort();
    Ok(v)
}
