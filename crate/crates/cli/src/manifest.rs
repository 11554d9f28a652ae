use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

/// Record of one command invocation, written last into its run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// SHA-256 over every output file (relative path and bytes), manifest excluded.
    pub artifact_hash: String,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(argv: &[String], out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("cli: creating output directory {}", out.display()))?;
        let args: Vec<String> = argv.iter().skip(1).cloned().collect();
        Ok(Self {
            command: args.first().cloned().unwrap_or_default(),
            args,
            config: None,
            seed: None,
            artifact_hash: String::new(),
            out_dir: out.to_path_buf(),
            started_unix: now(),
            finished_unix: 0,
        })
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.finished_unix = now();
        self.artifact_hash = artifact_hash(&self.out_dir)?;
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = toml::to_string(&self).context("cli: serializing run manifest")?;
        fs::write(&path, text).with_context(|| format!("cli: writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cli: reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("cli: parsing {}", path.display()))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cli: listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.strip_prefix(root).ok() != Some(Path::new(MANIFEST_FILE)) {
            out.push(p);
        }
    }
    Ok(())
}

/// Hex SHA-256 over the sorted (relative path, length, bytes) of all files
/// under `dir` except a top-level manifest.
pub fn artifact_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f).with_context(|| format!("cli: reading {}", f.display()))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{:02x}", b)).collect())
}
