use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the resolved config. The output directory is left out so that the
/// same run written to two places carries the same hash.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
}

/// Provenance written next to every artifact as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
    /// Hash of the checkpoint the artifact was derived from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sha256: Option<String>,
    /// Hash of the inputs that determine the artifact, for reuse checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(anyhow::anyhow!("{}: {e}", path.display()))
}

/// Writes `bytes` to `path` and its meta sidecar.
pub fn write_artifact(
    cfg: &RunConfig,
    path: &Path,
    bytes: &[u8],
    source_sha256: Option<String>,
) -> Result<Meta, Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let meta = Meta {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        sha256: sha256_hex(bytes),
        source_sha256,
        key: None,
    };
    write_meta(path, &meta)?;
    Ok(meta)
}

pub fn write_meta(artifact: &Path, meta: &Meta) -> Result<(), Failure> {
    let mp = meta_path(artifact);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes") + "\n";
    std::fs::write(&mp, text).map_err(|e| io_err(&mp, e))
}

pub fn read_meta(artifact: &Path) -> Option<Meta> {
    let text = std::fs::read_to_string(meta_path(artifact)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn file_sha256(path: &Path) -> Result<String, Failure> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| io_err(path, e))?))
}

/// Errors with a message naming `path` unless it exists.
pub fn require(path: &Path, what: &str, hint: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(format!("{what} {} not found; {hint}", path.display())))
    }
}

/// Appends a timestamped line to `<out>/run.log`. Timestamps live only here.
pub fn log_line(out: &Path, msg: &str) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if std::fs::create_dir_all(out).is_ok() {
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
            let _ = writeln!(f, "{ts}\t{msg}");
        }
    }
    eprintln!("{msg}");
}
