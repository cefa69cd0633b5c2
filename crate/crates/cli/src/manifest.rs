//! Run manifests and small output helpers shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use liesa::checkpoint::config_hash;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Versions {
    liesa_core: &'static str,
    liesa_cli: &'static str,
    os: &'static str,
    arch: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a, C> {
    command: &'a str,
    config: &'a C,
    config_hash: String,
    seed: u64,
    versions: Versions,
    outputs: &'a [String],
}

/// Writes `dir/manifest.json` describing a finished run.
pub fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C, seed: u64, outputs: &[String]) -> Result<()> {
    let manifest = Manifest {
        command,
        config,
        config_hash: config_hash(config)?,
        seed,
        versions: Versions {
            liesa_core: liesa::VERSION,
            liesa_cli: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        },
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes a CSV with the given header and rows; returns the file name.
pub fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<String> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let path: PathBuf = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
