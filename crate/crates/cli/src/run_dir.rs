//! Output directories and the manifest every run writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub const OUT_ROOT_ENV: &str = "DREAMER_OUT_ROOT";
const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub precision: Option<String>,
    pub out_dir: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_path: None,
            config_hash: None,
            seed: None,
            precision: None,
            out_dir: out_dir.display().to_string(),
            args: std::env::args().skip(1).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("manifest.json"), text + "\n").context("writing manifest.json")
    }
}

/// `--out` if given, else `$DREAMER_OUT_ROOT/<name>` (root defaults to `runs`).
pub fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_ROOT.into());
        root.join(default_name)
    })
}

/// Creates an empty run directory. An existing nonempty directory is only
/// replaced with `force`.
pub fn prepare(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied {
            if !force {
                bail!(UsageError(format!(
                    "{} already exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Errors that map to the usage exit code without coming from the library.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
