//! Atomic file emission: every artifact lands via write-then-rename, and
//! each run drops the fully resolved configuration next to its outputs.

use anyhow::{Context, Result};
use serde::Serialize;
use std::fs;
use std::path::PathBuf;

pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    pub fn create(dir: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {dir}"))?;
        Ok(Self {
            dir: PathBuf::from(dir),
        })
    }

    /// Writes bytes atomically: a temporary file in the same directory is
    /// renamed over the target.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &target)
            .with_context(|| format!("renaming into {}", target.display()))?;
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_atomic(name, text.as_bytes())
    }

    /// Runs `f` against an in-memory buffer and commits it atomically.
    pub fn write_csv_with<F>(&self, name: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buffer = Vec::new();
        f(&mut buffer)?;
        self.write_atomic(name, &buffer)
    }

    pub fn write_resolved_config<T: Serialize>(&self, resolved: &T) -> Result<PathBuf> {
        self.write_json("resolved_config.json", resolved)
    }
}

pub fn display_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}
