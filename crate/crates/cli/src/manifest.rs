use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::usage;

/// Worker cap from `HS3_THREADS` (default 1). Every code path is
/// single-threaded, so the value is validated and recorded only.
pub fn threads() -> Result<usize> {
    match std::env::var("HS3_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("HS3_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    threads: usize,
    flags: &'a A,
    resolved: Value,
    outputs: Vec<String>,
}

pub fn default_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the flags as given, the fully resolved configuration and the list
/// of produced files. No timestamps, so repeated runs give identical bytes.
pub fn write<A: Serialize>(
    explicit: Option<&Path>,
    primary: &Path,
    command: &str,
    flags: &A,
    resolved: Value,
    outputs: &[&Path],
    threads: usize,
) -> Result<PathBuf> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| default_path(primary));
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads,
        flags,
        resolved,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", path.display())))
    }
}

pub fn require_output(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(usage(format!("{}: is a directory", path.display())));
    }
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("{}: parent directory does not exist", path.display())))
        }
        _ => Ok(()),
    }
}
