//! Atomic file output and content hashing.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary sibling file and a rename,
/// so readers never observe a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// FNV-1a over the concatenated contents of several files, in order.
pub fn hash_files(paths: &[&Path]) -> Result<u64> {
    let mut h = FnvHasher::default();
    for p in paths {
        h.write(&read_file(p)?);
    }
    Ok(h.finish())
}

pub fn hex64(v: u64) -> String {
    format!("{v:016x}")
}
