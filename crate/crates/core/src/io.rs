//! File helpers shared by every artifact writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// CSV with a leading `# key=value,...` provenance comment line.
pub fn csv_bytes<S: serde::Serialize>(
    provenance: &[(&str, String)],
    rows: &[S],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if !provenance.is_empty() {
        let header: Vec<String> = provenance.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.extend_from_slice(format!("# {}\n", header.join(",")).as_bytes());
    }
    let mut w = csv::Writer::from_writer(&mut out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    drop(w);
    Ok(out)
}

pub fn write_csv<S: serde::Serialize>(
    path: &Path,
    provenance: &[(&str, String)],
    rows: &[S],
) -> Result<()> {
    write_atomic(path, &csv_bytes(provenance, rows)?)
}
