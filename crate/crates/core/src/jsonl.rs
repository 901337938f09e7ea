//! Line-delimited JSON helpers shared by every artifact file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{LudError, Result};

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| LudError::io(parent, e))?;
        }
    }
    Ok(())
}

/// Serializes `records` one per line, creating parent directories.
pub(crate) fn write<'a, T, I>(path: &Path, header: Option<&impl Serialize>, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| LudError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |line: String| -> Result<()> {
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| LudError::io(path, e))
    };
    if let Some(h) = header {
        put(serde_json::to_string(h)?)?;
    }
    for rec in records {
        put(serde_json::to_string(rec)?)?;
    }
    out.flush().map_err(|e| LudError::io(path, e))
}

/// Reads a file as `(1-based line number, line)` pairs, skipping blank lines.
pub(crate) fn read(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| LudError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

pub(crate) fn parse<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| malformed(path, line, e.to_string()))
}

pub(crate) fn malformed(path: &Path, line: usize, message: impl Into<String>) -> LudError {
    LudError::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}
