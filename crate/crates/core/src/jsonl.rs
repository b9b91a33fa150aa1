//! JSON-lines reading and writing shared by every file format in the pipeline.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// Reads one JSON value per non-blank line, returning `(line_number, value)` pairs
/// (1-based) so callers can point at offending rows.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_reader(BufReader::new(file), &path.display().to_string())
}

pub fn parse_reader<T: DeserializeOwned, R: BufRead>(
    reader: R,
    origin: &str,
) -> Result<Vec<(usize, T)>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: origin.to_string(),
            line: idx + 1,
            source,
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

pub fn write_to<T: Serialize, W: Write>(mut w: W, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn to_string<T: Serialize>(items: &[T]) -> String {
    let mut buf = Vec::new();
    write_to(&mut buf, items).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
