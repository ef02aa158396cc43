//! Versioned JSONL records: one object per line, each carrying `"v": 1`.

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unsupported schema version {found:?} (expected {SCHEMA_VERSION})")]
    Version { line: usize, found: Option<Value> },
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encodes one record as a single line (without the trailing newline).
pub fn encode<T: Serialize>(record: &T) -> Result<String, JsonlError> {
    let mut map = match serde_json::to_value(record)? {
        Value::Object(map) => map,
        _ => return Err(JsonlError::NotAnObject),
    };
    map.insert("v".into(), Value::from(SCHEMA_VERSION));
    Ok(serde_json::to_string(&Value::Object(map))?)
}

/// Decodes one line, checking and stripping the version field.
pub fn decode<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T, JsonlError> {
    let value: Value = serde_json::from_str(line).map_err(|e| JsonlError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let mut map: Map<String, Value> = match value {
        Value::Object(map) => map,
        _ => {
            return Err(JsonlError::Malformed {
                line: line_no,
                message: "expected a JSON object".into(),
            })
        }
    };
    match map.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        found => return Err(JsonlError::Version { line: line_no, found }),
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| JsonlError::Malformed {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn read_from<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_path<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_from(BufReader::new(file))
}

pub fn write_to<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<(), JsonlError> {
    for r in records {
        let line = encode(r)?;
        writeln!(writer, "{line}").map_err(|source| JsonlError::Io {
            path: "<writer>".into(),
            source,
        })?;
    }
    Ok(())
}

pub fn write_path<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), JsonlError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, records)?;
    w.flush().map_err(io_err(path))
}

/// Appends records to `path`, creating it if needed.
pub fn append_path<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), JsonlError> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, records)?;
    w.flush().map_err(io_err(path))
}
