//! Line-delimited JSON artifacts with a provenance header line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GlimpseError, Result};

pub const FORMAT: &str = "glimpse-jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub count: usize,
}

impl Header {
    pub fn new(kind: &str, seed: u64, config_hash: &str, count: usize) -> Self {
        Self {
            format: FORMAT.into(),
            kind: kind.into(),
            seed,
            config_hash: config_hash.into(),
            count,
        }
    }
}

fn parse_err(path: &Path, reason: impl ToString) -> GlimpseError {
    GlimpseError::Parse {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Writes the header followed by one item per line.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| GlimpseError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: String| writeln!(w, "{value}").map_err(|e| GlimpseError::io(path, e));
    line(serde_json::to_string(header).map_err(|e| parse_err(path, e))?)?;
    for item in items {
        line(serde_json::to_string(item).map_err(|e| parse_err(path, e))?)?;
    }
    w.flush().map_err(|e| GlimpseError::io(path, e))
}

/// Reads a file written by [`write_jsonl`], checking the header kind and count.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| GlimpseError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(path, "empty file"))?
        .map_err(|e| GlimpseError::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(path, format!("header: {e}")))?;
    if header.format != FORMAT || header.kind != kind {
        return Err(parse_err(
            path,
            format!("expected {FORMAT}/{kind}, found {}/{}", header.format, header.kind),
        ));
    }
    let mut items = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| GlimpseError::io(path, e))?;
        items.push(serde_json::from_str(&line).map_err(|e| parse_err(path, format!("line {}: {e}", i + 2)))?);
    }
    if items.len() != header.count {
        return Err(parse_err(
            path,
            format!("header declares {} items, found {}", header.count, items.len()),
        ));
    }
    Ok((header, items))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| GlimpseError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| GlimpseError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_count_check() {
        let dir = std::env::temp_dir().join(format!("glimpse-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.jsonl");
        let items = vec![0.1f64, 1.0 / 3.0, 2.5e-300];
        write_jsonl(&path, &Header::new("nums", 4, "abc", 3), &items).unwrap();
        let (h, back): (_, Vec<f64>) = read_jsonl(&path, "nums").unwrap();
        assert_eq!(h.seed, 4);
        assert_eq!(back, items);
        assert!(read_jsonl::<f64>(&path, "other").is_err());
        write_jsonl(&path, &Header::new("nums", 4, "abc", 5), &items).unwrap();
        assert!(read_jsonl::<f64>(&path, "nums").is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
