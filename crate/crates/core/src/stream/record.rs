use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One robot utterance plus the user's response, labelled by the user's own
/// mistake button press.
///
/// `stream` is the path of the `.fstream` file, relative to the manifest that
/// lists the record (absolute paths are kept as-is).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeRecord {
    pub participant_id: String,
    pub session_id: String,
    pub exchange_index: u32,
    pub mistake_label: bool,
    pub stream: String,
}

impl ExchangeRecord {
    pub fn stream_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.stream)
    }

    pub fn key(&self) -> (&str, &str, u32) {
        (&self.participant_id, &self.session_id, self.exchange_index)
    }
}

/// Checks that `(participant_id, session_id, exchange_index)` is unique.
pub fn validate_records(records: &[ExchangeRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::invalid(format!(
                "duplicate exchange ({}, {}, {})",
                r.participant_id, r.session_id, r.exchange_index
            )));
        }
    }
    Ok(())
}

/// Reads a JSON-lines manifest of exchange records.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ExchangeRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(i + 1, format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<ExchangeRecord>>>()?;
    validate_records(&records)?;
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ExchangeRecord]) -> Result<()> {
    validate_records(records)?;
    write_json_lines(path.as_ref(), records)
}

pub(crate) fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(i + 1, format!("{}: {e}", path.display())))
        })
        .collect()
}
