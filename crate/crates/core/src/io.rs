use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Write via a sibling temp file and rename, so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Optional first line of an artifact file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
}

pub const SCHEMA_VERSION: u32 = 1;

impl ArtifactHeader {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_owned(),
            config_hash: config_hash.to_owned(),
        }
    }
}

/// Read a JSON-lines file with an optional [`ArtifactHeader`] on line 1.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactHeader>, Vec<T>)> {
    read_jsonl_validated(path, |_: &T| Ok(()))
}

pub fn read_jsonl_validated<T: DeserializeOwned>(
    path: &Path,
    validate: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<(Option<ArtifactHeader>, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let schema = |msg: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.contains("\"schema_version\"") {
            let h: ArtifactHeader = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(schema(format!("unsupported schema_version {}", h.schema_version)));
            }
            header = Some(h);
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        validate(&item).map_err(schema)?;
        items.push(item);
    }
    Ok((header, items))
}

/// Header line followed by one JSON object per item, written atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&ArtifactHeader>, items: &[T]) -> Result<()> {
    let mut s = String::new();
    if let Some(h) = header {
        s.push_str(&serde_json::to_string(h).expect("header serializes"));
        s.push('\n');
    }
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(|e| Error::Invalid(e.to_string()))?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}
