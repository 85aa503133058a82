//! Line-delimited record files.
//!
//! Every file starts with a [`Header`] line naming its kind, format version
//! and the SHA-256 of each input it was derived from, followed by one JSON
//! object per line. Writes go to a temporary file in the target directory
//! and are renamed into place, so a partially written file is never visible.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Header `kind` values of the pipeline's record files.
pub mod kinds {
    pub const INSTANCES: &str = "instances";
    pub const EMBEDDINGS: &str = "embeddings";
    pub const DUAL_MODE_LOG: &str = "dual-mode-log";
    pub const LABELS: &str = "advantage-labels";
    pub const FEATURES: &str = "features";
    pub const PROBE_RESULTS: &str = "probe-results";
    pub const SELECTION: &str = "selection-report";
    pub const FRONTIER: &str = "frontier";
    pub const DECISIONS: &str = "decisions";
    pub const EVAL: &str = "eval-report";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

impl Header {
    pub fn new(kind: impl Into<String>) -> Self {
        Header {
            kind: kind.into(),
            version: FORMAT_VERSION,
            inputs: BTreeMap::new(),
            meta: Map::new(),
        }
    }

    pub fn with_input(mut self, name: impl Into<String>, hash: impl Into<String>) -> Self {
        self.inputs.insert(name.into(), hash.into());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Serialize) -> Self {
        let value = serde_json::to_value(value).expect("header metadata serializes");
        self.meta.insert(key.into(), value);
        self
    }

    pub fn meta_as<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let value = self
            .meta
            .get(key)
            .ok_or_else(|| Error::invalid(format!("header of `{}` lacks `{key}`", self.kind)))?;
        Ok(serde_json::from_value(value.clone())?)
    }

    fn check(&self, kind: &str, path: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                message: format!("expected a `{kind}` file, found `{}`", self.kind),
            });
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                kind: kind.to_string(),
                expected: FORMAT_VERSION,
                found: self.version,
            });
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Write `bytes` to `path` through a same-directory temporary file and rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    // temporary files default to 0600; artifacts are ordinary readable files
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_jsonl<T: Serialize>(header: &Header, records: &[T]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, header: &Header, records: &[T]) -> Result<()> {
    write_atomic(path, &encode_jsonl(header, records)?)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, kind: &str, path: &str) -> Result<(Header, Vec<T>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_string(),
        line: 1,
        message: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
        path: path.to_string(),
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    header.check(kind, path)?;
    let records = parse_records(lines, path)?;
    Ok((header, records))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(Header, Vec<T>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, kind, &path.display().to_string())
}

/// Read a record file that may or may not carry a header line (external input).
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(Option<Header>, Vec<T>)> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let header = match lines.peek() {
        Some((_, l)) => serde_json::from_str::<Header>(l).ok(),
        None => None,
    };
    if header.is_some() {
        lines.next();
    }
    Ok((header, parse_records(lines, &label)?))
}

fn parse_records<'a, T: DeserializeOwned>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    path: &str,
) -> Result<Vec<T>> {
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Single-object document with a checksummed body: a header line whose
/// metadata carries `body_sha256`, then the body on one line.
pub fn encode_sealed<T: Serialize>(mut header: Header, body: &T) -> Result<String> {
    let body = serde_json::to_string(body)?;
    header.meta.insert("body_sha256".into(), Value::String(sha256_hex(body.as_bytes())));
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    out.push_str(&body);
    out.push('\n');
    Ok(out)
}

pub fn decode_sealed<T: DeserializeOwned>(text: &str, kind: &str) -> Result<(Header, T)> {
    let corrupt = |line, message: &str| Error::Parse {
        path: kind.to_string(),
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| corrupt(1, "empty document"))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| corrupt(1, &format!("bad header: {e}")))?;
    header.check(kind, kind)?;
    let body = lines.next().ok_or_else(|| corrupt(2, "missing body"))?;
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(corrupt(3, "trailing data after body"));
    }
    let expected: String = header.meta_as("body_sha256")?;
    if sha256_hex(body.as_bytes()) != expected {
        return Err(Error::Checksum);
    }
    let value = serde_json::from_str(body).map_err(|e| corrupt(2, &e.to_string()))?;
    Ok((header, value))
}
