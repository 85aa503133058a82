//! Reading and writing stage artifacts with provenance checks, plus the
//! hash-based train/val/test split.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reasonroute_core::io::{hash_file, read_jsonl, sha256_hex, write_atomic, write_jsonl, Header};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::SplitName;

/// An input file as loaded by a stage: parsed records and the hash of the
/// exact bytes they came from.
pub struct Loaded<T> {
    pub header: Header,
    pub records: Vec<T>,
    pub hash: String,
}

/// A stage input that does not exist yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingInput {
    pub path: PathBuf,
    pub what: String,
}

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing input {} ({}); run the stage that produces it first",
            self.path.display(),
            self.what
        )
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(MissingInput {
        path: path.to_path_buf(),
        what: what.to_string(),
    }
    .into())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Loaded<T>> {
    require(path, kind)?;
    let hash = hash_file(path)?;
    let (header, records) = read_jsonl(path, kind).with_context(|| format!("reading {}", path.display()))?;
    Ok(Loaded { header, records, hash })
}

pub fn read_text(path: &Path, what: &str) -> Result<(String, String)> {
    require(path, what)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = sha256_hex(text.as_bytes());
    Ok((text, hash))
}

/// An artifact whose recorded input hash differs from the input on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaleInput {
    pub artifact: String,
    pub input: String,
    pub recorded: String,
    pub found: String,
}

impl fmt::Display for StaleInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "provenance mismatch: {} was built from a different `{}` (recorded {}, found {}); rerun the upstream stages",
            self.artifact,
            self.input,
            short(&self.recorded),
            short(&self.found)
        )
    }
}

impl std::error::Error for StaleInput {}

/// Fail when `header` records a hash for one of `current` that differs from
/// the file on disk, i.e. the artifact is stale relative to its inputs.
pub fn check_provenance(what: &str, header: &Header, current: &[(&str, &str)]) -> Result<()> {
    for (name, hash) in current {
        if let Some(recorded) = header.inputs.get(*name) {
            if recorded != hash {
                return Err(StaleInput {
                    artifact: what.to_string(),
                    input: name.to_string(),
                    recorded: recorded.clone(),
                    found: hash.to_string(),
                }
                .into());
            }
        }
    }
    Ok(())
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub fn save<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    write_jsonl(path, header, records).with_context(|| format!("writing {}", path.display()))
}

pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Index records by instance id, rejecting duplicates.
pub fn index_by_id<'a, T>(what: &str, items: &'a [T], id: impl Fn(&T) -> &str) -> Result<HashMap<&'a str, &'a T>> {
    let mut map = HashMap::with_capacity(items.len());
    for it in items {
        if map.insert(id(it), it).is_some() {
            bail!("duplicate instance id `{}` in {what}", id(it));
        }
    }
    Ok(map)
}

/// 6:2:2 split from `sha256(seed || id)`; independent of file order.
pub fn split_of(seed: u64, id: &str) -> SplitName {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    let digest = sha256_hex(&bytes);
    let bucket = u64::from_str_radix(&digest[..8], 16).expect("hex digest") % 10;
    match bucket {
        0..=5 => SplitName::Train,
        6..=7 => SplitName::Val,
        _ => SplitName::Test,
    }
}
