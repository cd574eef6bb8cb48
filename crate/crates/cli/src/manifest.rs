//! Run manifests: the resolved configuration echoed as canonical JSON
//! (object keys sorted, no insignificant whitespace in the hashed form),
//! with a git-style content hash `sha256("blob <len>\0" + json)`.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's map is ordered by key, so going through `Value` sorts
    // every object
    let v: Value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn content_hash(canonical: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", canonical.len()).as_bytes());
    h.update(canonical.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub config_hash: String,
    pub out_dir: String,
    pub threads: usize,
    pub started_unix: u64,
    pub version: &'static str,
}

impl<'a, C: Serialize> RunManifest<'a, C> {
    pub fn new(command: &'a str, config: &'a C, out_dir: &Path, threads: usize) -> Result<Self> {
        Ok(Self {
            command,
            config,
            config_hash: content_hash(&canonical_json(config)?),
            out_dir: out_dir.display().to_string(),
            threads,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            version: env!("CARGO_PKG_VERSION"),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let v: Value = serde_json::to_value(self)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&v)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_sorts_keys() {
        #[derive(Serialize)]
        struct S {
            b: u8,
            a: u8,
        }
        assert_eq!(canonical_json(&S { b: 1, a: 2 }).unwrap(), r#"{"a":2,"b":1}"#);
    }

    #[test]
    fn hash_matches_git_blob_hashing() {
        // git's object id for the blob "hello\n" under SHA-256 object format
        assert_eq!(
            content_hash("hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
