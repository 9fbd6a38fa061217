use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const STAGE_FILE: &str = "stage.json";

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v: Value = serde_json::to_value(value).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    // serde_json's default map is ordered by key, so re-serializing sorts.
    Ok(v.to_string())
}

pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(canonical_json(value)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Named stage directories under one root. Each completed stage records the
/// hash of the inputs that produced it; a directory is reused only when the
/// hash matches exactly and a different hash is an error.
#[derive(Clone, Debug)]
pub struct StageCache {
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageDir {
    pub dir: PathBuf,
    pub hash: String,
    pub reused: bool,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, label: &str) -> PathBuf {
        self.root.join(label)
    }

    /// Runs `compute` in the stage directory unless a completed run with the
    /// same key and every file in `outputs` is already there.
    pub fn run<K: Serialize>(
        &self,
        label: &str,
        key: &K,
        outputs: &[&str],
        compute: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<StageDir> {
        let dir = self.dir(label);
        let hash = config_hash(key)?;
        let marker = dir.join(STAGE_FILE);
        if marker.exists() {
            let stored = read_hash(&marker)?;
            if stored != hash {
                return Err(Error::StaleCache { dir, stored, expected: hash });
            }
            if outputs.iter().all(|f| dir.join(f).exists()) {
                return Ok(StageDir { dir, hash, reused: true });
            }
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        compute(&dir)?;
        for f in outputs {
            let p = dir.join(f);
            if !p.exists() {
                return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "stage did not produce this file")));
            }
        }
        let record = serde_json::json!({ "hash": hash, "key": serde_json::to_value(key).unwrap_or(Value::Null) });
        fs::write(&marker, format!("{record:#}\n")).map_err(|e| Error::io(&marker, e))?;
        Ok(StageDir { dir, hash, reused: false })
    }
}

fn read_hash(marker: &Path) -> Result<String> {
    let text = fs::read_to_string(marker).map_err(|e| Error::io(marker, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: marker.to_path_buf(),
        message: format!("unreadable stage record: {e}"),
    })?;
    v.get("hash").and_then(Value::as_str).map(str::to_string).ok_or_else(|| Error::Checkpoint {
        path: marker.to_path_buf(),
        message: "stage record has no hash".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_sorts_keys() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": [1, 2]}}"#).unwrap();
        assert_eq!(canonical_json(&a).unwrap(), r#"{"a":{"x":[1,2],"y":2},"b":1}"#);
    }

    #[test]
    fn stale_and_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = StageCache::new(tmp.path());
        let calls = std::cell::Cell::new(0);
        let run = |key: u32| {
            cache.run("s", &key, &["out.txt"], |d| {
                calls.set(calls.get() + 1);
                fs::write(d.join("out.txt"), "x").map_err(|e| Error::io(d, e))
            })
        };
        assert!(!run(1).unwrap().reused);
        assert!(run(1).unwrap().reused);
        assert!(matches!(run(2), Err(Error::StaleCache { .. })));
        assert_eq!(calls.get(), 1);
    }
}
