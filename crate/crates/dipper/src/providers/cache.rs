//! Content-addressed, write-through response cache on disk.
//!
//! One JSON file per entry, named by the hex digest of the request key.
//! Reads are lock-free; writes are serialized and go through a temp file
//! rename. Eviction is manual (`purge`), so a finished run's responses stay
//! immutable and replayable.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::core::{hex_string, SamplingParams};

/// Which endpoint a cached entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Chat,
    Embed,
    Reward,
}

/// Content hash over everything that determines a response. Identical
/// inputs map to identical digests; any field change (including
/// `seed_index`) changes the digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub digest: String,
}

impl CacheKey {
    fn hash_parts(parts: &impl Serialize) -> String {
        let bytes = serde_json::to_vec(parts).expect("cache key parts serialize");
        hex_string(&Sha256::digest(&bytes))
    }

    pub fn chat(model: &str, system: &str, user: &str, params: &SamplingParams) -> Self {
        Self {
            digest: Self::hash_parts(&(EndpointKind::Chat, model, system, user, params)),
        }
    }

    pub fn embed(model: &str, text: &str) -> Self {
        Self {
            digest: Self::hash_parts(&(EndpointKind::Embed, model, text)),
        }
    }

    pub fn reward(model: &str, question: &str, response: &str) -> Self {
        Self {
            digest: Self::hash_parts(&(EndpointKind::Reward, model, question, response)),
        }
    }
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest))
    }

    pub fn read<T: DeserializeOwned>(&self, key: &CacheKey) -> Option<T> {
        let bytes = std::fs::read(self.entry_path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn write<T: Serialize>(&self, key: &CacheKey, value: &T) -> std::io::Result<()> {
        let _guard = self.write_lock.lock().unwrap();
        std::fs::create_dir_all(&self.dir)?;
        let path = self.entry_path(key);
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(value)?)?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Removes every cached entry. Returns the number of entries removed.
    pub fn purge(&self) -> std::io::Result<usize> {
        let _guard = self.write_lock.lock().unwrap();
        let mut removed = 0;
        if self.dir.exists() {
            for entry in std::fs::read_dir(&self.dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    std::fs::remove_file(path)?;
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_share_a_digest() {
        let p = SamplingParams::default();
        let a = CacheKey::chat("m", "sys", "user", &p);
        let b = CacheKey::chat("m", "sys", "user", &p);
        assert_eq!(a, b);
    }

    #[test]
    fn any_field_change_changes_the_digest() {
        let p = SamplingParams::default();
        let base = CacheKey::chat("m", "sys", "user", &p);
        assert_ne!(base, CacheKey::chat("m2", "sys", "user", &p));
        assert_ne!(base, CacheKey::chat("m", "sys2", "user", &p));
        assert_ne!(base, CacheKey::chat("m", "sys", "user2", &p));
        assert_ne!(
            base,
            CacheKey::chat("m", "sys", "user", &p.with_seed_index(1))
        );
        assert_ne!(base.digest, CacheKey::embed("m", "sys").digest);
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let key = CacheKey::embed("m", "hello");
        assert!(cache.read::<Vec<f64>>(&key).is_none());
        cache.write(&key, &vec![1.0, 2.0]).unwrap();
        assert_eq!(cache.read::<Vec<f64>>(&key), Some(vec![1.0, 2.0]));
    }

    #[test]
    fn purge_empties_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        cache.write(&CacheKey::embed("m", "a"), &1u8).unwrap();
        cache.write(&CacheKey::embed("m", "b"), &2u8).unwrap();
        assert_eq!(cache.purge().unwrap(), 2);
        assert!(cache.read::<u8>(&CacheKey::embed("m", "a")).is_none());
    }
}
