//! Content-addressed disk cache: one JSON file per request digest, written
//! atomically (temp file + rename) so concurrent writers and interrupted
//! runs never leave partial entries.

use crate::prompts::JudgeParams;
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::{Path, PathBuf};

use super::TokenUsage;

/// Cached response payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachedPayload {
    Chat {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        usage: Option<TokenUsage>,
    },
    Embedding {
        vector: Vec<f64>,
    },
}

/// Digest of (model, request kind, prompt bytes, image bytes, sampling
/// params). Every field is length-framed, so nothing can alias.
pub fn cache_key(
    model: &str,
    kind: &str,
    prompt: &[u8],
    image: Option<&[u8]>,
    params: &JudgeParams,
) -> String {
    let params_json = serde_json::to_string(params).expect("params serialize");
    let mut buf = Vec::new();
    for field in [
        model.as_bytes(),
        kind.as_bytes(),
        prompt,
        image.unwrap_or(&[]),
        params_json.as_bytes(),
    ] {
        buf.extend_from_slice(&(field.len() as u64).to_le_bytes());
        buf.extend_from_slice(field);
    }
    sha256_hex(&buf)
}

#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<CachedPayload>> {
        match std::fs::read_to_string(self.path_for(key)) {
            Ok(text) => Ok(serde_json::from_str(&text).ok()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &str, payload: &CachedPayload) -> io::Result<()> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static WRITE_SEQ: AtomicU64 = AtomicU64::new(0);
        let text = serde_json::to_string(payload).expect("payload serializes");
        let target = self.path_for(key);
        // Unique temp name per write: concurrent writers of the same key
        // must not stomp each other's temp file before the rename.
        let temp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            WRITE_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&temp, text)?;
        std::fs::rename(&temp, &target)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_changes_with_every_field() {
        let params = JudgeParams::default();
        let base = cache_key("m", "chat", b"p", None, &params);
        assert_eq!(base, cache_key("m", "chat", b"p", None, &params));
        assert_ne!(base, cache_key("m2", "chat", b"p", None, &params));
        assert_ne!(base, cache_key("m", "embedding", b"p", None, &params));
        assert_ne!(base, cache_key("m", "chat", b"q", None, &params));
        assert_ne!(base, cache_key("m", "chat", b"p", Some(b"img"), &params));
        let hot = JudgeParams {
            temperature: 0.9,
            ..JudgeParams::default()
        };
        assert_ne!(base, cache_key("m", "chat", b"p", None, &hot));
        // Framing: (prompt="ab", image="") vs (prompt="a", image="b").
        assert_ne!(
            cache_key("m", "chat", b"ab", None, &params),
            cache_key("m", "chat", b"a", Some(b"b"), &params)
        );
    }

    #[test]
    fn roundtrip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        assert!(cache.get("absent").unwrap().is_none());
        let payload = CachedPayload::Chat {
            text: "hello".into(),
            usage: None,
        };
        cache.put("k1", &payload).unwrap();
        assert_eq!(cache.get("k1").unwrap().unwrap(), payload);
        let vector = CachedPayload::Embedding {
            vector: vec![1.0, -0.5],
        };
        cache.put("k2", &vector).unwrap();
        assert_eq!(cache.get("k2").unwrap().unwrap(), vector);
    }
}
