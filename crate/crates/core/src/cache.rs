//! Content-addressed cache of model exchanges.
//!
//! The key is the SHA-256 of a canonical JSON object naming everything that
//! determines a response: model, template, prompt digest, image digest, and
//! generation parameters. Entries are write-once; a second put with the same
//! key leaves the stored bytes untouched. Files land under a two-level hex
//! fanout (`ab/cd/<key>.json`) and are written to a temp file first, then
//! renamed, so readers never observe partial writes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};

use crate::gateway::{VlmExchange, VlmRequest};
use crate::model::{canonical_params_string, ContentDigest, GenerationParams, ModelError};

const ENTRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry at {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("entry does not belong under key {expected} (computed {computed})")]
    KeyMismatch {
        expected: String,
        computed: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Strict mode surfaces corrupt entries as errors; lenient mode treats them
/// as absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Lenient,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(ContentDigest);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    image_digest: &'a ContentDigest,
    model_id: &'a str,
    params: &'a str,
    prompt_digest: &'a ContentDigest,
    template_id: &'a str,
}

impl CacheKey {
    pub fn from_parts(
        model_id: &str,
        template_id: &str,
        prompt_digest: &ContentDigest,
        image_digest: &ContentDigest,
        params: &GenerationParams,
    ) -> Result<Self, ModelError> {
        let params_string = canonical_params_string(params)?;
        let material = KeyMaterial {
            image_digest,
            model_id,
            params: &params_string,
            prompt_digest,
            template_id,
        };
        let json = crate::model::canonical_json(&material)?;
        Ok(CacheKey(ContentDigest::of_text(&json)))
    }

    pub fn for_request(request: &VlmRequest) -> Result<Self, ModelError> {
        CacheKey::from_parts(
            &request.params.model_id,
            &request.template_id,
            &request.prompt_digest(),
            &request.image_digest,
            &request.params,
        )
    }

    pub fn hex(&self) -> String {
        self.0.to_hex()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    schema_version: u32,
    key: String,
    exchange: VlmExchange,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_entries: u64,
    pub removed_bytes: u64,
    pub kept_entries: u64,
}

pub struct EvalCache {
    root: PathBuf,
    mode: CacheMode,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EvalCache {
    pub fn open(root: impl Into<PathBuf>, mode: CacheMode) -> Result<Self, CacheError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| CacheError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(EvalCache {
            root,
            mode,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.root.join(&hex[0..2]).join(&hex[2..4]).join(format!("{hex}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<VlmExchange>, CacheError> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                return Ok(None);
            }
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let entry: CacheEntry = match serde_json::from_slice(&bytes) {
            Ok(entry) => entry,
            Err(e) => return self.corrupt(path, format!("invalid JSON: {e}")),
        };
        if entry.schema_version != ENTRY_SCHEMA_VERSION {
            return self.corrupt(
                path,
                format!("unsupported schema_version {}", entry.schema_version),
            );
        }
        if entry.key != key.hex() {
            return self.corrupt(path, format!("stored key {} differs", entry.key));
        }
        self.hits.fetch_add(1, Ordering::SeqCst);
        Ok(Some(entry.exchange))
    }

    fn corrupt(&self, path: PathBuf, message: String) -> Result<Option<VlmExchange>, CacheError> {
        match self.mode {
            CacheMode::Strict => Err(CacheError::Corrupt { path, message }),
            CacheMode::Lenient => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                Ok(None)
            }
        }
    }

    /// Store an exchange. Returns `false` when the key is already present;
    /// existing bytes are never rewritten. The key is recomputed from the
    /// exchange before writing, so a mismatched pair cannot poison the cache.
    pub fn put(&self, key: &CacheKey, exchange: &VlmExchange) -> Result<bool, CacheError> {
        let computed = CacheKey::for_request(&exchange.request)?;
        if &computed != key {
            return Err(CacheError::KeyMismatch {
                expected: key.hex(),
                computed: computed.hex(),
            });
        }
        let path = self.path_for(key);
        if path.exists() {
            return Ok(false);
        }
        let parent = path.parent().expect("fanout path has a parent");
        std::fs::create_dir_all(parent).map_err(|source| CacheError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
        let entry = CacheEntry {
            schema_version: ENTRY_SCHEMA_VERSION,
            key: key.hex(),
            exchange: exchange.clone(),
        };
        let json = crate::model::canonical_json(&entry)?;
        let tmp = tempfile::NamedTempFile::new_in(parent).map_err(|source| CacheError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
        std::fs::write(tmp.path(), json.as_bytes()).map_err(|source| CacheError::Io {
            path: tmp.path().to_path_buf(),
            source,
        })?;
        tmp.persist(&path).map_err(|e| CacheError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(true)
    }

    pub fn counters(&self) -> CacheCounters {
        CacheCounters {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn entry_files(&self) -> Result<Vec<PathBuf>, CacheError> {
        fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>, CacheError> {
            let entries = std::fs::read_dir(dir).map_err(|source| CacheError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let mut paths = Vec::new();
            for entry in entries {
                let entry = entry.map_err(|source| CacheError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
                paths.push(entry.path());
            }
            Ok(paths)
        }

        let mut files = Vec::new();
        for level1 in list_dirs(&self.root)? {
            if !level1.is_dir() {
                continue;
            }
            for level2 in list_dirs(&level1)? {
                if !level2.is_dir() {
                    continue;
                }
                for file in list_dirs(&level2)? {
                    if file.extension().is_some_and(|e| e == "json") {
                        files.push(file);
                    }
                }
            }
        }
        Ok(files)
    }

    pub fn disk_stats(&self) -> Result<CacheStats, CacheError> {
        let mut stats = CacheStats::default();
        for file in self.entry_files()? {
            let meta = std::fs::metadata(&file).map_err(|source| CacheError::Io {
                path: file.clone(),
                source,
            })?;
            stats.entries += 1;
            stats.total_bytes += meta.len();
        }
        Ok(stats)
    }

    /// Remove entries whose mtime is older than `max_age`.
    pub fn gc_older_than(&self, max_age: Duration) -> Result<GcReport, CacheError> {
        let cutoff = SystemTime::now() - max_age;
        let mut report = GcReport::default();
        for file in self.entry_files()? {
            let meta = std::fs::metadata(&file).map_err(|source| CacheError::Io {
                path: file.clone(),
                source,
            })?;
            let modified = meta.modified().map_err(|source| CacheError::Io {
                path: file.clone(),
                source,
            })?;
            if modified <= cutoff {
                std::fs::remove_file(&file).map_err(|source| CacheError::Io {
                    path: file.clone(),
                    source,
                })?;
                report.removed_entries += 1;
                report.removed_bytes += meta.len();
            } else {
                report.kept_entries += 1;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::VlmResponse;
    use crate::model::digest_bytes;

    fn request(caption_digest_seed: &str) -> VlmRequest {
        VlmRequest {
            template_id: "vanilla@v1".into(),
            prompt_text: format!("rate this: {caption_digest_seed}"),
            inputs_digest: ContentDigest::of_text(caption_digest_seed),
            image_id: "img-1".into(),
            image_digest: digest_bytes(b"image bytes").unwrap(),
            params: GenerationParams::stage2_defaults("test-model"),
        }
    }

    fn exchange(seed: &str, text: &str) -> VlmExchange {
        VlmExchange {
            request: request(seed),
            response: VlmResponse {
                raw_text: text.into(),
                finish_reason: Some("stop".into()),
                latency_ms: 12,
            },
            timestamp_ms: 1_700_000_000_000,
        }
    }

    #[test]
    fn key_is_deterministic_and_sensitive_to_every_part() {
        let prompt_digest = ContentDigest::of_text("prompt");
        let image_digest = ContentDigest::of_text("image");
        let params = GenerationParams::stage2_defaults("m");
        let base =
            CacheKey::from_parts("m", "vanilla@v1", &prompt_digest, &image_digest, &params)
                .unwrap();
        assert_eq!(
            base,
            CacheKey::from_parts("m", "vanilla@v1", &prompt_digest, &image_digest, &params)
                .unwrap()
        );

        let other_model =
            CacheKey::from_parts("m2", "vanilla@v1", &prompt_digest, &image_digest, &params)
                .unwrap();
        let other_template =
            CacheKey::from_parts("m", "step2@v1", &prompt_digest, &image_digest, &params).unwrap();
        let other_prompt = CacheKey::from_parts(
            "m",
            "vanilla@v1",
            &ContentDigest::of_text("prompt2"),
            &image_digest,
            &params,
        )
        .unwrap();
        let other_image = CacheKey::from_parts(
            "m",
            "vanilla@v1",
            &prompt_digest,
            &ContentDigest::of_text("image2"),
            &params,
        )
        .unwrap();
        let mut hotter = params.clone();
        hotter.temperature = 0.7;
        let other_params =
            CacheKey::from_parts("m", "vanilla@v1", &prompt_digest, &image_digest, &hotter)
                .unwrap();

        let keys = [base, other_model, other_template, other_prompt, other_image, other_params];
        for i in 0..keys.len() {
            for j in (i + 1)..keys.len() {
                assert_ne!(keys[i], keys[j], "keys {i} and {j} collide");
            }
        }
    }

    #[test]
    fn param_spelling_does_not_change_the_key() {
        let a: GenerationParams =
            serde_json::from_str(r#"{"temperature":0.50,"max_tokens":512,"model_id":"m"}"#)
                .unwrap();
        let b: GenerationParams =
            serde_json::from_str(r#"{"model_id":"m","max_tokens":512,"temperature":0.5}"#).unwrap();
        let p = ContentDigest::of_text("p");
        let i = ContentDigest::of_text("i");
        assert_eq!(
            CacheKey::from_parts("m", "t", &p, &i, &a).unwrap(),
            CacheKey::from_parts("m", "t", &p, &i, &b).unwrap()
        );
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        let ex = exchange("seed", "85");
        let key = CacheKey::for_request(&ex.request).unwrap();

        assert!(cache.get(&key).unwrap().is_none());
        assert!(cache.put(&key, &ex).unwrap());
        assert_eq!(cache.get(&key).unwrap(), Some(ex));
        assert_eq!(cache.counters(), CacheCounters { hits: 1, misses: 1 });
    }

    #[test]
    fn entries_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        let ex = exchange("seed", "85");
        let key = CacheKey::for_request(&ex.request).unwrap();
        assert!(cache.put(&key, &ex).unwrap());

        let mut later = ex.clone();
        later.response.raw_text = "99".into();
        assert!(!cache.put(&key, &later).unwrap());
        assert_eq!(cache.get(&key).unwrap().unwrap().response.raw_text, "85");
    }

    #[test]
    fn put_rejects_mismatched_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        let ex = exchange("seed", "85");
        let wrong = CacheKey::for_request(&exchange("other", "1").request).unwrap();
        assert!(matches!(
            cache.put(&wrong, &ex),
            Err(CacheError::KeyMismatch { .. })
        ));
    }

    #[test]
    fn fanout_layout_has_two_hex_levels() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        let ex = exchange("seed", "85");
        let key = CacheKey::for_request(&ex.request).unwrap();
        cache.put(&key, &ex).unwrap();

        let hex = key.hex();
        let expected = dir
            .path()
            .join(&hex[0..2])
            .join(&hex[2..4])
            .join(format!("{hex}.json"));
        assert!(expected.is_file());
    }

    #[test]
    fn corrupt_entries_follow_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        let ex = exchange("seed", "85");
        let key = CacheKey::for_request(&ex.request).unwrap();

        {
            let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
            cache.put(&key, &ex).unwrap();
        }
        let hex = key.hex();
        let path = dir
            .path()
            .join(&hex[0..2])
            .join(&hex[2..4])
            .join(format!("{hex}.json"));
        std::fs::write(&path, b"{ not json").unwrap();

        let lenient = EvalCache::open(dir.path(), CacheMode::Lenient).unwrap();
        assert!(lenient.get(&key).unwrap().is_none());
        assert_eq!(lenient.counters().misses, 1);

        let strict = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        assert!(matches!(
            strict.get(&key),
            Err(CacheError::Corrupt { .. })
        ));
    }

    #[test]
    fn stats_and_gc_walk_the_fanout() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EvalCache::open(dir.path(), CacheMode::Strict).unwrap();
        for i in 0..5 {
            let ex = exchange(&format!("seed-{i}"), "85");
            let key = CacheKey::for_request(&ex.request).unwrap();
            cache.put(&key, &ex).unwrap();
        }
        let stats = cache.disk_stats().unwrap();
        assert_eq!(stats.entries, 5);
        assert!(stats.total_bytes > 0);

        let keep_all = cache.gc_older_than(Duration::from_secs(3600)).unwrap();
        assert_eq!(keep_all.removed_entries, 0);
        assert_eq!(keep_all.kept_entries, 5);

        std::thread::sleep(Duration::from_millis(20));
        let drop_all = cache.gc_older_than(Duration::ZERO).unwrap();
        assert_eq!(drop_all.removed_entries, 5);
        assert!(drop_all.removed_bytes >= stats.total_bytes);
        assert_eq!(cache.disk_stats().unwrap().entries, 0);
    }

    #[test]
    fn concurrent_puts_leave_a_valid_entry() {
        let dir = tempfile::tempdir().unwrap();
        let cache = std::sync::Arc::new(EvalCache::open(dir.path(), CacheMode::Strict).unwrap());
        let ex = exchange("seed", "85");
        let key = CacheKey::for_request(&ex.request).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let cache = std::sync::Arc::clone(&cache);
                let ex = ex.clone();
                scope.spawn(move || {
                    let _ = cache.put(&key, &ex).unwrap();
                });
            }
        });
        assert_eq!(cache.get(&key).unwrap(), Some(ex));
        assert_eq!(cache.disk_stats().unwrap().entries, 1);
    }
}
