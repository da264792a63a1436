//! Shared domain types: images, captions, generation parameters, scores,
//! and the content digests that tie them together.
//!
//! Everything here is an immutable value object with a canonical JSON form
//! (UTF-8, sorted keys) so it can participate in cache keys and on-disk
//! records deterministically.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot digest empty input")]
    EmptyDigestInput,
    #[error("caption text is empty after trimming")]
    EmptyCaption,
    #[error("reference set must contain at least one non-empty reference")]
    EmptyReferences,
    #[error("temperature must be non-negative, got {0}")]
    NegativeTemperature(f64),
    #[error("max_tokens must be positive")]
    ZeroMaxTokens,
    #[error("image {id} not readable at {location}: {reason}")]
    ImageNotReadable {
        id: String,
        location: String,
        reason: String,
    },
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("invalid digest string: {0}")]
    InvalidDigest(String),
}

/// 256-bit SHA-256 content digest. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentDigest([u8; 32]);

impl ContentDigest {
    /// Hash arbitrary bytes, including empty input. Prefer [`digest_bytes`]
    /// for content where empty input indicates a caller bug.
    pub fn compute(bytes: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        ContentDigest(hasher.finalize().into())
    }

    pub fn of_text(text: &str) -> Self {
        Self::compute(text.as_bytes())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, ModelError> {
        let bytes = hex::decode(s).map_err(|e| ModelError::InvalidDigest(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| ModelError::InvalidDigest(format!("expected 32 bytes in {s:?}")))?;
        Ok(ContentDigest(arr))
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", self.to_hex())
    }
}

impl Serialize for ContentDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ContentDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Digest of non-empty content. Equal inputs produce equal digests.
pub fn digest_bytes(bytes: &[u8]) -> Result<ContentDigest, ModelError> {
    if bytes.is_empty() {
        return Err(ModelError::EmptyDigestInput);
    }
    Ok(ContentDigest::compute(bytes))
}

/// Where an image lives. Only filesystem paths can be read by this crate;
/// URL locations are carried through for provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageLocation {
    Path(PathBuf),
    Url(String),
}

impl ImageLocation {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            ImageLocation::Url(s.to_string())
        } else {
            ImageLocation::Path(PathBuf::from(s))
        }
    }

    pub fn as_str(&self) -> String {
        match self {
            ImageLocation::Path(p) => p.display().to_string(),
            ImageLocation::Url(u) => u.clone(),
        }
    }
}

impl Serialize for ImageLocation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for ImageLocation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(ImageLocation::parse(&String::deserialize(deserializer)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Jpeg,
    Png,
}

impl MediaType {
    pub fn mime(&self) -> &'static str {
        match self {
            MediaType::Jpeg => "image/jpeg",
            MediaType::Png => "image/png",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jpg" | "jpeg" => Some(MediaType::Jpeg),
            "png" => Some(MediaType::Png),
            _ => None,
        }
    }
}

/// One evaluated image. `content_digest` is `None` until the bytes have been
/// read once; all pipeline use goes through [`LoadedImage`], which fills it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub location: ImageLocation,
    #[serde(default)]
    pub content_digest: Option<ContentDigest>,
    pub media_type: MediaType,
}

impl ImageRef {
    pub fn read_bytes(&self, root: Option<&Path>) -> Result<Vec<u8>, ModelError> {
        let path = match &self.location {
            ImageLocation::Path(p) => match root {
                Some(r) if p.is_relative() => r.join(p),
                _ => p.clone(),
            },
            ImageLocation::Url(u) => {
                return Err(ModelError::ImageNotReadable {
                    id: self.id.clone(),
                    location: u.clone(),
                    reason: "remote image locations are not fetched by this crate".into(),
                })
            }
        };
        std::fs::read(&path).map_err(|e| ModelError::ImageNotReadable {
            id: self.id.clone(),
            location: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// An image together with its raw bytes and a verified digest.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image: ImageRef,
    pub bytes: Vec<u8>,
}

impl LoadedImage {
    pub fn load(image: &ImageRef, root: Option<&Path>) -> Result<Self, ModelError> {
        let bytes = image.read_bytes(root)?;
        let digest = digest_bytes(&bytes)?;
        let mut image = image.clone();
        image.content_digest = Some(digest);
        Ok(LoadedImage { image, bytes })
    }

    pub fn digest(&self) -> ContentDigest {
        self.image
            .content_digest
            .expect("LoadedImage always carries a digest")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionOrigin {
    Human,
    Machine,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub id: String,
    pub image_id: String,
    pub text: String,
    pub origin: CaptionOrigin,
    /// Name of the captioning system, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
}

impl CaptionCandidate {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyCaption);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub image_id: String,
    pub references: Vec<String>,
}

impl ReferenceSet {
    pub fn new(image_id: impl Into<String>, references: Vec<String>) -> Result<Self, ModelError> {
        let set = ReferenceSet {
            image_id: image_id.into(),
            references,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.references.is_empty() || self.references.iter().any(|r| r.trim().is_empty()) {
            return Err(ModelError::EmptyReferences);
        }
        Ok(())
    }
}

/// Sampling parameters for one model call. The canonical string form feeds
/// cache keys, so serialization must be byte-stable for equal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<i64>,
    pub model_id: String,
}

impl GenerationParams {
    /// Defaults for the context-extraction call: longer budget for the
    /// structured bullet list.
    pub fn stage1_defaults(model_id: impl Into<String>) -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
            model_id: model_id.into(),
        }
    }

    /// Defaults for the scoring call.
    pub fn stage2_defaults(model_id: impl Into<String>) -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
            model_id: model_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.temperature < 0.0 || self.temperature.is_nan() {
            return Err(ModelError::NegativeTemperature(self.temperature));
        }
        if self.max_tokens == 0 {
            return Err(ModelError::ZeroMaxTokens);
        }
        Ok(())
    }
}

/// Canonical JSON: UTF-8, object keys sorted, shortest-round-trip floats.
/// Going through `serde_json::Value` sorts keys because its map is a BTreeMap.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, ModelError> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Byte-identical for semantically equal params regardless of the key order
/// or float spelling they were parsed from.
pub fn canonical_params_string(params: &GenerationParams) -> Result<String, ModelError> {
    canonical_json(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Recovered,
    Failed,
}

/// A parsed rating in [0,100]. `value` is present exactly when parsing did
/// not fail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub value: Option<u8>,
    pub raw_response_digest: ContentDigest,
    pub parse_status: ParseStatus,
}

impl EvalScore {
    pub fn parsed(value: u8, raw_response_digest: ContentDigest, recovered: bool) -> Self {
        debug_assert!(value <= 100);
        EvalScore {
            value: Some(value),
            raw_response_digest,
            parse_status: if recovered {
                ParseStatus::Recovered
            } else {
                ParseStatus::Ok
            },
        }
    }

    pub fn failed(raw_response_digest: ContentDigest) -> Self {
        EvalScore {
            value: None,
            raw_response_digest,
            parse_status: ParseStatus::Failed,
        }
    }
}
