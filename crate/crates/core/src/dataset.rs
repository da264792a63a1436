//! Loading human-judgment datasets from normalized JSONL.
//!
//! Each line is one judged item carrying its own `schema_version`. Four
//! dataset kinds share the image/candidate/reference shape and differ in the
//! judgment payload: THumB lines carry precision/recall/total, Likert-style
//! sets carry a score vector, and pairwise sets carry two candidates with a
//! category and a preferred side. All errors name the offending line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{
    CaptionCandidate, CaptionOrigin, ContentDigest, ImageLocation, ImageRef, MediaType,
    ReferenceSet,
};

pub const LINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset at {path} has no items")]
    Empty { path: PathBuf },
    #[error("candidate {candidate_id} has unknown origin; the human/machine split needs every origin labeled")]
    UnknownOrigin { candidate_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Thumb,
    Flickr8kExpert,
    Composite,
    Pascal50s,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Thumb => "thumb",
            DatasetKind::Flickr8kExpert => "flickr8k_expert",
            DatasetKind::Composite => "composite",
            DatasetKind::Pascal50s => "pascal50s",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thumb" => Some(DatasetKind::Thumb),
            "flickr8k_expert" => Some(DatasetKind::Flickr8kExpert),
            "composite" => Some(DatasetKind::Composite),
            "pascal50s" => Some(DatasetKind::Pascal50s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PascalCategory {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "HI")]
    Hi,
    #[serde(rename = "HM")]
    Hm,
    #[serde(rename = "MM")]
    Mm,
}

impl PascalCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            PascalCategory::Hc => "HC",
            PascalCategory::Hi => "HI",
            PascalCategory::Hm => "HM",
            PascalCategory::Mm => "MM",
        }
    }

    pub fn all() -> [PascalCategory; 4] {
        [
            PascalCategory::Hc,
            PascalCategory::Hi,
            PascalCategory::Hm,
            PascalCategory::Mm,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferredSide {
    A,
    B,
}

/// The human judgment attached to one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Judgment {
    /// One candidate with one or more ratings on a fixed scale.
    Likert {
        candidate: CaptionCandidate,
        references: Option<ReferenceSet>,
        scores: Vec<f64>,
    },
    /// One candidate with precision/recall/total ratings.
    Thumb {
        candidate: CaptionCandidate,
        references: Option<ReferenceSet>,
        precision: f64,
        recall: f64,
        total: f64,
    },
    /// Two candidates with a category and the side humans preferred.
    Pair {
        candidate_a: CaptionCandidate,
        candidate_b: CaptionCandidate,
        references: Option<ReferenceSet>,
        category: PascalCategory,
        preferred: PreferredSide,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedItem {
    pub dataset: DatasetKind,
    pub item_id: String,
    pub image: ImageRef,
    pub payload: Judgment,
}

impl JudgedItem {
    pub fn candidates(&self) -> Vec<&CaptionCandidate> {
        match &self.payload {
            Judgment::Likert { candidate, .. } | Judgment::Thumb { candidate, .. } => {
                vec![candidate]
            }
            Judgment::Pair {
                candidate_a,
                candidate_b,
                ..
            } => vec![candidate_a, candidate_b],
        }
    }

    pub fn references(&self) -> Option<&ReferenceSet> {
        match &self.payload {
            Judgment::Likert { references, .. }
            | Judgment::Thumb { references, .. }
            | Judgment::Pair { references, .. } => references.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Base directory for relative image paths.
    pub image_root: Option<PathBuf>,
    /// Verify that every referenced image file exists.
    pub check_images: bool,
    pub strict: bool,
}

#[derive(Debug, Deserialize)]
struct RawImage {
    id: String,
    location: String,
    #[serde(default)]
    media_type: Option<String>,
    #[serde(default)]
    content_digest: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawCandidate {
    id: String,
    text: String,
    #[serde(default)]
    origin: Option<String>,
    #[serde(default)]
    system: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawLine {
    schema_version: u32,
    item_id: String,
    image: RawImage,
    #[serde(default)]
    candidate: Option<RawCandidate>,
    #[serde(default)]
    candidate_a: Option<RawCandidate>,
    #[serde(default)]
    candidate_b: Option<RawCandidate>,
    #[serde(default)]
    references: Option<Vec<String>>,
    #[serde(default)]
    scores: Option<Vec<f64>>,
    #[serde(default)]
    precision: Option<f64>,
    #[serde(default)]
    recall: Option<f64>,
    #[serde(default)]
    total: Option<f64>,
    #[serde(default)]
    category: Option<PascalCategory>,
    #[serde(default)]
    preferred: Option<PreferredSide>,
}

struct LineContext<'a> {
    path: &'a Path,
    line: usize,
}

impl LineContext<'_> {
    fn err(&self, message: impl Into<String>) -> DatasetError {
        DatasetError::Line {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }
}

fn convert_image(raw: RawImage, ctx: &LineContext<'_>) -> Result<ImageRef, DatasetError> {
    let location = ImageLocation::parse(&raw.location);
    let media_type = match raw.media_type.as_deref() {
        Some("jpeg") | Some("jpg") => MediaType::Jpeg,
        Some("png") => MediaType::Png,
        Some(other) => return Err(ctx.err(format!("unsupported media_type {other:?}"))),
        None => match &location {
            ImageLocation::Path(p) => MediaType::from_path(p).ok_or_else(|| {
                ctx.err(format!(
                    "cannot infer media type from {:?}; set media_type explicitly",
                    raw.location
                ))
            })?,
            ImageLocation::Url(u) => MediaType::from_path(Path::new(u)).ok_or_else(|| {
                ctx.err(format!(
                    "cannot infer media type from {u:?}; set media_type explicitly"
                ))
            })?,
        },
    };
    let content_digest = match raw.content_digest {
        Some(hex) => Some(
            ContentDigest::from_hex(&hex)
                .map_err(|e| ctx.err(format!("bad content_digest: {e}")))?,
        ),
        None => None,
    };
    if raw.id.trim().is_empty() {
        return Err(ctx.err("image id is empty"));
    }
    Ok(ImageRef {
        id: raw.id,
        location,
        content_digest,
        media_type,
    })
}

fn convert_candidate(
    raw: RawCandidate,
    image_id: &str,
    ctx: &LineContext<'_>,
) -> Result<CaptionCandidate, DatasetError> {
    let origin = match raw.origin.as_deref() {
        Some("human") => CaptionOrigin::Human,
        Some("machine") => CaptionOrigin::Machine,
        Some("unknown") | None => CaptionOrigin::Unknown,
        Some(other) => return Err(ctx.err(format!("unsupported origin {other:?}"))),
    };
    let candidate = CaptionCandidate {
        id: raw.id,
        image_id: image_id.to_string(),
        text: raw.text,
        origin,
        system: raw.system,
    };
    candidate
        .validate()
        .map_err(|e| ctx.err(format!("candidate {}: {e}", candidate.id)))?;
    Ok(candidate)
}

fn convert_references(
    raw: Option<Vec<String>>,
    image_id: &str,
    ctx: &LineContext<'_>,
) -> Result<Option<ReferenceSet>, DatasetError> {
    match raw {
        None => Ok(None),
        Some(refs) => {
            let set = ReferenceSet::new(image_id, refs).map_err(|e| ctx.err(e.to_string()))?;
            Ok(Some(set))
        }
    }
}

fn require_finite(value: f64, field: &str, ctx: &LineContext<'_>) -> Result<f64, DatasetError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ctx.err(format!("{field} must be finite, got {value}")))
    }
}

fn take_candidate(
    raw: Option<RawCandidate>,
    field: &str,
    image_id: &str,
    ctx: &LineContext<'_>,
) -> Result<CaptionCandidate, DatasetError> {
    let raw = raw.ok_or_else(|| ctx.err(format!("missing {field}")))?;
    convert_candidate(raw, image_id, ctx)
}

fn convert_line(
    kind: DatasetKind,
    raw: RawLine,
    ctx: &LineContext<'_>,
) -> Result<JudgedItem, DatasetError> {
    if raw.schema_version != LINE_SCHEMA_VERSION {
        return Err(ctx.err(format!(
            "schema_version {} is not supported (expected {LINE_SCHEMA_VERSION})",
            raw.schema_version
        )));
    }
    if raw.item_id.trim().is_empty() {
        return Err(ctx.err("item_id is empty"));
    }
    let image = convert_image(raw.image, ctx)?;
    let references = convert_references(raw.references, &image.id, ctx)?;

    let payload = match kind {
        DatasetKind::Thumb => {
            let candidate = take_candidate(raw.candidate, "candidate", &image.id, ctx)?;
            Judgment::Thumb {
                candidate,
                references,
                precision: require_finite(
                    raw.precision.ok_or_else(|| ctx.err("missing precision"))?,
                    "precision",
                    ctx,
                )?,
                recall: require_finite(
                    raw.recall.ok_or_else(|| ctx.err("missing recall"))?,
                    "recall",
                    ctx,
                )?,
                total: require_finite(
                    raw.total.ok_or_else(|| ctx.err("missing total"))?,
                    "total",
                    ctx,
                )?,
            }
        }
        DatasetKind::Flickr8kExpert | DatasetKind::Composite => {
            let candidate = take_candidate(raw.candidate, "candidate", &image.id, ctx)?;
            let scores = raw.scores.ok_or_else(|| ctx.err("missing scores"))?;
            let (expected, lo, hi) = match kind {
                DatasetKind::Flickr8kExpert => (3usize, 1.0, 4.0),
                _ => (1usize, 1.0, 5.0),
            };
            if scores.len() != expected {
                return Err(ctx.err(format!(
                    "expected exactly {expected} score(s), got {}",
                    scores.len()
                )));
            }
            for (i, s) in scores.iter().enumerate() {
                require_finite(*s, "score", ctx)?;
                if *s < lo || *s > hi {
                    return Err(ctx.err(format!(
                        "scores[{i}] = {s} is outside [{lo}, {hi}]"
                    )));
                }
            }
            Judgment::Likert {
                candidate,
                references,
                scores,
            }
        }
        DatasetKind::Pascal50s => {
            let candidate_a = take_candidate(raw.candidate_a, "candidate_a", &image.id, ctx)?;
            let candidate_b = take_candidate(raw.candidate_b, "candidate_b", &image.id, ctx)?;
            Judgment::Pair {
                candidate_a,
                candidate_b,
                references,
                category: raw.category.ok_or_else(|| ctx.err("missing category"))?,
                preferred: raw.preferred.ok_or_else(|| ctx.err("missing preferred"))?,
            }
        }
    };

    Ok(JudgedItem {
        dataset: kind,
        item_id: raw.item_id,
        image,
        payload,
    })
}

pub fn load(
    kind: DatasetKind,
    path: &Path,
    opts: &LoadOptions,
) -> Result<Vec<JudgedItem>, DatasetError> {
    let content = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let mut items = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineContext {
            path,
            line: idx + 1,
        };
        let raw: RawLine = serde_json::from_str(line)
            .map_err(|e| ctx.err(format!("invalid JSON: {e}")))?;
        let item = convert_line(kind, raw, &ctx)?;
        if !seen_ids.insert(item.item_id.clone()) {
            return Err(ctx.err(format!("duplicate item_id {:?}", item.item_id)));
        }
        if opts.check_images {
            check_image(&item.image, opts.image_root.as_deref(), &ctx)?;
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(items)
}

fn check_image(
    image: &ImageRef,
    root: Option<&Path>,
    ctx: &LineContext<'_>,
) -> Result<(), DatasetError> {
    match &image.location {
        ImageLocation::Path(p) => {
            let resolved = match root {
                Some(r) if p.is_relative() => r.join(p),
                _ => p.clone(),
            };
            if !resolved.is_file() {
                return Err(ctx.err(format!(
                    "image {} not found at {}",
                    image.id,
                    resolved.display()
                )));
            }
            Ok(())
        }
        ImageLocation::Url(u) => Err(ctx.err(format!(
            "image {} uses a remote location ({u}); --check-images needs local files",
            image.id
        ))),
    }
}

/// Split THumB items into the full set and the subset whose candidates are
/// not human-written. `strict` refuses candidates of unknown origin instead
/// of counting them into the machine side.
#[derive(Debug)]
pub struct ThumbSplit<'a> {
    pub with_human: Vec<&'a JudgedItem>,
    pub without_human: Vec<&'a JudgedItem>,
    pub unknown_origin: usize,
}

pub fn split_thumb_human(
    items: &[JudgedItem],
    strict: bool,
) -> Result<ThumbSplit<'_>, DatasetError> {
    let mut split = ThumbSplit {
        with_human: Vec::with_capacity(items.len()),
        without_human: Vec::new(),
        unknown_origin: 0,
    };
    for item in items {
        split.with_human.push(item);
        let origin = match &item.payload {
            Judgment::Thumb { candidate, .. } => candidate.origin,
            Judgment::Likert { candidate, .. } => candidate.origin,
            Judgment::Pair { .. } => continue,
        };
        match origin {
            CaptionOrigin::Human => {}
            CaptionOrigin::Machine => split.without_human.push(item),
            CaptionOrigin::Unknown => {
                if strict {
                    let candidate_id = item.candidates()[0].id.clone();
                    return Err(DatasetError::UnknownOrigin { candidate_id });
                }
                split.unknown_origin += 1;
                split.without_human.push(item);
            }
        }
    }
    Ok(split)
}
