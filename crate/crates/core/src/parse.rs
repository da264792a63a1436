//! Turning raw model text into scores and structured visual context.
//!
//! The rating is the first maximal run of ASCII digits in the response,
//! clamped to [0,100]. A response that is exactly the canonical decimal form
//! of the score parses as `Ok`; anything that needed extraction or clamping
//! is `Recovered`; no digits at all is `Failed`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ContentDigest, EvalScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureReason {
    EmptyResponse,
    NoIntegerFound,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("score parse failed ({reason:?}), response digest {raw_response_digest}")]
pub struct ParseFailure {
    pub reason: ParseFailureReason,
    pub raw_response_digest: ContentDigest,
}

/// Byte range of the first maximal ASCII digit run, if any.
fn first_digit_run(raw: &str) -> Option<(usize, usize)> {
    let bytes = raw.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let end = start
        + bytes[start..]
            .iter()
            .take_while(|b| b.is_ascii_digit())
            .count();
    Some((start, end))
}

/// Extract the rating from a raw response. A leading minus sign is not part
/// of the digit run, so negative-looking text clamps from the digits alone.
pub fn parse_score(raw: &str) -> Result<EvalScore, ParseFailure> {
    let digest = ContentDigest::of_text(raw);
    if raw.trim().is_empty() {
        return Err(ParseFailure {
            reason: ParseFailureReason::EmptyResponse,
            raw_response_digest: digest,
        });
    }
    let (start, end) = first_digit_run(raw).ok_or(ParseFailure {
        reason: ParseFailureReason::NoIntegerFound,
        raw_response_digest: digest,
    })?;
    let run = raw[start..end].trim_start_matches('0');
    // After dropping leading zeros, any run longer than three digits
    // exceeds 100 regardless of its value.
    let clamped: u8 = if run.is_empty() {
        0
    } else if run.len() > 3 {
        100
    } else {
        run.parse::<u16>().expect("<=3 ascii digits").min(100) as u8
    };
    let canonical = raw.trim() == clamped.to_string();
    Ok(EvalScore::parsed(clamped, digest, !canonical))
}

/// True when the first digit run is immediately followed by a decimal part
/// that the integer parse discarded, e.g. `87.5`.
pub fn decimal_truncated(raw: &str) -> bool {
    match first_digit_run(raw) {
        Some((_, end)) => {
            let rest = &raw.as_bytes()[end..];
            rest.first() == Some(&b'.') && rest.get(1).is_some_and(|b| b.is_ascii_digit())
        }
        None => false,
    }
}

/// Stage-1 output. `parsed` is present only when the response carried at
/// least one of the three section headers; plain prose keeps `raw_text` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualContext {
    pub raw_text: String,
    pub parsed: Option<ParsedContext>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedContext {
    /// At most five entries; extras in the response are dropped.
    pub objects: Vec<String>,
    /// Keyed by the subject of `Features of <subject>: ...` bullets; bullets
    /// without that shape collect under the empty key.
    pub features: BTreeMap<String, Vec<String>>,
    pub relationships: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContextParseError {
    #[error("empty visual context response")]
    EmptyResponse,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Objects,
    Features,
    Relationships,
}

pub fn parse_visual_context(raw: &str) -> Result<VisualContext, ContextParseError> {
    if raw.trim().is_empty() {
        return Err(ContextParseError::EmptyResponse);
    }

    let mut parsed = ParsedContext::default();
    let mut section = Section::None;
    let mut saw_header = false;

    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(bullet) = trimmed.strip_prefix("- ") {
            let bullet = bullet.trim();
            if bullet.is_empty() {
                continue;
            }
            match section {
                Section::Objects => {
                    if parsed.objects.len() < 5 {
                        parsed.objects.push(bullet.to_string());
                    }
                }
                Section::Features => {
                    let (subject, text) = split_feature_bullet(bullet);
                    parsed.features.entry(subject).or_default().push(text);
                }
                Section::Relationships => parsed.relationships.push(bullet.to_string()),
                Section::None => {}
            }
            continue;
        }
        let lower = trimmed.to_lowercase();
        if lower.contains("list of important objects") {
            section = Section::Objects;
            saw_header = true;
        } else if lower.contains("relationship") {
            section = Section::Relationships;
            saw_header = true;
        } else if lower.contains("feature") {
            section = Section::Features;
            saw_header = true;
        }
    }

    Ok(VisualContext {
        raw_text: raw.to_string(),
        parsed: saw_header.then_some(parsed),
    })
}

fn split_feature_bullet(bullet: &str) -> (String, String) {
    let lower = bullet.to_lowercase();
    if let Some(rest) = lower.strip_prefix("features of ") {
        if let Some(colon) = rest.find(':') {
            let prefix_len = bullet.len() - rest.len();
            let subject = bullet[prefix_len..prefix_len + colon].trim().to_string();
            let text = bullet[prefix_len + colon + 1..].trim().to_string();
            return (subject, text);
        }
    }
    (String::new(), bullet.to_string())
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn canonical_phrase_recovers_any_integer(x in 0u32..10_000) {
            let raw = format!("The score is {x} out of 100");
            let score = parse_score(&raw).unwrap();
            prop_assert_eq!(score.value.unwrap() as u32, x.min(100));
            prop_assert_eq!(score.parse_status, crate::model::ParseStatus::Recovered);
        }

        #[test]
        fn parse_never_panics(raw in ".*") {
            let _ = parse_score(&raw);
            let _ = decimal_truncated(&raw);
            let _ = parse_visual_context(&raw);
        }

        #[test]
        fn parsed_values_stay_in_range(raw in ".*") {
            if let Ok(score) = parse_score(&raw) {
                prop_assert!(score.value.unwrap() <= 100);
            }
        }
    }
}
