//! Reference-based baseline metrics: BLEU-4, ROUGE-L, and CIDEr-D.
//!
//! All three share one tokenizer: lowercase, every non-alphanumeric
//! character becomes a space except an apostrophe with alphanumerics on both
//! sides, then split on whitespace. N-gram maps are BTreeMaps so float
//! accumulation happens in a fixed order and repeated runs produce bitwise
//! identical scores.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("corpus has no documents")]
    NoInputs,
    #[error("input {index} has no references")]
    EmptyReferences { index: usize },
}

pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut cleaned = String::with_capacity(text.len());
    for (i, ch) in chars.iter().enumerate() {
        if ch.is_alphanumeric() {
            cleaned.push(*ch);
        } else if *ch == '\''
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_alphanumeric()
            && chars[i + 1].is_alphanumeric()
        {
            cleaned.push('\'');
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// N-gram keys use an unprintable joiner so token boundaries stay unambiguous.
const GRAM_JOIN: char = '\u{1f}';

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let mut key = String::new();
        for (i, tok) in window.iter().enumerate() {
            if i > 0 {
                key.push(GRAM_JOIN);
            }
            key.push_str(tok);
        }
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Classical corpus-of-one BLEU-4: clipped modified precisions for n = 1..4,
/// unsmoothed geometric mean (any zero precision zeroes the score), and a
/// brevity penalty against the closest reference length, ties going to the
/// shorter reference.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(candidate, n);
        let total: u64 = cand_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: BTreeMap<&str, u64> = BTreeMap::new();
        let ref_counts: Vec<BTreeMap<String, u64>> =
            references.iter().map(|r| ngram_counts(r, n)).collect();
        for counts in &ref_counts {
            for (gram, k) in counts {
                let slot = max_ref.entry(gram.as_str()).or_insert(0);
                *slot = (*slot).max(*k);
            }
        }
        let clipped: u64 = cand_counts
            .iter()
            .map(|(gram, k)| (*k).min(max_ref.get(gram.as_str()).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += 0.25 * (clipped as f64 / total as f64).ln();
    }

    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| (r.len().abs_diff(c), r.len()))
        .min()
        .expect("non-empty references")
        .1;
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with beta = 1.2: take the best LCS precision and best LCS recall
/// over the references separately, then combine them into one F measure.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    const BETA: f64 = 1.2;
    if candidate.is_empty() {
        return 0.0;
    }
    let mut best_p = 0.0f64;
    let mut best_r = 0.0f64;
    for reference in references {
        if reference.is_empty() {
            continue;
        }
        let l = lcs_len(candidate, reference) as f64;
        best_p = best_p.max(l / candidate.len() as f64);
        best_r = best_r.max(l / reference.len() as f64);
    }
    if best_p == 0.0 || best_r == 0.0 {
        return 0.0;
    }
    (1.0 + BETA * BETA) * best_p * best_r / (best_r + BETA * BETA * best_p)
}

#[derive(Debug, Clone)]
pub struct CiderInput {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Idf statistics for CIDEr-D. Each document is one image's reference set;
/// an n-gram counts toward document frequency once per document no matter
/// how many of that document's references contain it. The weight for a gram
/// is ln(N / (1 + df)).
#[derive(Debug, Clone)]
pub struct CiderCorpus {
    df: Vec<BTreeMap<String, u64>>,
    n_docs: f64,
}

impl CiderCorpus {
    pub fn from_documents(documents: &[Vec<Vec<String>>]) -> Result<Self, BaselineError> {
        if documents.is_empty() {
            return Err(BaselineError::NoInputs);
        }
        for (index, document) in documents.iter().enumerate() {
            if document.is_empty() {
                return Err(BaselineError::EmptyReferences { index });
            }
        }
        let mut df: Vec<BTreeMap<String, u64>> = vec![BTreeMap::new(); 4];
        for document in documents {
            for n in 1..=4usize {
                let mut seen: BTreeSet<String> = BTreeSet::new();
                for reference in document {
                    seen.extend(ngram_counts(reference, n).into_keys());
                }
                for gram in seen {
                    *df[n - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        Ok(CiderCorpus {
            df,
            n_docs: documents.len() as f64,
        })
    }

    fn weighted(&self, tokens: &[String], n: usize) -> BTreeMap<String, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, k)| {
                let d = self.df[n - 1].get(&gram).copied().unwrap_or(0) as f64;
                (gram, k as f64 * (self.n_docs / (1.0 + d)).ln())
            })
            .collect()
    }

    /// Score one candidate against its references. Candidate counts are
    /// clipped at the reference counts on the idf-weighted vectors,
    /// cosine-normalized, damped by a gaussian penalty on the token length
    /// difference (sigma = 6); the result is 10 times the mean over
    /// n = 1..4 of the reference-averaged similarity.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> Result<f64, BaselineError> {
        const SIGMA: f64 = 6.0;
        if references.is_empty() {
            return Err(BaselineError::EmptyReferences { index: 0 });
        }
        let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        let mut per_n_sum = 0.0;
        for n in 1..=4usize {
            let vc = self.weighted(candidate, n);
            let nc = norm(&vc);
            let mut acc = 0.0;
            for reference in references {
                let vr = self.weighted(reference, n);
                let nr = norm(&vr);
                let mut numerator = 0.0;
                for (gram, c) in &vc {
                    if let Some(r) = vr.get(gram) {
                        numerator += c.min(*r) * r;
                    }
                }
                let mut sim = if nc > 0.0 && nr > 0.0 {
                    numerator / (nc * nr)
                } else {
                    0.0
                };
                let delta = candidate.len() as f64 - reference.len() as f64;
                sim *= (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
                acc += sim;
            }
            per_n_sum += 10.0 * acc / references.len() as f64;
        }
        Ok(per_n_sum / 4.0)
    }
}

/// CIDEr-D over a batch where every input doubles as one idf document.
pub fn cider_d(inputs: &[CiderInput]) -> Result<Vec<f64>, BaselineError> {
    let documents: Vec<Vec<Vec<String>>> =
        inputs.iter().map(|i| i.references.clone()).collect();
    let corpus = CiderCorpus::from_documents(&documents)?;
    inputs
        .iter()
        .map(|input| corpus.score(&input.candidate, &input.references))
        .collect()
}

/// Per-candidate baseline results as they appear in run records. `cider_d`
/// is filled once the whole corpus is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(default)]
    pub cider_d: Option<f64>,
}
