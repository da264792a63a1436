//! Agreement statistics between human judgments and automatic scores:
//! Pearson r, Kendall tau (b and c), pairwise preference accuracy, and a
//! score-distribution heatmap.
//!
//! Tie handling uses exact f64 equality. All pair counts stay in integers
//! until one final float expression per statistic, so independent counting
//! strategies land on bitwise identical results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{PascalCategory, PreferredSide};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("need at least two pairs, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error("no pairs supplied")]
    Empty,
    #[error("bins must be at least 1")]
    ZeroBins,
    #[error("score {value} at index {index} is outside [0, 100]")]
    OutOfRange { index: usize, value: f64 },
}

/// A paired series, human judgment first, automatic score second. Non-finite
/// values are rejected at construction so the statistics never see NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairSeries {
    human: Vec<f64>,
    auto_: Vec<f64>,
}

impl ScorePairSeries {
    pub fn new(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, StatsError> {
        let mut human = Vec::new();
        let mut auto_ = Vec::new();
        for (index, (h, a)) in pairs.into_iter().enumerate() {
            if !h.is_finite() || !a.is_finite() {
                return Err(StatsError::NonFinite { index });
            }
            human.push(h);
            auto_.push(a);
        }
        Ok(ScorePairSeries { human, auto_ })
    }

    pub fn len(&self) -> usize {
        self.human.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human.is_empty()
    }

    pub fn human(&self) -> &[f64] {
        &self.human
    }

    pub fn auto(&self) -> &[f64] {
        &self.auto_
    }
}

/// Two-pass Pearson correlation: means first, then centered moments.
/// Undefined when either side has zero variance.
pub fn pearson(series: &ScorePairSeries) -> Result<f64, StatsError> {
    let n = series.len();
    if n < 2 {
        return Err(StatsError::TooShort(n));
    }
    let nf = n as f64;
    let mean_h = series.human.iter().sum::<f64>() / nf;
    let mean_a = series.auto_.iter().sum::<f64>() / nf;

    let mut sha = 0.0;
    let mut shh = 0.0;
    let mut saa = 0.0;
    for (h, a) in series.human.iter().zip(&series.auto_) {
        let dh = h - mean_h;
        let da = a - mean_a;
        sha += dh * da;
        shh += dh * dh;
        saa += da * da;
    }
    if shh == 0.0 || saa == 0.0 {
        return Err(StatsError::Undefined(
            "a side of the series is constant".into(),
        ));
    }
    Ok(sha / (shh * saa).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauVariant {
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KendallResult {
    pub tau: f64,
    pub variant: TauVariant,
    /// Pairs tied on the human side.
    pub tied_human_pairs: i64,
    /// Pairs tied on the automatic side.
    pub tied_auto_pairs: i64,
}

fn tied_pairs_by_group(values: &[f64]) -> i64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut pairs = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            pairs += run * (run - 1) / 2;
            run = 1;
        }
    }
    pairs + run * (run - 1) / 2
}

fn tied_pairs_by_group2(pairs: &[(f64, f64)]) -> i64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut result = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            result += run * (run - 1) / 2;
            run = 1;
        }
    }
    result + run * (run - 1) / 2
}

/// Count strict inversions (i < j with values[i] > values[j]) by merge sort.
fn count_inversions(values: &mut [f64], scratch: &mut Vec<f64>) -> i64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = values.split_at_mut(mid);
    let mut inversions = count_inversions(left, scratch) + count_inversions(right, scratch);

    scratch.clear();
    let mut i = 0;
    let mut j = 0;
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            inversions += (left.len() - i) as i64;
            scratch.push(right[j]);
            j += 1;
        } else {
            scratch.push(left[i]);
            i += 1;
        }
    }
    scratch.extend_from_slice(&left[i..]);
    scratch.extend_from_slice(&right[j..]);
    values.copy_from_slice(scratch);
    inversions
}

fn distinct_count(values: &[f64]) -> i64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    sorted.dedup();
    sorted.len() as i64
}

/// Kendall rank correlation. Sorts by (human, auto) and counts inversions on
/// the auto side, recovering concordant-minus-discordant through the tie
/// counts without ever enumerating pairs.
pub fn kendall_tau(series: &ScorePairSeries, variant: TauVariant) -> Result<KendallResult, StatsError> {
    let n = series.len();
    if n < 2 {
        return Err(StatsError::TooShort(n));
    }
    let nf = n as i64;
    let tot = nf * (nf - 1) / 2;

    let mut joint: Vec<(f64, f64)> = series
        .human
        .iter()
        .copied()
        .zip(series.auto_.iter().copied())
        .collect();
    joint.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));

    let tied_human = tied_pairs_by_group(&series.human);
    let tied_auto = tied_pairs_by_group(&series.auto_);
    let tied_both = tied_pairs_by_group2(&joint);

    let mut auto_in_human_order: Vec<f64> = joint.iter().map(|(_, a)| *a).collect();
    let mut scratch = Vec::with_capacity(auto_in_human_order.len());
    let discordant_swaps = count_inversions(&mut auto_in_human_order, &mut scratch);

    let c_minus_d = tot - tied_human - tied_auto + tied_both - 2 * discordant_swaps;

    let tau = match variant {
        TauVariant::B => {
            if tot == tied_human || tot == tied_auto {
                return Err(StatsError::Undefined(
                    "all values on one side are tied".into(),
                ));
            }
            (c_minus_d as f64) / (((tot - tied_human) as f64) * ((tot - tied_auto) as f64)).sqrt()
        }
        TauVariant::C => {
            let m = distinct_count(&series.human).min(distinct_count(&series.auto_));
            if m <= 1 {
                return Err(StatsError::Undefined(
                    "fewer than two distinct values on a side".into(),
                ));
            }
            (2.0 * m as f64 * c_minus_d as f64) / ((n as f64) * (n as f64) * ((m - 1) as f64))
        }
    };
    Ok(KendallResult {
        tau,
        variant,
        tied_human_pairs: tied_human,
        tied_auto_pairs: tied_auto,
    })
}

/// One judged pair with the automatic scores for both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub id: String,
    pub category: PascalCategory,
    pub preferred: PreferredSide,
    pub score_a: f64,
    pub score_b: f64,
}

/// What a tied pair of automatic scores earns: nothing, or half credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    Incorrect,
    HalfCredit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PascalAccuracy {
    pub per_category: BTreeMap<PascalCategory, f64>,
    /// Unweighted mean over the categories that are present.
    pub mean: f64,
    pub missing_categories: Vec<PascalCategory>,
    pub tie_pairs: u64,
    pub tie_policy: TiePolicy,
}

pub fn pascal_accuracy(
    pairs: &[ScoredPair],
    tie_policy: TiePolicy,
) -> Result<PascalAccuracy, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    for (index, pair) in pairs.iter().enumerate() {
        if !pair.score_a.is_finite() || !pair.score_b.is_finite() {
            return Err(StatsError::NonFinite { index });
        }
    }

    let mut credit: BTreeMap<PascalCategory, f64> = BTreeMap::new();
    let mut counts: BTreeMap<PascalCategory, u64> = BTreeMap::new();
    let mut tie_pairs = 0u64;
    for pair in pairs {
        let earned = if pair.score_a == pair.score_b {
            tie_pairs += 1;
            match tie_policy {
                TiePolicy::Incorrect => 0.0,
                TiePolicy::HalfCredit => 0.5,
            }
        } else {
            let predicted = if pair.score_a > pair.score_b {
                PreferredSide::A
            } else {
                PreferredSide::B
            };
            if predicted == pair.preferred {
                1.0
            } else {
                0.0
            }
        };
        *credit.entry(pair.category).or_insert(0.0) += earned;
        *counts.entry(pair.category).or_insert(0) += 1;
    }

    let per_category: BTreeMap<PascalCategory, f64> = credit
        .iter()
        .map(|(cat, c)| (*cat, c / counts[cat] as f64))
        .collect();
    let missing_categories: Vec<PascalCategory> = PascalCategory::all()
        .into_iter()
        .filter(|c| !per_category.contains_key(c))
        .collect();
    let mean = per_category.values().sum::<f64>() / per_category.len() as f64;

    Ok(PascalAccuracy {
        per_category,
        mean,
        missing_categories,
        tie_pairs,
        tie_policy,
    })
}

/// Distribution of automatic scores per human judgment level. Rows follow
/// the sorted distinct human levels; columns are `bins` equal-width bins over
/// [0, 100] with the final bin closed at 100. Every row is normalized to
/// sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub levels: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub level_counts: Vec<u64>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,count");
        let bins = self.bin_edges.len() - 1;
        for (i, w) in self.bin_edges.windows(2).enumerate() {
            // The final bin includes its upper edge.
            let close = if i + 1 == bins { ']' } else { ')' };
            out.push_str(&format!(",[{};{}{close}", w[0], w[1]));
        }
        out.push('\n');
        for ((level, count), row) in self.levels.iter().zip(&self.level_counts).zip(&self.rows) {
            out.push_str(&format!("{level},{count}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn heatmap(pairs: &[(f64, f64)], bins: usize) -> Result<Heatmap, StatsError> {
    if bins == 0 {
        return Err(StatsError::ZeroBins);
    }
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    for (index, (level, score)) in pairs.iter().enumerate() {
        if !level.is_finite() || !score.is_finite() {
            return Err(StatsError::NonFinite { index });
        }
        if *score < 0.0 || *score > 100.0 {
            return Err(StatsError::OutOfRange {
                index,
                value: *score,
            });
        }
    }

    let mut levels: Vec<f64> = pairs.iter().map(|(l, _)| *l).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    levels.dedup();

    let bin_edges: Vec<f64> = (0..=bins).map(|i| 100.0 * i as f64 / bins as f64).collect();
    let mut counts = vec![vec![0u64; bins]; levels.len()];
    let mut level_counts = vec![0u64; levels.len()];
    for (level, score) in pairs {
        let row = levels
            .binary_search_by(|probe| probe.partial_cmp(level).expect("finite values"))
            .expect("level came from the same data");
        let bin = ((score * bins as f64 / 100.0) as usize).min(bins - 1);
        counts[row][bin] += 1;
        level_counts[row] += 1;
    }

    let rows = counts
        .iter()
        .zip(&level_counts)
        .map(|(row, total)| row.iter().map(|c| *c as f64 / *total as f64).collect())
        .collect();

    Ok(Heatmap {
        levels,
        bin_edges,
        rows,
        level_counts,
    })
}
