//! Joining automatic scores to human judgments and summarizing agreement.
//!
//! A [`ScoreTable`] maps (item, candidate) to an automatic score, with `None`
//! marking a unit whose response could not be parsed; those units are
//! excluded and counted, never imputed. A missing entry is a join error:
//! the records must cover the dataset.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    split_thumb_human, DatasetError, DatasetKind, JudgedItem, Judgment, PascalCategory,
};
use crate::model::CaptionOrigin;
use crate::stats::{
    heatmap, kendall_tau, pascal_accuracy, pearson, Heatmap, PascalAccuracy, ScorePairSeries,
    ScoredPair, StatsError, TauVariant, TiePolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no items to evaluate")]
    NoItems,
    #[error("items span multiple dataset kinds")]
    MixedKinds,
    #[error("{count} unit(s) have no score record (first offenders: {examples:?})")]
    MissingScores { count: usize, examples: Vec<String> },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetaEvalOptions {
    /// Which tau is the headline number; both are always computed.
    pub tau: TauVariant,
    pub tie_policy: TiePolicy,
    pub bins: usize,
    /// Average the expert scores per item instead of treating each expert
    /// judgment as its own pair.
    pub average_experts: bool,
    /// When false, candidates with a human origin are dropped from rating
    /// slices before joining.
    pub include_human_candidates: bool,
    pub strict: bool,
}

impl Default for MetaEvalOptions {
    fn default() -> Self {
        MetaEvalOptions {
            tau: TauVariant::B,
            tie_policy: TiePolicy::Incorrect,
            bins: 10,
            average_experts: false,
            include_human_candidates: true,
            strict: false,
        }
    }
}

/// Automatic scores keyed by (item_id, candidate_id). `None` marks a unit
/// that was evaluated but failed score parsing.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String), Option<f64>>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item_id: impl Into<String>, candidate_id: impl Into<String>, score: Option<f64>) {
        self.scores
            .insert((item_id.into(), candidate_id.into()), score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn get(&self, item_id: &str, candidate_id: &str) -> Option<Option<f64>> {
        self.scores
            .get(&(item_id.to_string(), candidate_id.to_string()))
            .copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CorrelationBlock {
    pub n: usize,
    pub pearson: Option<f64>,
    pub pearson_undefined: Option<String>,
    pub tau_b: Option<f64>,
    pub tau_b_undefined: Option<String>,
    pub tau_c: Option<f64>,
    pub tau_c_undefined: Option<String>,
    pub tied_human_pairs: Option<i64>,
    pub tied_auto_pairs: Option<i64>,
}

fn correlation_block(pairs: &[(f64, f64)]) -> Result<CorrelationBlock, ReportError> {
    let mut block = CorrelationBlock {
        n: pairs.len(),
        ..Default::default()
    };
    let series = ScorePairSeries::new(pairs.iter().copied())?;
    match pearson(&series) {
        Ok(r) => block.pearson = Some(r),
        Err(e) => block.pearson_undefined = Some(e.to_string()),
    }
    match kendall_tau(&series, TauVariant::B) {
        Ok(result) => {
            block.tau_b = Some(result.tau);
            block.tied_human_pairs = Some(result.tied_human_pairs);
            block.tied_auto_pairs = Some(result.tied_auto_pairs);
        }
        Err(e) => block.tau_b_undefined = Some(e.to_string()),
    }
    match kendall_tau(&series, TauVariant::C) {
        Ok(result) => {
            block.tau_c = Some(result.tau);
            if block.tied_human_pairs.is_none() {
                block.tied_human_pairs = Some(result.tied_human_pairs);
                block.tied_auto_pairs = Some(result.tied_auto_pairs);
            }
        }
        Err(e) => block.tau_c_undefined = Some(e.to_string()),
    }
    Ok(block)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
pub struct Counts {
    pub items: usize,
    pub scored_units: usize,
    pub excluded_parse_failures: usize,
    pub pairs_evaluated: usize,
    pub pairs_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceReport {
    pub correlations: BTreeMap<String, CorrelationBlock>,
    pub pascal: Option<PascalAccuracy>,
    pub heatmap: Option<Heatmap>,
    pub counts: Counts,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaEvalReport {
    pub dataset: DatasetKind,
    pub metric: String,
    pub options: MetaEvalOptions,
    pub slices: BTreeMap<String, SliceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Tracks units whose score record is absent from the table.
#[derive(Default)]
struct MissingTracker {
    count: usize,
    examples: Vec<String>,
}

impl MissingTracker {
    fn record(&mut self, item_id: &str, candidate_id: &str) {
        self.count += 1;
        if self.examples.len() < 5 {
            self.examples.push(format!("{item_id}/{candidate_id}"));
        }
    }

    fn into_result(self) -> Result<(), ReportError> {
        if self.count == 0 {
            Ok(())
        } else {
            Err(ReportError::MissingScores {
                count: self.count,
                examples: self.examples,
            })
        }
    }
}

fn thumb_slice(
    items: &[&JudgedItem],
    table: &ScoreTable,
    options: &MetaEvalOptions,
) -> Result<SliceReport, ReportError> {
    let mut precision_pairs = Vec::new();
    let mut recall_pairs = Vec::new();
    let mut total_pairs = Vec::new();
    let mut counts = Counts {
        items: items.len(),
        ..Default::default()
    };
    let mut missing = MissingTracker::default();

    for item in items {
        let Judgment::Thumb {
            candidate,
            precision,
            recall,
            total,
            ..
        } = &item.payload
        else {
            continue;
        };
        match table.get(&item.item_id, &candidate.id) {
            None => missing.record(&item.item_id, &candidate.id),
            Some(None) => counts.excluded_parse_failures += 1,
            Some(Some(score)) => {
                counts.scored_units += 1;
                precision_pairs.push((*precision, score));
                recall_pairs.push((*recall, score));
                total_pairs.push((*total, score));
            }
        }
    }
    missing.into_result()?;

    let mut correlations = BTreeMap::new();
    correlations.insert("precision".to_string(), correlation_block(&precision_pairs)?);
    correlations.insert("recall".to_string(), correlation_block(&recall_pairs)?);
    correlations.insert("total".to_string(), correlation_block(&total_pairs)?);

    let mut warnings = Vec::new();
    let hm = build_heatmap(&total_pairs, options.bins, &mut warnings)?;

    Ok(SliceReport {
        correlations,
        pascal: None,
        heatmap: hm,
        counts,
        warnings,
    })
}

fn likert_slice(
    items: &[&JudgedItem],
    table: &ScoreTable,
    options: &MetaEvalOptions,
) -> Result<SliceReport, ReportError> {
    let mut pairs = Vec::new();
    let mut counts = Counts {
        items: items.len(),
        ..Default::default()
    };
    let mut missing = MissingTracker::default();
    let mut human_filtered = 0usize;

    for item in items {
        let Judgment::Likert {
            candidate, scores, ..
        } = &item.payload
        else {
            continue;
        };
        if !options.include_human_candidates && candidate.origin == CaptionOrigin::Human {
            human_filtered += 1;
            continue;
        }
        match table.get(&item.item_id, &candidate.id) {
            None => missing.record(&item.item_id, &candidate.id),
            Some(None) => counts.excluded_parse_failures += 1,
            Some(Some(auto)) => {
                counts.scored_units += 1;
                if options.average_experts {
                    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                    pairs.push((mean, auto));
                } else {
                    for s in scores {
                        pairs.push((*s, auto));
                    }
                }
            }
        }
    }
    missing.into_result()?;

    let mut correlations = BTreeMap::new();
    correlations.insert("score".to_string(), correlation_block(&pairs)?);

    let mut warnings = Vec::new();
    if human_filtered > 0 {
        warnings.push(format!(
            "excluded {human_filtered} human-written candidate(s)"
        ));
    }
    let hm = build_heatmap(&pairs, options.bins, &mut warnings)?;

    Ok(SliceReport {
        correlations,
        pascal: None,
        heatmap: hm,
        counts,
        warnings,
    })
}

fn build_heatmap(
    pairs: &[(f64, f64)],
    bins: usize,
    warnings: &mut Vec<String>,
) -> Result<Option<Heatmap>, ReportError> {
    if pairs.is_empty() {
        warnings.push("no scored units; heatmap skipped".to_string());
        return Ok(None);
    }
    if let Some((index, (_, v))) = pairs
        .iter()
        .enumerate()
        .find(|(_, (_, v))| *v < 0.0 || *v > 100.0)
    {
        warnings.push(format!(
            "auto score {v} at unit {index} is outside [0, 100]; heatmap skipped"
        ));
        return Ok(None);
    }
    Ok(Some(heatmap(pairs, bins)?))
}

fn pascal_slice(
    items: &[&JudgedItem],
    table: &ScoreTable,
    options: &MetaEvalOptions,
) -> Result<SliceReport, ReportError> {
    let mut pairs = Vec::new();
    let mut counts = Counts {
        items: items.len(),
        ..Default::default()
    };
    let mut missing = MissingTracker::default();

    for item in items {
        let Judgment::Pair {
            candidate_a,
            candidate_b,
            category,
            preferred,
            ..
        } = &item.payload
        else {
            continue;
        };
        let a = table.get(&item.item_id, &candidate_a.id);
        let b = table.get(&item.item_id, &candidate_b.id);
        if a.is_none() {
            missing.record(&item.item_id, &candidate_a.id);
        }
        if b.is_none() {
            missing.record(&item.item_id, &candidate_b.id);
        }
        let (Some(a), Some(b)) = (a, b) else {
            continue;
        };
        match (a, b) {
            (Some(score_a), Some(score_b)) => {
                counts.pairs_evaluated += 1;
                counts.scored_units += 2;
                pairs.push(ScoredPair {
                    id: item.item_id.clone(),
                    category: *category,
                    preferred: *preferred,
                    score_a,
                    score_b,
                });
            }
            _ => counts.pairs_excluded += 1,
        }
    }
    missing.into_result()?;

    let mut warnings = Vec::new();
    let pascal = if pairs.is_empty() {
        warnings.push("no fully scored pairs; accuracy skipped".to_string());
        None
    } else {
        let acc = pascal_accuracy(&pairs, options.tie_policy)?;
        if !acc.missing_categories.is_empty() {
            let names: Vec<&str> = acc
                .missing_categories
                .iter()
                .map(PascalCategory::as_str)
                .collect();
            warnings.push(format!(
                "categories {} have no pairs and are excluded from the mean",
                names.join(", ")
            ));
        }
        Some(acc)
    };

    Ok(SliceReport {
        correlations: BTreeMap::new(),
        pascal,
        heatmap: None,
        counts,
        warnings,
    })
}

pub fn meta_eval(
    items: &[JudgedItem],
    metric: &str,
    table: &ScoreTable,
    options: &MetaEvalOptions,
) -> Result<MetaEvalReport, ReportError> {
    let Some(first) = items.first() else {
        return Err(ReportError::NoItems);
    };
    let kind = first.dataset;
    if items.iter().any(|i| i.dataset != kind) {
        return Err(ReportError::MixedKinds);
    }

    let mut slices = BTreeMap::new();
    match kind {
        DatasetKind::Thumb => {
            let split = split_thumb_human(items, options.strict)?;
            slices.insert(
                "with_human".to_string(),
                thumb_slice(&split.with_human, table, options)?,
            );
            let mut without = thumb_slice(&split.without_human, table, options)?;
            if split.unknown_origin > 0 {
                without.warnings.push(format!(
                    "{} candidate(s) of unknown origin counted as machine",
                    split.unknown_origin
                ));
            }
            slices.insert("without_human".to_string(), without);
        }
        DatasetKind::Flickr8kExpert | DatasetKind::Composite => {
            let all: Vec<&JudgedItem> = items.iter().collect();
            slices.insert("all".to_string(), likert_slice(&all, table, options)?);
        }
        DatasetKind::Pascal50s => {
            let all: Vec<&JudgedItem> = items.iter().collect();
            slices.insert("all".to_string(), pascal_slice(&all, table, options)?);
        }
    }

    Ok(MetaEvalReport {
        dataset: kind,
        metric: metric.to_string(),
        options: *options,
        slices,
        config: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.3}"),
        None => "n/a".to_string(),
    }
}

impl MetaEvalReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# Meta-evaluation: {} / {}\n\n",
            self.dataset.as_str(),
            self.metric
        ));
        let tau = match self.options.tau {
            TauVariant::B => "b",
            TauVariant::C => "c",
        };
        let ties = match self.options.tie_policy {
            TiePolicy::Incorrect => "incorrect",
            TiePolicy::HalfCredit => "half_credit",
        };
        out.push_str(&format!(
            "options: tau={tau}, ties={ties}, bins={}, average_experts={}\n\n",
            self.options.bins, self.options.average_experts
        ));

        for (name, slice) in &self.slices {
            out.push_str(&format!("## {name}\n\n"));
            if !slice.correlations.is_empty() {
                out.push_str("| column | n | pearson | tau-b | tau-c |\n");
                out.push_str("|---|---|---|---|---|\n");
                for (column, block) in &slice.correlations {
                    out.push_str(&format!(
                        "| {column} | {} | {} | {} | {} |\n",
                        block.n,
                        fmt_opt(block.pearson),
                        fmt_opt(block.tau_b),
                        fmt_opt(block.tau_c),
                    ));
                }
                out.push('\n');
            }
            if let Some(pascal) = &slice.pascal {
                out.push_str("| category | accuracy |\n|---|---|\n");
                for (category, acc) in &pascal.per_category {
                    out.push_str(&format!("| {} | {acc:.3} |\n", category.as_str()));
                }
                out.push_str(&format!("| mean | {:.3} |\n\n", pascal.mean));
                out.push_str(&format!("tie pairs: {}\n\n", pascal.tie_pairs));
            }
            let c = &slice.counts;
            out.push_str(&format!(
                "counts: items={}, scored_units={}, excluded_parse_failures={}",
                c.items, c.scored_units, c.excluded_parse_failures
            ));
            if c.pairs_evaluated + c.pairs_excluded > 0 {
                out.push_str(&format!(
                    ", pairs_evaluated={}, pairs_excluded={}",
                    c.pairs_evaluated, c.pairs_excluded
                ));
            }
            out.push_str("\n\n");
            for warning in &slice.warnings {
                out.push_str(&format!("> warning: {warning}\n"));
            }
            if !slice.warnings.is_empty() {
                out.push('\n');
            }
        }
        out
    }
}
