use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;

use capeval_core::cache::{CacheMode, EvalCache};
use capeval_core::dataset::{load, JudgedItem, LoadOptions};
use capeval_core::gateway::{HttpBackend, MockScript, VlmBackend};
use capeval_core::pipeline::{
    baseline_score_table, compute_baselines, score_table, BaselineMetric, BaselineRecord,
    EvalRecord, Pipeline, PipelineError, RunConfig,
};
use capeval_core::report::{meta_eval as run_meta_eval, MetaEvalOptions, MetaEvalReport};
use capeval_core::stats::{TauVariant, TiePolicy};

use crate::{
    BaselinesArgs, CacheAction, CacheArgs, DatasetArgs, MetaEvalArgs, ReportArgs, RunArgs,
    ScoreArgs,
};
use crate::config;

fn load_items(
    args: &DatasetArgs,
    image_root: Option<&Path>,
    strict: bool,
) -> anyhow::Result<Vec<JudgedItem>> {
    let opts = LoadOptions {
        image_root: image_root.map(Path::to_path_buf),
        check_images: args.check_images,
        strict,
    };
    let items = load(args.kind, &args.dataset, &opts)
        .with_context(|| format!("loading {}", args.dataset.display()))?;
    Ok(items)
}

fn make_backend(args: &RunArgs, config: &RunConfig) -> anyhow::Result<Arc<dyn VlmBackend>> {
    match &args.mock_script {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading mock script {}", path.display()))?;
            Ok(Arc::new(MockScript::from_json(&text)?.into_backend()))
        }
        None => Ok(Arc::new(HttpBackend::new(&config.endpoint)?)),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = String::with_capacity(rows.len() * 256);
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_output_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn score(args: &ScoreArgs) -> anyhow::Result<()> {
    let config = config::resolve(&args.run)?;
    let items = load_items(
        &args.run.dataset,
        config.image_root.as_deref(),
        args.run.strict,
    )?;
    let backend = make_backend(&args.run, &config)?;
    ensure_output_dir(&args.run.output)?;

    let pipeline = Pipeline::new(backend, config)?;
    let outcome = match pipeline.run(&items) {
        Ok(outcome) => outcome,
        Err(PipelineError::Aborted { message, completed }) => {
            let partial = args.run.output.join("records.partial.jsonl");
            write_jsonl(&partial, &completed)?;
            bail!(
                "run aborted: {message} ({} completed records saved to {})",
                completed.len(),
                partial.display()
            );
        }
        Err(e) => return Err(e.into()),
    };

    let records_path = args.run.output.join("records.jsonl");
    write_jsonl(&records_path, &outcome.records)?;

    let summary = serde_json::json!({
        "records": outcome.records.len(),
        "parse_failures": outcome.parse_failures,
        "recovered": outcome.recovered,
        "cache": outcome.cache,
        "elapsed_ms": outcome.elapsed_ms,
        "config": pipeline.config(),
    });
    write_pretty_json(&args.run.output.join("summary.json"), &summary)?;

    if args.with_baselines {
        let baselines = compute_baselines(&items)?;
        write_jsonl(&args.run.output.join("baselines.jsonl"), &baselines.records)?;
        if baselines.skipped_no_references > 0 {
            eprintln!(
                "warning: {} unit(s) have no references; their baseline scores are null",
                baselines.skipped_no_references
            );
        }
    }

    println!(
        "scored {} candidate(s): {} parse failure(s), {} recovered",
        outcome.records.len(),
        outcome.parse_failures,
        outcome.recovered
    );
    if let Some(cache) = outcome.cache {
        println!("cache: {} hit(s), {} miss(es)", cache.hits, cache.misses);
    }
    println!("wrote {}", records_path.display());
    Ok(())
}

pub fn extract_context(args: &RunArgs) -> anyhow::Result<()> {
    let config = config::resolve(args)?;
    let items = load_items(&args.dataset, config.image_root.as_deref(), args.strict)?;
    let backend = make_backend(args, &config)?;
    ensure_output_dir(&args.output)?;

    let pipeline = Pipeline::new(backend, config)?;
    let records = match pipeline.extract_contexts(&items) {
        Ok(records) => records,
        Err(PipelineError::Aborted { message, .. }) => bail!("extraction aborted: {message}"),
        Err(e) => return Err(e.into()),
    };

    let path = args.output.join("contexts.jsonl");
    write_jsonl(&path, &records)?;
    if let Some(cache) = pipeline.cache_counters() {
        println!("cache: {} hit(s), {} miss(es)", cache.hits, cache.misses);
    }
    println!("extracted context for {} image(s), wrote {}", records.len(), path.display());
    Ok(())
}

pub fn baselines(args: &BaselinesArgs) -> anyhow::Result<()> {
    let items = load_items(&args.dataset, args.dataset.image_root.as_deref(), args.strict)?;
    let outcome = compute_baselines(&items)?;
    ensure_output_dir(&args.output)?;
    let path = args.output.join("baselines.jsonl");
    write_jsonl(&path, &outcome.records)?;
    if outcome.skipped_no_references > 0 {
        eprintln!(
            "warning: {} unit(s) have no references; their baseline scores are null",
            outcome.skipped_no_references
        );
    }
    println!(
        "computed baselines for {} candidate(s), wrote {}",
        outcome.records.len(),
        path.display()
    );
    Ok(())
}

fn parse_baseline_metric(name: &str) -> anyhow::Result<BaselineMetric> {
    match name {
        "bleu4" => Ok(BaselineMetric::Bleu4),
        "rouge_l" => Ok(BaselineMetric::RougeL),
        "cider_d" => Ok(BaselineMetric::CiderD),
        other => bail!("unknown metric '{other}': expected bleu4, rouge_l, or cider_d"),
    }
}

pub fn meta_eval(args: &MetaEvalArgs) -> anyhow::Result<()> {
    let items = load_items(&args.dataset, args.dataset.image_root.as_deref(), args.strict)?;

    let (table, metric, scores_path) = match (&args.records, &args.baselines) {
        (Some(path), None) => {
            let records: Vec<EvalRecord> = read_jsonl(path)?;
            if records.is_empty() {
                bail!("{} holds no records", path.display());
            }
            let metric = format!("vlm:{}", records[0].mode.as_str());
            (score_table(&records), metric, path.clone())
        }
        (None, Some(path)) => {
            let records: Vec<BaselineRecord> = read_jsonl(path)?;
            if records.is_empty() {
                bail!("{} holds no records", path.display());
            }
            let name = args.metric.as_deref().unwrap_or("cider_d");
            let metric = parse_baseline_metric(name)?;
            (
                baseline_score_table(&records, metric),
                name.to_string(),
                path.clone(),
            )
        }
        _ => bail!("pass exactly one of --records or --baselines"),
    };
    if args.metric.is_some() && args.records.is_some() {
        bail!("--metric only applies to --baselines");
    }

    let options = MetaEvalOptions {
        tau: match args.tau.as_str() {
            "b" => TauVariant::B,
            "c" => TauVariant::C,
            other => bail!("unknown tau variant '{other}': expected b or c"),
        },
        tie_policy: if args.tie_credit == 0.0 {
            TiePolicy::Incorrect
        } else if args.tie_credit == 0.5 {
            TiePolicy::HalfCredit
        } else {
            bail!("--tie-credit must be 0 or 0.5");
        },
        bins: args.bins,
        average_experts: args.average_experts,
        include_human_candidates: !args.exclude_human_captions,
        strict: args.strict,
    };

    let mut report = run_meta_eval(&items, &metric, &table, &options)?;
    report.config = Some(serde_json::json!({
        "dataset": args.dataset.dataset,
        "kind": args.dataset.kind.as_str(),
        "scores": scores_path,
    }));

    ensure_output_dir(&args.output)?;
    write_pretty_json(&args.output.join("report.json"), &report)?;
    let markdown = report.to_markdown();
    std::fs::write(args.output.join("report.md"), &markdown)
        .with_context(|| format!("writing {}", args.output.join("report.md").display()))?;
    for (name, slice) in &report.slices {
        if let Some(heatmap) = &slice.heatmap {
            let path = args.output.join(format!("heatmap_{name}.csv"));
            std::fs::write(&path, heatmap.to_csv())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }

    print!("{markdown}");
    println!("wrote {}", args.output.join("report.json").display());
    Ok(())
}

pub fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let report: MetaEvalReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.report.display()))?;
    let markdown = report.to_markdown();
    match &args.output {
        Some(path) => std::fs::write(path, markdown)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{markdown}"),
    }
    Ok(())
}

pub fn cache(args: &CacheArgs) -> anyhow::Result<()> {
    match &args.action {
        CacheAction::Stats { cache_dir } => {
            let cache = EvalCache::open(cache_dir, CacheMode::Lenient)?;
            let stats = cache.disk_stats()?;
            println!("entries: {}", stats.entries);
            println!("total bytes: {}", stats.total_bytes);
        }
        CacheAction::Gc {
            cache_dir,
            older_than_days,
        } => {
            if !older_than_days.is_finite() || *older_than_days < 0.0 {
                bail!("--older-than-days must be a non-negative number");
            }
            let cache = EvalCache::open(cache_dir, CacheMode::Lenient)?;
            let report = cache.gc_older_than(Duration::from_secs_f64(older_than_days * 86400.0))?;
            println!(
                "removed {} entry(ies) ({} bytes), kept {}",
                report.removed_entries, report.removed_bytes, report.kept_entries
            );
        }
    }
    Ok(())
}
