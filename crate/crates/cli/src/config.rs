//! Settings resolution: defaults, then the TOML config file, then
//! command-line flags, highest last.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use capeval_core::cache::CacheMode;
use capeval_core::gateway::EndpointConfig;
use capeval_core::model::GenerationParams;
use capeval_core::pipeline::{PipelineMode, RunConfig};

use crate::RunArgs;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub endpoint: EndpointSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: Option<String>,
    pub auth_env: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub backoff_initial_ms: Option<u64>,
    pub backoff_multiplier: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub model: Option<String>,
    pub mode: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub workers: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<i64>,
    pub stage1_max_tokens: Option<u32>,
    pub stage2_max_tokens: Option<u32>,
}

pub fn load_file(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn resolve(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let file = match &args.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };

    let mode_name = args
        .mode
        .clone()
        .or_else(|| file.run.mode.clone())
        .unwrap_or_else(|| "visce".to_string());
    let Some(mode) = PipelineMode::parse(&mode_name) else {
        bail!("unknown mode '{mode_name}': expected vanilla, reference, description, or visce");
    };

    let mut endpoint = EndpointConfig::default();
    if let Some(v) = file.endpoint.base_url {
        endpoint.base_url = v;
    }
    if let Some(v) = file.endpoint.auth_env {
        endpoint.auth_env = Some(v);
    }
    if let Some(v) = file.endpoint.timeout_ms {
        endpoint.timeout_ms = v;
    }
    if let Some(v) = file.endpoint.max_retries {
        endpoint.max_retries = v;
    }
    if let Some(v) = file.endpoint.backoff_initial_ms {
        endpoint.backoff_initial_ms = v;
    }
    if let Some(v) = file.endpoint.backoff_multiplier {
        endpoint.backoff_multiplier = v;
    }
    if let Some(v) = &args.endpoint_url {
        endpoint.base_url = v.clone();
    }
    if let Some(v) = &args.auth_env {
        endpoint.auth_env = Some(v.clone());
    }

    let workers = args.workers.or(file.run.workers).unwrap_or(4);
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    endpoint.max_parallel = workers;

    let model = args
        .model
        .clone()
        .or_else(|| file.run.model.clone())
        .unwrap_or_else(|| "default".to_string());
    let mut stage1_params = GenerationParams::stage1_defaults(&model);
    let mut stage2_params = GenerationParams::stage2_defaults(&model);
    if let Some(v) = file.run.stage1_max_tokens {
        stage1_params.max_tokens = v;
    }
    if let Some(v) = file.run.stage2_max_tokens {
        stage2_params.max_tokens = v;
    }
    let temperature = args.temperature.or(file.run.temperature);
    if let Some(t) = temperature {
        stage1_params.temperature = t;
        stage2_params.temperature = t;
    }
    let seed = args.seed.or(file.run.seed);
    stage1_params.seed = seed;
    stage2_params.seed = seed;

    let cache_root = if args.no_cache {
        None
    } else {
        args.cache_dir.clone().or(file.run.cache_dir)
    };

    Ok(RunConfig {
        mode,
        endpoint,
        stage1_params,
        stage2_params,
        cache_root,
        cache_mode: if args.strict {
            CacheMode::Strict
        } else {
            CacheMode::Lenient
        },
        image_root: args.dataset.image_root.clone().or(file.run.image_root),
        workers,
        strict_parsing: args.strict,
        reproducible: args.reproducible,
        context_per_candidate: args.context_per_candidate,
    })
}
