//! End-to-end execution: load images, optionally extract visual context per
//! image, score every candidate, and assemble per-unit records.
//!
//! Work is spread over a fixed pool of threads pulling unit indexes from a
//! shared counter; results land in their original slots, so record order is
//! independent of scheduling. The first failure stops new work and surfaces
//! as an abort that carries every record completed so far.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{bleu4, rouge_l, tokenize, BaselineError, BaselineScores, CiderCorpus};
use crate::cache::{CacheCounters, CacheError, CacheKey, CacheMode, EvalCache};
use crate::dataset::{JudgedItem, Judgment, PreferredSide};
use crate::gateway::{EndpointConfig, Gateway, GatewayError, VlmBackend, VlmExchange};
use crate::model::{
    CaptionCandidate, EvalScore, GenerationParams, LoadedImage, ModelError, ReferenceSet,
};
use crate::parse::{decimal_truncated, parse_score, parse_visual_context, VisualContext};
use crate::prompt::{render, PromptError, PromptInputs, PromptMode, RenderedPrompt};
use crate::report::ScoreTable;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("run aborted after {} completed unit(s): {message}", completed.len())]
    Aborted {
        message: String,
        completed: Vec<EvalRecord>,
    },
    #[error("item {item_id} has no references, which {mode:?} mode requires")]
    MissingReferences {
        item_id: String,
        mode: PipelineMode,
    },
    #[error("{0:?} mode has no context extraction stage")]
    NoContextStage(PipelineMode),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// How captions are judged: one-shot prompts (vanilla, reference) or a
/// context-extraction stage followed by a scoring stage (description, visce).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Vanilla,
    Reference,
    Description,
    Visce,
}

impl PipelineMode {
    pub fn stage1_mode(&self) -> Option<PromptMode> {
        match self {
            PipelineMode::Description => Some(PromptMode::DescriptionStep1),
            PipelineMode::Visce => Some(PromptMode::VisceStep1),
            PipelineMode::Vanilla | PipelineMode::Reference => None,
        }
    }

    pub fn stage2_mode(&self) -> PromptMode {
        match self {
            PipelineMode::Vanilla => PromptMode::Vanilla,
            PipelineMode::Reference => PromptMode::Reference,
            PipelineMode::Description | PipelineMode::Visce => PromptMode::Step2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::Vanilla => "vanilla",
            PipelineMode::Reference => "reference",
            PipelineMode::Description => "description",
            PipelineMode::Visce => "visce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(PipelineMode::Vanilla),
            "reference" => Some(PipelineMode::Reference),
            "description" => Some(PipelineMode::Description),
            "visce" => Some(PipelineMode::Visce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub mode: PipelineMode,
    pub endpoint: EndpointConfig,
    pub stage1_params: GenerationParams,
    pub stage2_params: GenerationParams,
    /// `None` disables the on-disk cache.
    pub cache_root: Option<PathBuf>,
    pub cache_mode: CacheMode,
    pub image_root: Option<PathBuf>,
    pub workers: usize,
    /// Abort the run on the first unparseable score instead of recording it.
    pub strict_parsing: bool,
    /// Zero every wall-clock field so repeated runs serialize identically.
    pub reproducible: bool,
    /// Run the context stage once per candidate instead of once per image.
    /// Only observable without a cache or with sampling enabled: identical
    /// requests would hit the cache anyway.
    pub context_per_candidate: bool,
}

impl RunConfig {
    pub fn new(mode: PipelineMode, endpoint: EndpointConfig, model_id: &str) -> Self {
        RunConfig {
            mode,
            endpoint,
            stage1_params: GenerationParams::stage1_defaults(model_id),
            stage2_params: GenerationParams::stage2_defaults(model_id),
            cache_root: None,
            cache_mode: CacheMode::Lenient,
            image_root: None,
            workers: 4,
            strict_parsing: false,
            reproducible: false,
            context_per_candidate: false,
        }
    }
}

/// Everything produced for one scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub candidate_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<PreferredSide>,
    pub mode: PipelineMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<VlmExchange>,
    pub stage2: VlmExchange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_context: Option<VisualContext>,
    pub score: EvalScore,
    pub decimal_truncated: bool,
    pub elapsed_ms: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<EvalRecord>,
    pub parse_failures: usize,
    pub recovered: usize,
    pub cache: Option<CacheCounters>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub image_id: String,
    pub exchange: VlmExchange,
    pub visual_context: VisualContext,
}

struct Unit<'a> {
    item: &'a JudgedItem,
    candidate: &'a CaptionCandidate,
    side: Option<PreferredSide>,
    references: Option<&'a ReferenceSet>,
}

fn units(items: &[JudgedItem]) -> Vec<Unit<'_>> {
    let mut out = Vec::new();
    for item in items {
        match &item.payload {
            Judgment::Likert {
                candidate,
                references,
                ..
            }
            | Judgment::Thumb {
                candidate,
                references,
                ..
            } => out.push(Unit {
                item,
                candidate,
                side: None,
                references: references.as_ref(),
            }),
            Judgment::Pair {
                candidate_a,
                candidate_b,
                references,
                ..
            } => {
                out.push(Unit {
                    item,
                    candidate: candidate_a,
                    side: Some(PreferredSide::A),
                    references: references.as_ref(),
                });
                out.push(Unit {
                    item,
                    candidate: candidate_b,
                    side: Some(PreferredSide::B),
                    references: references.as_ref(),
                });
            }
        }
    }
    out
}

/// Run `f` over `0..count` on a bounded pool. The first error flips an abort
/// flag; workers finish their current call and stop picking up new indexes.
fn parallel_map<R: Send>(
    workers: usize,
    count: usize,
    f: impl Fn(usize) -> Result<R, String> + Sync,
) -> (Vec<Option<R>>, Option<String>) {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Vec<Mutex<Option<R>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let first_error: Mutex<Option<String>> = Mutex::new(None);

    let pool = workers.max(1).min(count.max(1));
    std::thread::scope(|scope| {
        for _ in 0..pool {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                match f(i) {
                    Ok(r) => *results[i].lock().unwrap() = Some(r),
                    Err(message) => {
                        abort.store(true, Ordering::SeqCst);
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(message);
                        }
                        break;
                    }
                }
            });
        }
    });

    (
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap())
            .collect(),
        first_error.into_inner().unwrap(),
    )
}

pub struct Pipeline {
    gateway: Gateway,
    cache: Option<EvalCache>,
    config: RunConfig,
}

impl Pipeline {
    pub fn new(backend: Arc<dyn VlmBackend>, config: RunConfig) -> Result<Self, PipelineError> {
        config.stage1_params.validate()?;
        config.stage2_params.validate()?;
        let gateway = Gateway::new(backend, config.endpoint.clone())?;
        let cache = match &config.cache_root {
            Some(root) => Some(EvalCache::open(root, config.cache_mode)?),
            None => None,
        };
        Ok(Pipeline {
            gateway,
            cache,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn cache_counters(&self) -> Option<CacheCounters> {
        self.cache.as_ref().map(EvalCache::counters)
    }

    fn complete_cached(
        &self,
        prompt: &RenderedPrompt,
        image: &LoadedImage,
        params: &GenerationParams,
    ) -> Result<VlmExchange, String> {
        let request = Gateway::build_request(prompt, image, params);
        let key = CacheKey::for_request(&request).map_err(|e| e.to_string())?;
        if let Some(cache) = &self.cache {
            match cache.get(&key) {
                Ok(Some(exchange)) => return Ok(exchange),
                Ok(None) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
        let mut exchange = self
            .gateway
            .complete(prompt, image, params)
            .map_err(|e| e.to_string())?;
        if self.config.reproducible {
            exchange.scrub_timings();
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &exchange).map_err(|e| e.to_string())?;
        }
        Ok(exchange)
    }

    fn load_images(
        &self,
        items: &[JudgedItem],
    ) -> Result<HashMap<String, Arc<LoadedImage>>, PipelineError> {
        let mut map = HashMap::new();
        for item in items {
            if !map.contains_key(&item.image.id) {
                let loaded = LoadedImage::load(&item.image, self.config.image_root.as_deref())?;
                map.insert(item.image.id.clone(), Arc::new(loaded));
            }
        }
        Ok(map)
    }

    fn distinct_image_ids(items: &[JudgedItem]) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut ids = Vec::new();
        for item in items {
            if seen.insert(item.image.id.clone()) {
                ids.push(item.image.id.clone());
            }
        }
        ids
    }

    fn stage1_for_image(
        &self,
        stage1_mode: PromptMode,
        image: &LoadedImage,
    ) -> Result<(VlmExchange, VisualContext), String> {
        let prompt = render(stage1_mode, PromptInputs::default()).map_err(|e| e.to_string())?;
        let exchange = self.complete_cached(&prompt, image, &self.config.stage1_params)?;
        let context =
            parse_visual_context(&exchange.response.raw_text).map_err(|e| e.to_string())?;
        Ok((exchange, context))
    }

    /// Run only the context stage, once per distinct image. With a cache
    /// configured this warms the entries a later scoring run will hit.
    pub fn extract_contexts(
        &self,
        items: &[JudgedItem],
    ) -> Result<Vec<ContextRecord>, PipelineError> {
        let stage1_mode = self
            .config
            .mode
            .stage1_mode()
            .ok_or(PipelineError::NoContextStage(self.config.mode))?;
        let images = self.load_images(items)?;
        let image_ids = Self::distinct_image_ids(items);

        let (results, error) = parallel_map(self.config.workers, image_ids.len(), |i| {
            let image = &images[&image_ids[i]];
            let (exchange, visual_context) = self.stage1_for_image(stage1_mode, image)?;
            Ok(ContextRecord {
                image_id: image_ids[i].clone(),
                exchange,
                visual_context,
            })
        });
        if let Some(message) = error {
            return Err(PipelineError::Aborted {
                message,
                completed: Vec::new(),
            });
        }
        Ok(results.into_iter().flatten().collect())
    }

    /// Score every candidate in `items`.
    pub fn run(&self, items: &[JudgedItem]) -> Result<RunOutcome, PipelineError> {
        let started = Instant::now();
        let images = self.load_images(items)?;
        let units = units(items);

        if self.config.mode == PipelineMode::Reference {
            if let Some(unit) = units.iter().find(|u| u.references.is_none()) {
                return Err(PipelineError::MissingReferences {
                    item_id: unit.item.item_id.clone(),
                    mode: self.config.mode,
                });
            }
        }

        let shared_contexts: HashMap<String, (VlmExchange, VisualContext)> =
            match self.config.mode.stage1_mode() {
                Some(stage1_mode) if !self.config.context_per_candidate => {
                    let image_ids = Self::distinct_image_ids(items);
                    let (results, error) =
                        parallel_map(self.config.workers, image_ids.len(), |i| {
                            self.stage1_for_image(stage1_mode, &images[&image_ids[i]])
                        });
                    if let Some(message) = error {
                        return Err(PipelineError::Aborted {
                            message,
                            completed: Vec::new(),
                        });
                    }
                    image_ids
                        .into_iter()
                        .zip(results.into_iter().flatten())
                        .collect()
                }
                _ => HashMap::new(),
            };

        let (results, error) = parallel_map(self.config.workers, units.len(), |i| {
            let unit = &units[i];
            let unit_started = Instant::now();
            let image = &images[&unit.item.image.id];

            let (stage1, visual_context) = match self.config.mode.stage1_mode() {
                None => (None, None),
                Some(stage1_mode) => {
                    if self.config.context_per_candidate {
                        let (exchange, context) = self.stage1_for_image(stage1_mode, image)?;
                        (Some(exchange), Some(context))
                    } else {
                        let (exchange, context) = shared_contexts[&unit.item.image.id].clone();
                        (Some(exchange), Some(context))
                    }
                }
            };

            let inputs = PromptInputs {
                caption: Some(&unit.candidate.text),
                references: unit.references.map(|r| r.references.as_slice()),
                context: visual_context.as_ref().map(|c| c.raw_text.as_str()),
            };
            let prompt =
                render(self.config.mode.stage2_mode(), inputs).map_err(|e| e.to_string())?;
            let stage2 = self.complete_cached(&prompt, image, &self.config.stage2_params)?;

            let raw = &stage2.response.raw_text;
            let truncated = decimal_truncated(raw);
            let score = match parse_score(raw) {
                Ok(score) => score,
                Err(failure) => {
                    if self.config.strict_parsing {
                        return Err(format!(
                            "unparseable score for {}/{}: {failure}",
                            unit.item.item_id, unit.candidate.id
                        ));
                    }
                    EvalScore::failed(failure.raw_response_digest)
                }
            };

            Ok(EvalRecord {
                item_id: unit.item.item_id.clone(),
                candidate_id: unit.candidate.id.clone(),
                side: unit.side,
                mode: self.config.mode,
                stage1,
                stage2,
                visual_context,
                score,
                decimal_truncated: truncated,
                elapsed_ms: if self.config.reproducible {
                    0
                } else {
                    unit_started.elapsed().as_millis() as u64
                },
            })
        });

        let completed: Vec<EvalRecord> = results.into_iter().flatten().collect();
        if let Some(message) = error {
            return Err(PipelineError::Aborted {
                message,
                completed,
            });
        }

        let parse_failures = completed
            .iter()
            .filter(|r| r.score.parse_status == crate::model::ParseStatus::Failed)
            .count();
        let recovered = completed
            .iter()
            .filter(|r| r.score.parse_status == crate::model::ParseStatus::Recovered)
            .count();
        Ok(RunOutcome {
            records: completed,
            parse_failures,
            recovered,
            cache: self.cache_counters(),
            elapsed_ms: if self.config.reproducible {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        })
    }
}

/// Map records into the join table used for meta-evaluation. Failed parses
/// become `None` so they are excluded and counted downstream.
pub fn score_table(records: &[EvalRecord]) -> ScoreTable {
    let mut table = ScoreTable::new();
    for record in records {
        table.insert(
            record.item_id.clone(),
            record.candidate_id.clone(),
            record.score.value.map(f64::from),
        );
    }
    table
}

/// Reference-based baseline scores for one candidate. `scores` is `None`
/// when the item carries no references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub item_id: String,
    pub candidate_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<PreferredSide>,
    pub scores: Option<BaselineScores>,
}

#[derive(Debug)]
pub struct BaselineOutcome {
    pub records: Vec<BaselineRecord>,
    pub skipped_no_references: usize,
}

/// Compute BLEU-4, ROUGE-L, and CIDEr-D for every candidate. The CIDEr idf
/// corpus has one document per distinct image with references.
pub fn compute_baselines(items: &[JudgedItem]) -> Result<BaselineOutcome, PipelineError> {
    let mut documents: Vec<Vec<Vec<String>>> = Vec::new();
    let mut seen_images = std::collections::HashSet::new();
    for item in items {
        if let Some(refs) = item.references() {
            if seen_images.insert(item.image.id.clone()) {
                documents.push(refs.references.iter().map(|r| tokenize(r)).collect());
            }
        }
    }
    let corpus = if documents.is_empty() {
        None
    } else {
        Some(CiderCorpus::from_documents(&documents)?)
    };

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for unit in units(items) {
        let scores = match (unit.references, &corpus) {
            (Some(refs), Some(corpus)) => {
                let cand_tokens = tokenize(&unit.candidate.text);
                let ref_tokens: Vec<Vec<String>> =
                    refs.references.iter().map(|r| tokenize(r)).collect();
                Some(BaselineScores {
                    bleu4: bleu4(&cand_tokens, &ref_tokens),
                    rouge_l: rouge_l(&cand_tokens, &ref_tokens),
                    cider_d: Some(corpus.score(&cand_tokens, &ref_tokens)?),
                })
            }
            _ => {
                skipped += 1;
                None
            }
        };
        records.push(BaselineRecord {
            item_id: unit.item.item_id.clone(),
            candidate_id: unit.candidate.id.clone(),
            side: unit.side,
            scores,
        });
    }
    Ok(BaselineOutcome {
        records,
        skipped_no_references: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMetric {
    Bleu4,
    RougeL,
    CiderD,
}

impl BaselineMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMetric::Bleu4 => "bleu4",
            BaselineMetric::RougeL => "rouge_l",
            BaselineMetric::CiderD => "cider_d",
        }
    }
}

pub fn baseline_score_table(records: &[BaselineRecord], metric: BaselineMetric) -> ScoreTable {
    let mut table = ScoreTable::new();
    for record in records {
        let value = record.scores.as_ref().and_then(|s| match metric {
            BaselineMetric::Bleu4 => Some(s.bleu4),
            BaselineMetric::RougeL => Some(s.rouge_l),
            BaselineMetric::CiderD => s.cider_d,
        });
        table.insert(record.item_id.clone(), record.candidate_id.clone(), value);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetKind, PascalCategory};
    use crate::gateway::{MissPolicy, MockBackend, MockKey, MockStep};
    use crate::model::{CaptionOrigin, ImageLocation, ImageRef, MediaType};

    struct Fixture {
        _dir: tempfile::TempDir,
        items: Vec<JudgedItem>,
        image_root: PathBuf,
    }

    fn fixture(num_images: usize, candidates_per_image: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut items = Vec::new();
        for i in 0..num_images {
            let file = format!("img-{i}.png");
            std::fs::write(dir.path().join(&file), format!("png bytes {i}")).unwrap();
            for c in 0..candidates_per_image {
                items.push(JudgedItem {
                    dataset: DatasetKind::Flickr8kExpert,
                    item_id: format!("item-{i}-{c}"),
                    image: ImageRef {
                        id: format!("img-{i}"),
                        location: ImageLocation::Path(file.clone().into()),
                        content_digest: None,
                        media_type: MediaType::Png,
                    },
                    payload: Judgment::Likert {
                        candidate: CaptionCandidate {
                            id: format!("cand-{i}-{c}"),
                            image_id: format!("img-{i}"),
                            text: format!("caption number {c} for image {i}"),
                            origin: CaptionOrigin::Unknown,
                            system: None,
                        },
                        references: Some(
                            ReferenceSet::new(
                                format!("img-{i}"),
                                vec![format!("reference caption for image {i}")],
                            )
                            .unwrap(),
                        ),
                        scores: vec![2.0, 3.0, 3.0],
                    },
                });
            }
        }
        let image_root = dir.path().to_path_buf();
        Fixture {
            _dir: dir,
            items,
            image_root,
        }
    }

    fn test_config(mode: PipelineMode, image_root: PathBuf) -> RunConfig {
        let endpoint = EndpointConfig {
            max_retries: 0,
            backoff_initial_ms: 0,
            ..Default::default()
        };
        let mut config = RunConfig::new(mode, endpoint, "test-model");
        config.image_root = Some(image_root);
        config.workers = 2;
        config
    }

    fn wildcard(template_id: &str, image_id: &str) -> MockKey {
        MockKey {
            template_id: template_id.into(),
            image_id: image_id.into(),
            inputs_digest: None,
        }
    }

    #[test]
    fn vanilla_mode_scores_every_candidate() {
        let fx = fixture(2, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Default("77".into())));
        let pipeline = Pipeline::new(
            mock.clone(),
            test_config(PipelineMode::Vanilla, fx.image_root.clone()),
        )
        .unwrap();
        let outcome = pipeline.run(&fx.items).unwrap();

        assert_eq!(outcome.records.len(), 4);
        assert_eq!(mock.attempts(), 4);
        for record in &outcome.records {
            assert_eq!(record.score.value, Some(77));
            assert!(record.stage1.is_none());
            assert!(record.visual_context.is_none());
            assert_eq!(record.stage2.request.template_id, "vanilla@v1");
        }
        assert_eq!(outcome.parse_failures, 0);
    }

    #[test]
    fn records_preserve_unit_order() {
        let fx = fixture(3, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Default("50".into())));
        let pipeline = Pipeline::new(
            mock,
            test_config(PipelineMode::Vanilla, fx.image_root.clone()),
        )
        .unwrap();
        let outcome = pipeline.run(&fx.items).unwrap();
        let got: Vec<&str> = outcome.records.iter().map(|r| r.item_id.as_str()).collect();
        let want: Vec<&str> = fx.items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn visce_mode_extracts_context_once_per_image() {
        let fx = fixture(2, 3);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        for i in 0..2 {
            mock.script_text(
                wildcard("visce_step1@v1", &format!("img-{i}")),
                format!("List of Important Objects (up to five):\n- Object 1: thing {i}"),
            );
            mock.script_text(wildcard("step2@v1", &format!("img-{i}")), "64");
        }
        let pipeline = Pipeline::new(
            mock.clone(),
            test_config(PipelineMode::Visce, fx.image_root.clone()),
        )
        .unwrap();
        let outcome = pipeline.run(&fx.items).unwrap();

        // 2 context calls + 6 scoring calls.
        assert_eq!(mock.attempts(), 8);
        assert_eq!(outcome.records.len(), 6);
        for record in &outcome.records {
            let context = record.visual_context.as_ref().unwrap();
            assert!(context.parsed.is_some());
            assert!(record
                .stage2
                .request
                .prompt_text
                .contains(&context.raw_text));
            assert_eq!(record.score.value, Some(64));
        }
    }

    #[test]
    fn cache_makes_second_run_free() {
        let fx = fixture(2, 2);
        let cache_dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        for i in 0..2 {
            mock.script_text(
                wildcard("visce_step1@v1", &format!("img-{i}")),
                "List of Important Objects:\n- Object 1: a thing",
            );
            mock.script_text(wildcard("step2@v1", &format!("img-{i}")), "42");
        }

        let mut config = test_config(PipelineMode::Visce, fx.image_root.clone());
        config.cache_root = Some(cache_dir.path().to_path_buf());
        config.reproducible = true;

        let pipeline = Pipeline::new(mock.clone(), config.clone()).unwrap();
        let first = pipeline.run(&fx.items).unwrap();
        assert_eq!(mock.attempts(), 6);

        let pipeline2 = Pipeline::new(mock.clone(), config).unwrap();
        let second = pipeline2.run(&fx.items).unwrap();
        assert_eq!(mock.attempts(), 6, "warm run must not call the endpoint");
        assert_eq!(first.records, second.records);

        let counters = second.cache.unwrap();
        assert_eq!(counters.hits, 6);
        assert_eq!(counters.misses, 0);
    }

    #[test]
    fn context_per_candidate_repeats_stage1_without_cache() {
        let fx = fixture(2, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        for i in 0..2 {
            mock.script_text(
                wildcard("visce_step1@v1", &format!("img-{i}")),
                "Relationships:\n- next to each other",
            );
            mock.script_text(wildcard("step2@v1", &format!("img-{i}")), "33");
        }
        let mut config = test_config(PipelineMode::Visce, fx.image_root.clone());
        config.context_per_candidate = true;
        let pipeline = Pipeline::new(mock.clone(), config).unwrap();
        pipeline.run(&fx.items).unwrap();
        // 4 stage-1 calls (one per candidate) + 4 stage-2 calls.
        assert_eq!(mock.attempts(), 8);
    }

    #[test]
    fn lenient_parsing_records_failures() {
        let fx = fixture(1, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        let prompts: Vec<String> = fx
            .items
            .iter()
            .map(|item| match &item.payload {
                Judgment::Likert { candidate, .. } => candidate.text.clone(),
                _ => unreachable!(),
            })
            .collect();
        let digest_of = |caption: &str| {
            render(
                PromptMode::Vanilla,
                PromptInputs {
                    caption: Some(caption),
                    ..Default::default()
                },
            )
            .unwrap()
            .inputs_digest
        };
        mock.script_text(
            MockKey {
                template_id: "vanilla@v1".into(),
                image_id: "img-0".into(),
                inputs_digest: Some(digest_of(&prompts[0])),
            },
            "88",
        );
        mock.script_text(
            MockKey {
                template_id: "vanilla@v1".into(),
                image_id: "img-0".into(),
                inputs_digest: Some(digest_of(&prompts[1])),
            },
            "I cannot rate this caption.",
        );

        let pipeline = Pipeline::new(
            mock,
            test_config(PipelineMode::Vanilla, fx.image_root.clone()),
        )
        .unwrap();
        let outcome = pipeline.run(&fx.items).unwrap();
        assert_eq!(outcome.parse_failures, 1);
        assert_eq!(outcome.records[0].score.value, Some(88));
        assert_eq!(outcome.records[1].score.value, None);
    }

    #[test]
    fn strict_parsing_aborts_with_completed_records() {
        let fx = fixture(1, 3);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        mock.script(
            wildcard("vanilla@v1", "img-0"),
            vec![
                MockStep::Text {
                    raw_text: "88".into(),
                    finish_reason: None,
                },
                MockStep::Text {
                    raw_text: "no rating".into(),
                    finish_reason: None,
                },
            ],
        );
        let mut config = test_config(PipelineMode::Vanilla, fx.image_root.clone());
        config.strict_parsing = true;
        config.workers = 1;
        let pipeline = Pipeline::new(mock, config).unwrap();
        match pipeline.run(&fx.items).unwrap_err() {
            PipelineError::Aborted { message, completed } => {
                assert!(message.contains("unparseable score"), "{message}");
                assert_eq!(completed.len(), 1);
                assert_eq!(completed[0].score.value, Some(88));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn endpoint_failures_abort_the_run() {
        let fx = fixture(1, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        mock.script(
            wildcard("vanilla@v1", "img-0"),
            vec![
                MockStep::Text {
                    raw_text: "55".into(),
                    finish_reason: None,
                },
                MockStep::Status {
                    status: 400,
                    body: "bad".into(),
                },
            ],
        );
        let mut config = test_config(PipelineMode::Vanilla, fx.image_root.clone());
        config.workers = 1;
        let pipeline = Pipeline::new(mock, config).unwrap();
        match pipeline.run(&fx.items).unwrap_err() {
            PipelineError::Aborted { message, completed } => {
                assert!(message.contains("400"), "{message}");
                assert_eq!(completed.len(), 1);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn reference_mode_requires_references() {
        let mut fx = fixture(1, 1);
        if let Judgment::Likert { references, .. } = &mut fx.items[0].payload {
            *references = None;
        }
        let mock = Arc::new(MockBackend::new(MissPolicy::Default("1".into())));
        let pipeline = Pipeline::new(
            mock,
            test_config(PipelineMode::Reference, fx.image_root.clone()),
        )
        .unwrap();
        assert!(matches!(
            pipeline.run(&fx.items),
            Err(PipelineError::MissingReferences { .. })
        ));
    }

    #[test]
    fn extract_contexts_runs_stage1_only() {
        let fx = fixture(3, 2);
        let mock = Arc::new(MockBackend::new(MissPolicy::Error));
        for i in 0..3 {
            mock.script_text(
                wildcard("description_step1@v1", &format!("img-{i}")),
                format!("A photo of thing {i}."),
            );
        }
        let pipeline = Pipeline::new(
            mock.clone(),
            test_config(PipelineMode::Description, fx.image_root.clone()),
        )
        .unwrap();
        let records = pipeline.extract_contexts(&fx.items).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(mock.attempts(), 3);
        assert!(records.iter().all(|r| r.visual_context.parsed.is_none()));

        let vanilla = Pipeline::new(
            mock,
            test_config(PipelineMode::Vanilla, fx.image_root.clone()),
        )
        .unwrap();
        assert!(matches!(
            vanilla.extract_contexts(&fx.items),
            Err(PipelineError::NoContextStage(PipelineMode::Vanilla))
        ));
    }

    #[test]
    fn score_table_marks_failures_as_none() {
        let fx = fixture(1, 1);
        let mock = Arc::new(MockBackend::new(MissPolicy::Default("nope".into())));
        let pipeline = Pipeline::new(
            mock,
            test_config(PipelineMode::Vanilla, fx.image_root.clone()),
        )
        .unwrap();
        let outcome = pipeline.run(&fx.items).unwrap();
        let table = score_table(&outcome.records);
        assert_eq!(table.len(), 1);
        assert_eq!(outcome.parse_failures, 1);
    }

    #[test]
    fn baselines_cover_every_unit_and_flag_missing_references() {
        let mut fx = fixture(2, 2);
        if let Judgment::Likert { references, .. } = &mut fx.items[3].payload {
            *references = None;
        }
        let outcome = compute_baselines(&fx.items).unwrap();
        assert_eq!(outcome.records.len(), 4);
        assert_eq!(outcome.skipped_no_references, 1);
        assert!(outcome.records[3].scores.is_none());
        for record in &outcome.records[..3] {
            let scores = record.scores.as_ref().unwrap();
            assert!(scores.rouge_l > 0.0);
            assert!(scores.cider_d.is_some());
        }

        let table = baseline_score_table(&outcome.records, BaselineMetric::RougeL);
        assert_eq!(table.len(), 4);
    }

    #[test]
    fn pair_items_produce_two_units_with_sides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img.png"), b"png").unwrap();
        let item = JudgedItem {
            dataset: DatasetKind::Pascal50s,
            item_id: "p1".into(),
            image: ImageRef {
                id: "img".into(),
                location: ImageLocation::Path("img.png".into()),
                content_digest: None,
                media_type: MediaType::Png,
            },
            payload: Judgment::Pair {
                candidate_a: CaptionCandidate {
                    id: "a".into(),
                    image_id: "img".into(),
                    text: "first caption".into(),
                    origin: CaptionOrigin::Human,
                    system: None,
                },
                candidate_b: CaptionCandidate {
                    id: "b".into(),
                    image_id: "img".into(),
                    text: "second caption".into(),
                    origin: CaptionOrigin::Machine,
                    system: None,
                },
                references: None,
                category: PascalCategory::Hm,
                preferred: PreferredSide::A,
            },
        };
        let mock = Arc::new(MockBackend::new(MissPolicy::Default("60".into())));
        let pipeline = Pipeline::new(
            mock,
            test_config(PipelineMode::Vanilla, dir.path().to_path_buf()),
        )
        .unwrap();
        let outcome = pipeline.run(&[item]).unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.records[0].side, Some(PreferredSide::A));
        assert_eq!(outcome.records[1].side, Some(PreferredSide::B));
        assert_eq!(outcome.records[0].candidate_id, "a");
        assert_eq!(outcome.records[1].candidate_id, "b");
    }
}
