//! End-to-end pipeline: the extraction step, query augmentation, the
//! tool-use step, grading, and the artifacts written for each run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{is_signal_entity, load_dataset, load_tools, DatasetError, Sample, ToolCall, ToolDoc};
use crate::evaluator::{
    aggregate, extract_tool_call, grade_extraction, grade_tool_use, percent, AggregateError,
    EvalReport, ReportLabel, SampleRecord,
};
use crate::http::RetryPolicy;
use crate::kg::{links_of, rechain, Document, GroundedPath, KgError, KnowledgeGraph, RelationPath, Triple};
use crate::llm::{
    render_path_prompt, render_tool_prompt, ChatBackend, ChatRequest, ChatResponse, Gateway,
    HttpChatBackend, LlmError, PromptTemplate, RecordingBackend, ReplayBackend, ScriptedBackend,
    DEFAULT_TEMPERATURE,
};
use crate::path_extractor::{extract_all, ExtractionConfig, Strategy, DEFAULT_K, DEFAULT_MAX_CANDIDATES};
use crate::search_parser::{parse_kg_search, render_search};
use crate::similarity::{
    retrieve_documents, EmbeddingSimilarity, LexicalSimilarity, RemoteEmbedder, SimilarityError,
    SimilarityProvider, TextTemplate, VectorFile,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("knowledge graph: {0}")]
    Kg(#[from] KgError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// A request with its KG context appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    pub base_query: String,
    pub paths: Vec<GroundedPath>,
    pub rendered: String,
}

impl AugmentedQuery {
    /// A trailing period on the base query is folded into the joining
    /// sentence so the result never contains `..`.
    pub fn new(base_query: impl Into<String>, paths: Vec<GroundedPath>) -> Self {
        let base_query = base_query.into();
        let rendered = if paths.iter().all(GroundedPath::is_empty) {
            base_query.clone()
        } else {
            let links: Vec<String> = paths
                .iter()
                .flat_map(GroundedPath::links)
                .map(Triple::to_string)
                .collect();
            let stem = base_query.trim_end();
            let stem = stem.strip_suffix('.').unwrap_or(stem);
            format!(
                "{stem}. The extra information for this query is ({}).",
                links.join(", ")
            )
        };
        Self {
            base_query,
            paths,
            rendered,
        }
    }

    /// Each link as its own one-edge path.
    pub fn from_links(base_query: impl Into<String>, links: impl IntoIterator<Item = Triple>) -> Self {
        let paths = links
            .into_iter()
            .map(|t| GroundedPath::new(vec![t]).expect("single link is a chain"))
            .collect();
        Self::new(base_query, paths)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    /// Tool use with the gold links as context.
    #[default]
    Golden,
    /// Model-generated paths grounded in the KG.
    Extracted,
    /// Every KG triple as context.
    FullKg,
    /// The `n` best-matching one-sentence documents, mapped back to links.
    Documents,
    /// Golden context with signal entities replaced by real values.
    TrueValues,
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Golden => "golden",
            ModeKind::Extracted => "extracted",
            ModeKind::FullKg => "full_kg",
            ModeKind::Documents => "documents",
            ModeKind::TrueValues => "true_values",
        }
    }

    pub fn uses_extraction_model(self) -> bool {
        self == ModeKind::Extracted
    }
}

impl std::str::FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeConfig {
    #[serde(default)]
    pub kind: ModeKind,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub value_map: BTreeMap<String, String>,
}

fn default_strategy() -> Strategy {
    Strategy::GreedySearch
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_max_candidates() -> usize {
    DEFAULT_MAX_CANDIDATES
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            kind: ModeKind::default(),
            strategy: default_strategy(),
            k: DEFAULT_K,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            n: None,
            value_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tooluse: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityBackend {
    #[default]
    Lexical,
    VectorFile,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    #[serde(default)]
    pub backend: SimilarityBackend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub template: TextTemplate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Also pass the candidate tools through the endpoint's native
    /// function-calling field.
    #[serde(default)]
    pub native_tools: bool,
}

fn default_parallelism() -> usize {
    4
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            endpoints: Endpoints::default(),
            mode: ModeConfig::default(),
            similarity: SimilarityConfig::default(),
            paths: PathsConfig::default(),
            parallelism: default_parallelism(),
            temperature: DEFAULT_TEMPERATURE,
            native_tools: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(source: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(source).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg = Self::from_json(&read_file(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        let p = &mut cfg.paths;
        for slot in [
            &mut p.kg,
            &mut p.dataset,
            &mut p.tools,
            &mut p.replay,
            &mut p.record,
            &mut p.output_dir,
        ] {
            resolve(slot);
        }
        resolve(&mut cfg.similarity.path);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be within [0, 2]");
        }
        ExtractionConfig {
            strategy: self.mode.strategy,
            k: self.mode.k,
            max_candidates: self.mode.max_candidates,
        }
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        match self.mode.kind {
            ModeKind::Documents if self.mode.n.unwrap_or(0) == 0 => {
                bad("documents mode requires n >= 1")
            }
            ModeKind::TrueValues if self.mode.value_map.is_empty() => {
                bad("true_values mode requires a value_map")
            }
            _ => Ok(()),
        }
    }

    pub fn extraction_config(&self) -> ExtractionConfig {
        ExtractionConfig {
            strategy: self.mode.strategy,
            k: self.mode.k,
            max_candidates: self.mode.max_candidates,
        }
    }

    pub fn label(&self) -> ReportLabel {
        let kind = self.mode.kind;
        ReportLabel {
            mode: kind.as_str().to_string(),
            strategy: (kind == ModeKind::Extracted).then(|| {
                serde_json::to_value(self.mode.strategy)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default()
            }),
            extraction_model: kind
                .uses_extraction_model()
                .then(|| self.endpoints.extraction.as_ref().map(|e| e.model.clone()))
                .flatten(),
            tooluse_model: self.endpoints.tooluse.as_ref().map(|e| e.model.clone()),
        }
    }
}

/// Which stages a corpus run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub extraction: bool,
    pub tool_use: bool,
}

impl Stages {
    pub const BOTH: Stages = Stages {
        extraction: true,
        tool_use: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    Model,
    Documents,
}

/// Everything the extraction step produced for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionLog {
    pub source: ContextSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<String>,
    /// Raw model text; absent when the call failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub searches: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub documents: Vec<String>,
    pub extracted: Vec<GroundedPath>,
    pub fake_relation_count: usize,
    pub candidate_count_pre_filter: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolUseLog {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ChatResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<ToolCall>,
}

/// Per-sample raw I/O: the input to offline re-grading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLog {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_use: Option<ToolUseLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub logs: Vec<SampleLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub coverage: f64,
    pub em: f64,
    pub f1: f64,
}

/// Replaces whole values found in `map`.
fn map_value(map: &BTreeMap<String, String>, v: &str) -> String {
    map.get(v).cloned().unwrap_or_else(|| v.to_string())
}

pub fn apply_value_map_to_triple(map: &BTreeMap<String, String>, t: &Triple) -> Triple {
    Triple::new(
        map_value(map, &t.head),
        t.relation.clone(),
        map_value(map, &t.tail),
    )
    .expect("mapped fields stay non-empty")
}

pub fn apply_value_map_to_call(map: &BTreeMap<String, String>, call: &ToolCall) -> ToolCall {
    ToolCall {
        name: call.name.clone(),
        parameters: call
            .parameters
            .iter()
            .map(|(k, v)| (k.clone(), map_value(map, v)))
            .collect(),
    }
}

/// Signal entities in the dataset's gold links and call values that `map`
/// does not cover.
pub fn unmapped_signals(samples: &[Sample], map: &BTreeMap<String, String>) -> BTreeSet<String> {
    samples
        .iter()
        .flat_map(|s| {
            s.gold_links
                .iter()
                .flat_map(|t| [t.head.clone(), t.tail.clone()])
                .chain(s.gold_call.parameters.values().cloned())
        })
        .filter(|e| is_signal_entity(e) && !map.contains_key(e))
        .collect()
}

/// The gold links of `sample` as `KG.search` expressions, one per chain.
pub fn gold_echo_text(sample: &Sample) -> String {
    rechain(&sample.gold_links)
        .iter()
        .filter_map(|p| {
            let first = p.links().first()?;
            let path = RelationPath::new(
                first.head.clone(),
                p.links().iter().map(|t| t.relation.clone()),
            )
            .ok()?;
            Some(render_search(&path))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Mock models that answer each sample with its gold path (extraction) and
/// its gold call as JSON (tool use), keyed on the sample's request text.
pub fn gold_echo_backends(samples: &[Sample], map: &BTreeMap<String, String>) -> (ScriptedBackend, ScriptedBackend) {
    let extraction = ScriptedBackend::new(
        samples
            .iter()
            .map(|s| (s.prompt_query(), ChatResponse::text(gold_echo_text(s)))),
    );
    let tooluse = ScriptedBackend::new(samples.iter().map(|s| {
        let call = apply_value_map_to_call(map, &s.gold_call);
        (s.prompt_query(), ChatResponse::text(call.to_value().to_string()))
    }));
    (extraction, tooluse)
}

type BackendPair = (Arc<dyn ChatBackend>, Arc<dyn ChatBackend>);

pub struct Harness {
    pub kg: KnowledgeGraph,
    pub tools: Vec<ToolDoc>,
    pub samples: Vec<Sample>,
    pub config: RunConfig,
    documents: Vec<Document>,
    extraction_gateway: Option<Gateway>,
    tooluse_gateway: Option<Gateway>,
    similarity: Option<Arc<dyn SimilarityProvider>>,
    path_template: PromptTemplate,
    tool_template: PromptTemplate,
}

impl Harness {
    pub fn new(
        kg: KnowledgeGraph,
        tools: Vec<ToolDoc>,
        samples: Vec<Sample>,
        config: RunConfig,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        let known: BTreeSet<&str> = tools.iter().map(|t| t.name.as_str()).collect();
        for s in &samples {
            for name in s.candidate_tools.iter().flatten() {
                if !known.contains(name.as_str()) {
                    return Err(HarnessError::Config(format!(
                        "sample {} lists unknown candidate tool {name:?}",
                        s.id
                    )));
                }
            }
        }
        if config.mode.kind == ModeKind::TrueValues {
            let missing = unmapped_signals(&samples, &config.mode.value_map);
            if !missing.is_empty() {
                return Err(HarnessError::Config(format!(
                    "value_map lacks entries for {:?}",
                    missing
                )));
            }
        }
        let documents = kg.to_documents();
        Ok(Self {
            kg,
            tools,
            samples,
            config,
            documents,
            extraction_gateway: None,
            tooluse_gateway: None,
            similarity: None,
            path_template: PromptTemplate::default_path(),
            tool_template: PromptTemplate::default_tool(),
        })
    }

    /// Loads KG, tools and dataset from the config's paths and builds the
    /// gateways and similarity backend it describes.
    pub fn from_config(config: RunConfig) -> Result<Self, HarnessError> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| HarnessError::Config(format!("paths.{what} is required")))
        };
        let kg = KnowledgeGraph::load(&read_file(&need(&config.paths.kg, "kg")?)?)?;
        let samples = load_dataset(&read_file(&need(&config.paths.dataset, "dataset")?)?)?;
        let tools = match &config.paths.tools {
            Some(p) => load_tools(&read_file(p)?)?,
            None => Vec::new(),
        };
        let mut h = Self::new(kg, tools, samples, config)?;
        let (extraction, tooluse) = h.build_backends()?;
        h = h.with_backends(extraction, tooluse);
        h.similarity = Some(h.build_similarity()?);
        Ok(h)
    }

    /// Replay store for both stages, or one HTTP backend per stage endpoint
    /// (optionally recorded into a shared store).
    fn build_backends(&self) -> Result<BackendPair, HarnessError> {
        if let Some(replay) = &self.config.paths.replay {
            let replay: Arc<dyn ChatBackend> = Arc::new(ReplayBackend::open(replay)?);
            return Ok((replay.clone(), replay));
        }
        let http = |ep: &Option<EndpointConfig>| -> Arc<dyn ChatBackend> {
            let url = ep.as_ref().map(|e| e.base_url.as_str()).unwrap_or_default();
            Arc::new(HttpChatBackend::from_env(url, RetryPolicy::default()))
        };
        let extraction = http(&self.config.endpoints.extraction);
        let tooluse = http(&self.config.endpoints.tooluse);
        match &self.config.paths.record {
            Some(path) => {
                let recorder = RecordingBackend::create(extraction, path)?;
                let sibling = recorder.sibling(tooluse);
                Ok((Arc::new(recorder), Arc::new(sibling)))
            }
            None => Ok((extraction, tooluse)),
        }
    }

    fn build_similarity(&self) -> Result<Arc<dyn SimilarityProvider>, HarnessError> {
        let sc = &self.config.similarity;
        Ok(match sc.backend {
            SimilarityBackend::Lexical => Arc::new(LexicalSimilarity::new(sc.template)),
            SimilarityBackend::VectorFile => {
                let path = sc
                    .path
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("similarity.path is required".into()))?;
                let mut required: Vec<String> = self
                    .kg
                    .relation_vocab()
                    .iter()
                    .map(|r| sc.template.apply(r))
                    .collect();
                if self.config.mode.kind == ModeKind::Documents {
                    required.extend(self.documents.iter().map(|d| sc.template.apply(&d.text)));
                    required.extend(self.samples.iter().map(|s| sc.template.apply(&s.prompt_query())));
                }
                let file = VectorFile::load(&read_file(path)?, &required)?;
                Arc::new(EmbeddingSimilarity::new(Box::new(file), sc.template))
            }
            SimilarityBackend::Remote => {
                let url = sc
                    .url
                    .clone()
                    .ok_or_else(|| HarnessError::Config("similarity.url is required".into()))?;
                let model = sc.model.clone().unwrap_or_default();
                Arc::new(EmbeddingSimilarity::new(
                    Box::new(RemoteEmbedder::from_env(url, model)),
                    sc.template,
                ))
            }
        })
    }

    pub fn with_backends(mut self, extraction: Arc<dyn ChatBackend>, tooluse: Arc<dyn ChatBackend>) -> Self {
        self.extraction_gateway = Some(Gateway::new(extraction, self.config.parallelism));
        self.tooluse_gateway = Some(Gateway::new(tooluse, self.config.parallelism));
        self
    }

    pub fn with_similarity(mut self, sim: Arc<dyn SimilarityProvider>) -> Self {
        self.similarity = Some(sim);
        self
    }

    pub fn with_templates(mut self, path: PromptTemplate, tool: PromptTemplate) -> Self {
        self.path_template = path;
        self.tool_template = tool;
        self
    }

    fn similarity(&self) -> Arc<dyn SimilarityProvider> {
        self.similarity
            .clone()
            .unwrap_or_else(|| Arc::new(LexicalSimilarity::new(self.config.similarity.template)))
    }

    fn candidate_tools(&self, sample: &Sample) -> Vec<ToolDoc> {
        match &sample.candidate_tools {
            Some(names) => self
                .tools
                .iter()
                .filter(|t| names.contains(&t.name))
                .cloned()
                .collect(),
            None => self.tools.clone(),
        }
    }

    fn model_for(&self, stage: &str) -> Result<String, HarnessError> {
        let ep = match stage {
            "extraction" => &self.config.endpoints.extraction,
            _ => &self.config.endpoints.tooluse,
        };
        ep.as_ref()
            .map(|e| e.model.clone())
            .ok_or_else(|| HarnessError::Config(format!("endpoints.{stage} is required")))
    }

    /// Path generation, parsing and grounding for one sample. Model and
    /// grounding failures are recorded in the log, never raised.
    pub fn run_extraction_step(&self, sample: &Sample) -> Result<ExtractionLog, HarnessError> {
        let gateway = self
            .extraction_gateway
            .as_ref()
            .ok_or_else(|| HarnessError::Config("no extraction backend configured".into()))?;
        let mut log = ExtractionLog {
            source: ContextSource::Model,
            request_digest: None,
            raw_text: None,
            error: None,
            searches: Vec::new(),
            documents: Vec::new(),
            extracted: Vec::new(),
            fake_relation_count: 0,
            candidate_count_pre_filter: 0,
            truncated: false,
        };
        let messages = match render_path_prompt(&self.kg, &sample.prompt_query(), &self.path_template) {
            Ok(m) => m,
            Err(e) => {
                log.error = Some(e.to_string());
                return Ok(log);
            }
        };
        let mut request = ChatRequest::new(self.model_for("extraction")?, messages);
        request.temperature = self.config.temperature;
        log.request_digest = Some(request.digest());
        let text = match gateway.complete(&request) {
            Ok(resp) => resp.text,
            Err(e) => {
                log.error = Some(e.to_string());
                return Ok(log);
            }
        };
        log.raw_text = Some(text.clone());
        let Ok(parsed) = parse_kg_search(&text) else {
            return Ok(log);
        };
        log.searches = parsed.searches.iter().map(render_search).collect();
        let sim = self.similarity();
        match extract_all(&self.kg, &parsed.searches, &self.config.extraction_config(), Some(sim.as_ref())) {
            Ok(r) => {
                log.extracted = r.grounded.into_iter().collect();
                log.fake_relation_count = r.fake_relation_count;
                log.candidate_count_pre_filter = r.candidate_count_pre_filter;
                log.truncated = r.truncated;
            }
            Err(e) => log.error = Some(e.to_string()),
        }
        Ok(log)
    }

    /// The `n` best documents for the sample's request, as links.
    pub fn retrieve_step(&self, sample: &Sample, n: usize) -> Result<ExtractionLog, HarnessError> {
        let docs = retrieve_documents(self.similarity().as_ref(), &sample.prompt_query(), &self.documents, n)?;
        Ok(ExtractionLog {
            source: ContextSource::Documents,
            request_digest: None,
            raw_text: None,
            error: None,
            searches: Vec::new(),
            documents: docs.iter().map(|d| d.id.clone()).collect(),
            extracted: docs
                .into_iter()
                .map(|d| GroundedPath::new(vec![d.source_triple]).expect("single link"))
                .collect(),
            fake_relation_count: 0,
            candidate_count_pre_filter: n.min(self.documents.len()),
            truncated: false,
        })
    }

    /// Context for the tool-use step under the configured mode.
    pub fn context(&self, sample: &Sample, extraction: Option<&ExtractionLog>) -> AugmentedQuery {
        let base = sample.prompt_query();
        match self.config.mode.kind {
            ModeKind::Golden => AugmentedQuery::new(base, rechain(&sample.gold_links)),
            ModeKind::TrueValues => {
                let map = &self.config.mode.value_map;
                let links: Vec<Triple> = sample
                    .gold_links
                    .iter()
                    .map(|t| apply_value_map_to_triple(map, t))
                    .collect();
                AugmentedQuery::new(base, rechain(&links))
            }
            ModeKind::FullKg => AugmentedQuery::from_links(base, self.kg.triples().iter().cloned()),
            ModeKind::Extracted | ModeKind::Documents => AugmentedQuery::new(
                base,
                extraction.map(|e| e.extracted.clone()).unwrap_or_default(),
            ),
        }
    }

    pub fn run_tooluse_step(&self, sample: &Sample, query: &AugmentedQuery) -> Result<ToolUseLog, HarnessError> {
        let gateway = self
            .tooluse_gateway
            .as_ref()
            .ok_or_else(|| HarnessError::Config("no tool-use backend configured".into()))?;
        let mut log = ToolUseLog {
            query: query.rendered.clone(),
            request_digest: None,
            response: None,
            error: None,
            call: None,
        };
        let tools = self.candidate_tools(sample);
        let messages = match render_tool_prompt(&query.rendered, &tools, &self.tool_template) {
            Ok(m) => m,
            Err(e) => {
                log.error = Some(e.to_string());
                return Ok(log);
            }
        };
        let mut request = ChatRequest::new(self.model_for("tooluse")?, messages);
        request.temperature = self.config.temperature;
        if self.config.native_tools {
            request.tools = Some(tools);
        }
        log.request_digest = Some(request.digest());
        match gateway.complete(&request) {
            Ok(resp) => {
                log.call = extract_tool_call(&resp);
                log.response = Some(resp);
            }
            Err(e) => log.error = Some(e.to_string()),
        }
        Ok(log)
    }

    pub fn run_sample(&self, sample: &Sample, stages: Stages) -> Result<SampleLog, HarnessError> {
        let kind = self.config.mode.kind;
        let extraction = match kind {
            ModeKind::Extracted if stages.extraction => Some(self.run_extraction_step(sample)?),
            ModeKind::Documents if stages.extraction => {
                Some(self.retrieve_step(sample, self.config.mode.n.unwrap_or(1))?)
            }
            _ => None,
        };
        let tool_use = if stages.tool_use {
            let query = self.context(sample, extraction.as_ref());
            Some(self.run_tooluse_step(sample, &query)?)
        } else {
            None
        };
        Ok(SampleLog {
            id: sample.id.clone(),
            extraction,
            tool_use,
        })
    }

    /// Runs every sample on a pool of `parallelism` workers; logs and
    /// records keep dataset order.
    pub fn run_corpus(&self, stages: Stages) -> Result<RunOutcome, HarnessError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let logs: Vec<SampleLog> = pool.install(|| {
            self.samples
                .par_iter()
                .map(|s| self.run_sample(s, stages))
                .collect::<Result<_, _>>()
        })?;
        let report = self.grade(&logs)?;
        Ok(RunOutcome { report, logs })
    }

    /// Grades logged outputs against the dataset. Depends only on the logs,
    /// the KG, the dataset and the mode.
    pub fn grade(&self, logs: &[SampleLog]) -> Result<EvalReport, HarnessError> {
        let by_id: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let records = logs
            .iter()
            .map(|log| {
                let sample = by_id.get(log.id.as_str()).ok_or_else(|| {
                    HarnessError::Config(format!("log refers to unknown sample {:?}", log.id))
                })?;
                Ok(self.grade_one(sample, log))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(aggregate(records, self.config.label())?)
    }

    fn grade_one(&self, sample: &Sample, log: &SampleLog) -> SampleRecord {
        let extraction = log.extraction.as_ref().map(|e| {
            let extracted = links_of(&e.extracted);
            let terminals = sample.gold_terminals();
            match e.source {
                ContextSource::Documents => {
                    grade_extraction(&sample.gold_set(), &extracted, None, &self.kg, &terminals)
                }
                ContextSource::Model => {
                    let parsed = parse_kg_search(e.raw_text.as_deref().unwrap_or(""));
                    grade_extraction(&sample.gold_set(), &extracted, Some(&parsed), &self.kg, &terminals)
                }
            }
        });
        let tool_use = log.tool_use.as_ref().map(|t| {
            let pred = t.response.as_ref().and_then(extract_tool_call);
            let gold = if self.config.mode.kind == ModeKind::TrueValues {
                apply_value_map_to_call(&self.config.mode.value_map, &sample.gold_call)
            } else {
                sample.gold_call.clone()
            };
            grade_tool_use(pred.as_ref(), &gold)
        });
        SampleRecord {
            id: sample.id.clone(),
            extraction,
            tool_use,
        }
    }

    /// Coverage, EM and F1 of document retrieval for each `n`.
    pub fn docs_baseline(&self, ns: impl IntoIterator<Item = usize>) -> Result<Vec<SweepPoint>, HarnessError> {
        if self.samples.is_empty() {
            return Err(AggregateError::Empty.into());
        }
        ns.into_iter()
            .map(|n| {
                let logs = self
                    .samples
                    .iter()
                    .map(|s| {
                        Ok(SampleLog {
                            id: s.id.clone(),
                            extraction: Some(self.retrieve_step(s, n)?),
                            tool_use: None,
                        })
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?;
                let records: Vec<SampleRecord> = logs
                    .iter()
                    .zip(&self.samples)
                    .map(|(l, s)| self.grade_one(s, l))
                    .collect();
                let count = records.len() as f64;
                let mean = |f: &dyn Fn(&SampleRecord) -> f64| {
                    percent(records.iter().map(f).sum::<f64>() / count)
                };
                let ext = |r: &SampleRecord| r.extraction.expect("documents grade extraction");
                Ok(SweepPoint {
                    n,
                    coverage: mean(&|r| ext(r).coverage as f64),
                    em: mean(&|r| ext(r).em as f64),
                    f1: mean(&|r| ext(r).f1),
                })
            })
            .collect()
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const RAW_IO_FILE: &str = "raw_io.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SUMMARY_JSON_FILE: &str = "summary.json";
pub const SUMMARY_TABLE_FILE: &str = "summary.txt";

/// Writes config snapshot, raw I/O log, per-sample records and summaries.
pub fn write_outputs(dir: &Path, config: &RunConfig, outcome: &RunOutcome) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    write_file(&dir.join(CONFIG_FILE), &config.to_json())?;
    let raw: String = outcome
        .logs
        .iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect();
    write_file(&dir.join(RAW_IO_FILE), &raw)?;
    write_report(dir, &outcome.report)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), HarnessError> {
    write_file(&dir.join(SAMPLES_FILE), &report.records_jsonl())?;
    write_file(&dir.join(SUMMARY_JSON_FILE), &report.summary_json())?;
    write_file(&dir.join(SUMMARY_TABLE_FILE), &report.table())
}

pub fn read_logs(path: &Path) -> Result<Vec<SampleLog>, HarnessError> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Io {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Re-grades a run directory from its config snapshot and raw I/O log.
pub fn regrade_dir(dir: &Path) -> Result<EvalReport, HarnessError> {
    let config = RunConfig::from_json(&read_file(&dir.join(CONFIG_FILE))?)?;
    let logs = read_logs(&dir.join(RAW_IO_FILE))?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| HarnessError::Config(format!("paths.{what} is required")))
    };
    let kg = KnowledgeGraph::load(&read_file(&need(&config.paths.kg, "kg")?)?)?;
    let samples = load_dataset(&read_file(&need(&config.paths.dataset, "dataset")?)?)?;
    let tools = match &config.paths.tools {
        Some(p) => load_tools(&read_file(p)?)?,
        None => Vec::new(),
    };
    Harness::new(kg, tools, samples, config)?.grade(&logs)
}
