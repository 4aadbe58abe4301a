//! Knowledge-graph-augmented tool-use evaluation: relation-path grounding
//! over a family KG, hallucination-tolerant extraction, an LLM gateway with
//! replay, and rule-based grading of extracted links and tool calls.

pub mod dataset;
pub mod evaluator;
pub mod harness;
pub mod http;
pub mod kg;
pub mod llm;
pub mod path_extractor;
pub mod search_parser;
pub mod similarity;

pub use dataset::{load_dataset, load_tools, Sample, ToolCall, ToolDoc};
pub use evaluator::{
    aggregate, extract_tool_call, grade_extraction, grade_tool_use, EvalReport,
    ExtractionMetrics, SampleRecord, ToolUseMetrics,
};
pub use harness::{AugmentedQuery, Harness, ModeKind, RunConfig, Stages};
pub use kg::{Document, GroundedPath, KnowledgeGraph, RelationPath, Triple};
pub use llm::{ChatBackend, ChatRequest, ChatResponse, Gateway};
pub use path_extractor::{extract, ExtractionConfig, ExtractionResult, Strategy};
pub use search_parser::{parse_kg_search, render_search, ParsedSearches};
pub use similarity::{LexicalSimilarity, SimilarityProvider};
