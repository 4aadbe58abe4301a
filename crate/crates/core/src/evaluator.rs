//! Rule-based grading of the extraction step (link sets) and the tool-use
//! step (tool calls), plus corpus aggregation and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::ToolCall;
use crate::kg::{KnowledgeGraph, Triple};
use crate::llm::ChatResponse;
use crate::search_parser::ParseOutcome;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub em: u8,
    pub f1: f64,
    pub no_hallucination: u8,
    pub coverage: u8,
    pub format_error: u8,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ExtractionMetrics {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    2.0 * p * r / (p + r)
}

/// Grades one sample's extracted links against the gold links.
///
/// `parsed` is the parser outcome of the model response; `None` marks a
/// source with no model-generated paths (the document baseline), which is
/// never a format error and never hallucinates. A format error forces every
/// score to zero and treats the extracted set as empty.
///
/// When gold and extracted are both empty (and parsing succeeded) the sample
/// is an exact match with `f1 = 1`.
pub fn grade_extraction(
    gold: &BTreeSet<Triple>,
    extracted: &BTreeSet<Triple>,
    parsed: Option<&ParseOutcome>,
    kg: &KnowledgeGraph,
    gold_terminals: &BTreeSet<String>,
) -> ExtractionMetrics {
    let parsed_ok = match parsed {
        Some(Err(_)) => None,
        Some(Ok(p)) => Some(Some(p)),
        None => Some(None),
    };
    let Some(searches) = parsed_ok else {
        return ExtractionMetrics {
            format_error: 1,
            fn_: gold.len(),
            ..ExtractionMetrics::default()
        };
    };
    let tp = gold.intersection(extracted).count();
    let fp = extracted.len() - tp;
    let fn_ = gold.len() - tp;
    let exact = fp == 0 && fn_ == 0;
    let f1 = if exact { 1.0 } else { f1_score(tp, fp, fn_) };
    let no_hallucination = searches.is_none_or(|p| {
        p.searches
            .iter()
            .flat_map(|s| &s.relations)
            .all(|r| kg.has_relation(r))
    });
    let covered: BTreeSet<&str> = extracted
        .iter()
        .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
        .collect();
    let coverage = gold_terminals.iter().all(|e| covered.contains(e.as_str()));
    ExtractionMetrics {
        em: exact as u8,
        f1,
        no_hallucination: no_hallucination as u8,
        coverage: coverage as u8,
        format_error: 0,
        tp,
        fp,
        fn_,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolUseMetrics {
    pub em: u8,
    pub tool_acc: u8,
    pub value_hits: usize,
    pub value_total: usize,
    pub made_tool_call: u8,
}

/// Finds the model's tool call. Native tool-call fields win; otherwise the
/// text is scanned for the first JSON object carrying `name` and
/// `parameters` (or `arguments`), fenced or bare.
pub fn extract_tool_call(response: &ChatResponse) -> Option<ToolCall> {
    for native in &response.native_tool_calls {
        let args = serde_json::from_str::<Value>(&native.arguments)
            .unwrap_or(Value::String(native.arguments.clone()));
        let v = serde_json::json!({"name": native.name, "arguments": args});
        if let Some(call) = ToolCall::from_value(&v) {
            return Some(call);
        }
    }
    find_call_in_text(&response.text)
}

pub fn find_call_in_text(text: &str) -> Option<ToolCall> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => ToolCall::from_value(&v),
            _ => None,
        }
    })
}

/// Trim, strip one pair of surrounding quotes, trim, lowercase.
pub fn normalize_value(value: &str) -> String {
    let v = value.trim();
    let v = ['"', '\'']
        .iter()
        .find_map(|&q| {
            v.strip_prefix(q)
                .and_then(|s| s.strip_suffix(q))
                .filter(|_| v.len() >= 2)
        })
        .unwrap_or(v);
    v.trim().to_lowercase()
}

fn normalized(call: &ToolCall) -> BTreeMap<&str, String> {
    call.parameters
        .iter()
        .map(|(k, v)| (k.as_str(), normalize_value(v)))
        .collect()
}

pub fn grade_tool_use(pred: Option<&ToolCall>, gold: &ToolCall) -> ToolUseMetrics {
    let value_total = gold.parameters.len();
    let Some(pred) = pred else {
        return ToolUseMetrics {
            value_total,
            ..ToolUseMetrics::default()
        };
    };
    let tool_acc = pred.name == gold.name;
    let p = normalized(pred);
    let g = normalized(gold);
    let value_hits = g.iter().filter(|(k, v)| p.get(*k) == Some(*v)).count();
    ToolUseMetrics {
        em: (tool_acc && p == g) as u8,
        tool_acc: tool_acc as u8,
        value_hits,
        value_total,
        made_tool_call: 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_use: Option<ToolUseMetrics>,
}

/// Means over the samples that have an extraction record, as percentages
/// rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionAggregate {
    pub samples: usize,
    pub em: f64,
    pub f1: f64,
    pub no_hallucination: f64,
    pub coverage: f64,
    pub format_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolUseAggregate {
    pub samples: usize,
    pub em: f64,
    pub tool_acc: f64,
    /// Σ value_hits / Σ value_total.
    pub value_acc: f64,
    pub value_hits: usize,
    pub value_total: usize,
    pub tool_call_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLabel {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tooluse_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_use: Option<ToolUseAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: ReportLabel,
    pub aggregates: Aggregates,
    pub per_sample: Vec<SampleRecord>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("cannot aggregate an empty record list")]
    Empty,
}

/// Percentage rounded to two decimals.
pub fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

fn mean_percent(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let (n, sum) = values.fold((0usize, 0.0f64), |(n, s), v| (n + 1, s + v));
    (n, if n == 0 { 0.0 } else { percent(sum / n as f64) })
}

pub fn aggregate(records: Vec<SampleRecord>, label: ReportLabel) -> Result<EvalReport, AggregateError> {
    if records.is_empty() {
        return Err(AggregateError::Empty);
    }
    let ext: Vec<&ExtractionMetrics> = records.iter().filter_map(|r| r.extraction.as_ref()).collect();
    let extraction = (!ext.is_empty()).then(|| {
        let m = |f: fn(&ExtractionMetrics) -> f64| mean_percent(ext.iter().map(|e| f(e))).1;
        ExtractionAggregate {
            samples: ext.len(),
            em: m(|e| e.em as f64),
            f1: m(|e| e.f1),
            no_hallucination: m(|e| e.no_hallucination as f64),
            coverage: m(|e| e.coverage as f64),
            format_error: m(|e| e.format_error as f64),
        }
    });
    let tu: Vec<&ToolUseMetrics> = records.iter().filter_map(|r| r.tool_use.as_ref()).collect();
    let tool_use = (!tu.is_empty()).then(|| {
        let m = |f: fn(&ToolUseMetrics) -> f64| mean_percent(tu.iter().map(|t| f(t))).1;
        let value_hits = tu.iter().map(|t| t.value_hits).sum();
        let value_total = tu.iter().map(|t| t.value_total).sum();
        ToolUseAggregate {
            samples: tu.len(),
            em: m(|t| t.em as f64),
            tool_acc: m(|t| t.tool_acc as f64),
            value_acc: percent(ratio(value_hits, value_total)),
            value_hits,
            value_total,
            tool_call_rate: m(|t| t.made_tool_call as f64),
        }
    });
    Ok(EvalReport {
        label,
        aggregates: Aggregates {
            samples: records.len(),
            extraction,
            tool_use,
        },
        per_sample: records,
    })
}

impl EvalReport {
    /// One JSON object per sample, newline-terminated.
    pub fn records_jsonl(&self) -> String {
        self.per_sample
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Label and aggregates as pretty JSON.
    pub fn summary_json(&self) -> String {
        let v = serde_json::json!({"label": self.label, "aggregates": self.aggregates});
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let l = &self.label;
        let _ = write!(out, "mode: {}", l.mode);
        if let Some(s) = &l.strategy {
            let _ = write!(out, "  strategy: {s}");
        }
        if let Some(m) = &l.extraction_model {
            let _ = write!(out, "  extraction: {m}");
        }
        if let Some(m) = &l.tooluse_model {
            let _ = write!(out, "  tool use: {m}");
        }
        let _ = writeln!(out, "\nsamples: {}", self.aggregates.samples);
        if let Some(t) = &self.aggregates.tool_use {
            let _ = writeln!(out, "\n{:>8} {:>10} {:>10} {:>10}", "EM", "Tool Acc.", "Value Acc.", "Call Rate");
            let _ = writeln!(
                out,
                "{:>8.2} {:>10.2} {:>10.2} {:>10.2}",
                t.em, t.tool_acc, t.value_acc, t.tool_call_rate
            );
        }
        if let Some(e) = &self.aggregates.extraction {
            let _ = writeln!(
                out,
                "\n{:>8} {:>8} {:>8} {:>9} {:>13}",
                "EM", "F1", "No-Hal.", "Coverage", "Format Error"
            );
            let _ = writeln!(
                out,
                "{:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>13.2}",
                e.em, e.f1, e.no_hallucination, e.coverage, e.format_error
            );
        }
        out
    }
}
