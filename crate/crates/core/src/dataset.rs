//! Benchmark samples, tool documents and tool calls: loading, the
//! machine-checkable data-examination rules, and summary statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::kg::{entities_of, rechain, KnowledgeGraph, Triple};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("sample {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("sample {index}: bad link annotation: {message}")]
    Links { index: usize, message: String },
    #[error("tool {index}: {message}")]
    Tool { index: usize, message: String },
}

/// A concrete invocation. Parameter values are kept as strings; non-string
/// JSON values are stored as their compact JSON text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default, deserialize_with = "stringly_map")]
    pub parameters: BTreeMap<String, String>,
}

fn value_to_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn stringly_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    let raw: Option<Map<String, Value>> = Option::deserialize(d)?;
    Ok(raw
        .unwrap_or_default()
        .iter()
        .map(|(k, v)| (k.clone(), value_to_string(v)))
        .collect())
}

impl ToolCall {
    pub fn new<K: Into<String>, V: Into<String>>(
        name: impl Into<String>,
        parameters: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            name: name.into(),
            parameters: parameters
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    /// Reads `{"name": ..., "parameters"|"arguments": {...}}`. Arguments
    /// given as a JSON-encoded string are decoded.
    pub fn from_value(v: &Value) -> Option<Self> {
        let obj = v.as_object()?;
        let name = obj.get("name")?.as_str()?.trim();
        if name.is_empty() {
            return None;
        }
        let params = obj.get("parameters").or_else(|| obj.get("arguments"))?;
        let params = match params {
            Value::String(s) => serde_json::from_str::<Value>(s).ok()?,
            Value::Null => Value::Object(Map::new()),
            other => other.clone(),
        };
        let map = params.as_object()?;
        Some(Self {
            name: name.to_string(),
            parameters: map
                .iter()
                .map(|(k, v)| (k.clone(), value_to_string(v)))
                .collect(),
        })
    }

    pub fn to_value(&self) -> Value {
        json!({"name": self.name, "parameters": self.parameters})
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type", default = "default_type")]
    pub type_tag: String,
    #[serde(default)]
    pub required: bool,
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

fn default_type() -> String {
    "string".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDoc {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
}

impl ToolDoc {
    /// Accepts either the flat form (`parameters` is a list of specs) or a
    /// JSON-schema form (`parameters` is `{"properties": {...}, "required":
    /// [...]}`), optionally wrapped as `{"type": "function", "function": {...}}`.
    pub fn from_value(v: &Value) -> Result<Self, String> {
        let v = v.get("function").unwrap_or(v);
        let obj = v.as_object().ok_or("tool document must be an object")?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.trim().is_empty())
            .ok_or("missing tool name")?
            .to_string();
        let description = obj
            .get("description")
            .map(value_to_string)
            .unwrap_or_default();
        let parameters = match obj.get("parameters") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(_)) => {
                serde_json::from_value(obj["parameters"].clone()).map_err(|e| e.to_string())?
            }
            Some(Value::Object(schema)) => schema_params(schema)?,
            Some(_) => return Err("parameters must be a list or a JSON schema".into()),
        };
        let doc = Self {
            name,
            description,
            parameters,
        };
        doc.check()?;
        Ok(doc)
    }

    fn check(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for p in &self.parameters {
            if !seen.insert(&p.name) {
                return Err(format!("duplicate parameter {:?}", p.name));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// JSON-schema rendering, as sent to endpoints with native tool support.
    pub fn to_schema(&self) -> Value {
        let mut props = Map::new();
        for p in &self.parameters {
            let mut spec = json!({"type": p.type_tag});
            if !p.description.is_empty() {
                spec["description"] = json!(p.description);
            }
            if let Some(allowed) = &p.allowed {
                spec["enum"] = json!(allowed);
            }
            props.insert(p.name.clone(), spec);
        }
        let required: Vec<&str> = self
            .parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        json!({
            "name": self.name,
            "description": self.description,
            "parameters": {"type": "object", "properties": props, "required": required},
        })
    }
}

fn schema_params(schema: &Map<String, Value>) -> Result<Vec<ParamSpec>, String> {
    let required: BTreeSet<&str> = schema
        .get("required")
        .and_then(Value::as_array)
        .map(|r| r.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let Some(props) = schema.get("properties").and_then(Value::as_object) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(props.len());
    for (name, spec) in props {
        let type_tag = spec
            .get("type")
            .and_then(Value::as_str)
            .unwrap_or("string")
            .to_string();
        let allowed = spec
            .get("enum")
            .and_then(Value::as_array)
            .map(|a| a.iter().map(value_to_string).collect());
        let description = spec
            .get("description")
            .map(value_to_string)
            .unwrap_or_default();
        out.push(ParamSpec {
            name: name.clone(),
            type_tag,
            required: required.contains(name.as_str()),
            allowed,
            description,
        });
    }
    if let Some(missing) = required.iter().find(|r| !props.contains_key(**r)) {
        return Err(format!("required parameter {missing:?} is not declared"));
    }
    Ok(out)
}

pub fn load_tools(source: &str) -> Result<Vec<ToolDoc>, DatasetError> {
    let raw: Value = serde_json::from_str(source).map_err(|e| DatasetError::Json(e.to_string()))?;
    let items: Vec<Value> = match raw {
        Value::Array(items) => items,
        Value::Object(map) => map
            .into_iter()
            .map(|(name, mut v)| {
                if v.get("name").is_none() {
                    v["name"] = json!(name);
                }
                v
            })
            .collect(),
        _ => return Err(DatasetError::Json("expected an array of tool documents".into())),
    };
    items
        .iter()
        .enumerate()
        .map(|(index, v)| ToolDoc::from_value(v).map_err(|message| DatasetError::Tool { index, message }))
        .collect()
}

/// One benchmark item. Serialized field order is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub speaker: String,
    /// The request with speaker tag and link annotation removed.
    pub query: String,
    #[serde(rename = "links")]
    pub gold_links: Vec<Triple>,
    #[serde(rename = "call")]
    pub gold_call: ToolCall,
    #[serde(rename = "tool")]
    pub tool_name: String,
    pub hop_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_tools: Option<Vec<String>>,
}

impl Sample {
    /// The request as shown to models: speaker tag plus query.
    pub fn prompt_query(&self) -> String {
        if self.speaker.is_empty() {
            self.query.clone()
        } else {
            format!("<speak>Speaker: {}</speak> {}", self.speaker, self.query)
        }
    }

    pub fn gold_set(&self) -> BTreeSet<Triple> {
        self.gold_links.iter().cloned().collect()
    }

    /// Final tail entity of every chain in the gold annotation: the KG
    /// entities the tool call consumes.
    pub fn gold_terminals(&self) -> BTreeSet<String> {
        rechain(&self.gold_links)
            .iter()
            .filter_map(|p| p.last_tail().map(str::to_string))
            .collect()
    }

    fn check(&self, index: usize) -> Result<(), DatasetError> {
        let schema = |message: String| DatasetError::Schema { index, message };
        if self.hop_count != self.gold_links.len() {
            return Err(schema(format!(
                "hop_count {} does not match {} links",
                self.hop_count,
                self.gold_links.len()
            )));
        }
        if self.gold_call.name != self.tool_name {
            return Err(schema(format!(
                "gold call names {:?} but tool is {:?}",
                self.gold_call.name, self.tool_name
            )));
        }
        Ok(())
    }
}

/// Loads a dataset file: a JSON array of either normalized samples or raw
/// published records `{id?, tool?, question, answer: {name, parameters}}`.
pub fn load_dataset(source: &str) -> Result<Vec<Sample>, DatasetError> {
    let raw: Value = serde_json::from_str(source).map_err(|e| DatasetError::Json(e.to_string()))?;
    let items = raw
        .as_array()
        .ok_or_else(|| DatasetError::Json("expected an array of samples".into()))?;
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let sample = if item.get("question").is_some() {
                from_raw(index, item)?
            } else {
                serde_json::from_value::<Sample>(item.clone()).map_err(|e| {
                    DatasetError::Schema {
                        index,
                        message: e.to_string(),
                    }
                })?
            };
            sample.check(index)?;
            Ok(sample)
        })
        .collect()
}

pub fn to_normalized_json(samples: &[Sample]) -> String {
    serde_json::to_string_pretty(samples).expect("samples serialize")
}

fn from_raw(index: usize, item: &Value) -> Result<Sample, DatasetError> {
    let schema = |message: &str| DatasetError::Schema {
        index,
        message: message.to_string(),
    };
    let question = item
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("question must be a string"))?;
    let answer = match item.get("answer") {
        Some(Value::String(s)) => {
            serde_json::from_str(s).map_err(|_| schema("answer string is not JSON"))?
        }
        Some(v) => v.clone(),
        None => return Err(schema("missing answer")),
    };
    let gold_call =
        ToolCall::from_value(&answer).ok_or_else(|| schema("answer must have name and parameters"))?;
    let tool_name = item
        .get("tool")
        .or_else(|| item.get("name"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| gold_call.name.clone());
    let id = item
        .get("id")
        .map(value_to_string)
        .unwrap_or_else(|| index.to_string());
    let (speaker, rest) = split_speaker(question);
    let (query, gold_links) =
        split_annotation(rest).map_err(|message| DatasetError::Links { index, message })?;
    let candidate_tools = item.get("candidate_tools").and_then(Value::as_array).map(|a| {
        a.iter()
            .filter_map(Value::as_str)
            .map(str::to_string)
            .collect()
    });
    Ok(Sample {
        id,
        speaker,
        query,
        hop_count: gold_links.len(),
        gold_links,
        gold_call,
        tool_name,
        candidate_tools,
    })
}

/// Splits `<speak>Speaker: X</speak> rest` into `("X", "rest")`.
pub fn split_speaker(question: &str) -> (String, &str) {
    let q = question.trim_start();
    if let Some(after) = q.strip_prefix("<speak>") {
        if let Some(end) = after.find("</speak>") {
            let inner = after[..end].trim();
            let speaker = inner
                .strip_prefix("Speaker:")
                .or_else(|| inner.strip_prefix("speaker:"))
                .unwrap_or(inner)
                .trim();
            return (speaker.to_string(), after[end + "</speak>".len()..].trim());
        }
    }
    (String::new(), q.trim())
}

const LEAD_INS: [&str; 2] = [
    "the extra information for the query is",
    "the extra information for this query is",
];

/// Splits a request from its trailing `([h, r, t], ...)` link annotation.
pub fn split_annotation(text: &str) -> Result<(String, Vec<Triple>), String> {
    let body = text.trim_end();
    let body = body.strip_suffix('.').unwrap_or(body).trim_end();
    if !body.ends_with(')') {
        return Err("no trailing link annotation".into());
    }
    let open = matching_open_paren(body).ok_or("unbalanced parentheses")?;
    let links = parse_link_list(&body[open + 1..body.len() - 1])?;
    let mut query = body[..open].trim_end();
    for lead in LEAD_INS {
        let cut = query.len().saturating_sub(lead.len());
        if query.get(cut..).is_some_and(|tail| tail.eq_ignore_ascii_case(lead)) {
            query = query[..cut].trim_end();
            break;
        }
    }
    Ok((query.to_string(), links))
}

fn matching_open_paren(s: &str) -> Option<usize> {
    let mut depth = 0i32;
    for (i, c) in s.char_indices().rev() {
        match c {
            ')' => depth += 1,
            '(' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_link_list(inner: &str) -> Result<Vec<Triple>, String> {
    let mut links = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let open = rest
            .strip_prefix('[')
            .ok_or_else(|| format!("expected '[' at {rest:?}"))?;
        let close = open.find(']').ok_or("unterminated '['")?;
        let fields: Vec<&str> = open[..close].split(',').collect();
        if fields.len() != 3 {
            return Err(format!("link {:?} does not have 3 fields", &open[..close]));
        }
        let clean = |s: &str| s.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_string();
        let triple = Triple::new(clean(fields[0]), clean(fields[1]), clean(fields[2]))
            .map_err(|e| e.to_string())?;
        links.push(triple);
        rest = open[close + 1..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(links)
}

pub fn hop_histogram(samples: &[Sample]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for s in samples {
        *hist.entry(s.hop_count).or_insert(0) += 1;
    }
    hist
}

/// Preference "signal" entities such as `food_0000`: an identifier ending in
/// an underscore followed by digits.
pub fn is_signal_entity(entity: &str) -> bool {
    match entity.rsplit_once('_') {
        Some((stem, digits)) => {
            !stem.is_empty() && !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
        }
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    /// A gold link that is not in the KG.
    HallucinatedLink { link: Triple },
    /// A parameter value naming a KG entity that the gold links never reach.
    UnsupportedValue { parameter: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationFlag {
    pub sample_id: String,
    #[serde(flatten)]
    pub issue: ValidationIssue,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples_checked: usize,
    pub flags: Vec<ValidationFlag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flagged_samples(&self) -> BTreeSet<&str> {
        self.flags.iter().map(|f| f.sample_id.as_str()).collect()
    }
}

pub fn validate_against_kg(samples: &[Sample], kg: &KnowledgeGraph) -> ValidationReport {
    let mut flags = Vec::new();
    for s in samples {
        for link in &s.gold_links {
            if !kg.contains(link) {
                flags.push(ValidationFlag {
                    sample_id: s.id.clone(),
                    issue: ValidationIssue::HallucinatedLink { link: link.clone() },
                });
            }
        }
        let reached = entities_of(&rechain(&s.gold_links));
        for (parameter, value) in &s.gold_call.parameters {
            if kg.has_entity(value) && !reached.contains(value) {
                flags.push(ValidationFlag {
                    sample_id: s.id.clone(),
                    issue: ValidationIssue::UnsupportedValue {
                        parameter: parameter.clone(),
                        value: value.clone(),
                    },
                });
            }
        }
    }
    ValidationReport {
        samples_checked: samples.len(),
        flags,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCheck {
    pub syntax: bool,
    pub parameter_standard: bool,
    pub feasibility: bool,
    pub issues: Vec<String>,
}

impl CallCheck {
    pub fn passed(&self) -> bool {
        self.syntax && self.parameter_standard && self.feasibility
    }
}

fn conforms(value: &str, spec: &ParamSpec) -> bool {
    if let Some(allowed) = &spec.allowed {
        if !allowed.iter().any(|a| a == value) {
            return false;
        }
    }
    let v = value.trim();
    match spec.type_tag.to_ascii_lowercase().as_str() {
        "integer" | "int" => v.parse::<i64>().is_ok(),
        "number" | "float" | "double" => v.parse::<f64>().is_ok(),
        "boolean" | "bool" => matches!(v.to_ascii_lowercase().as_str(), "true" | "false"),
        "array" | "list" => matches!(serde_json::from_str::<Value>(v), Ok(Value::Array(_))),
        "object" | "dict" => matches!(serde_json::from_str::<Value>(v), Ok(Value::Object(_))),
        _ => true,
    }
}

/// Syntax, parameter-standardization and feasibility checks of a call
/// against its tool document.
pub fn examine_call(call: &ToolCall, doc: &ToolDoc) -> CallCheck {
    let mut issues = Vec::new();
    let syntax = !call.name.trim().is_empty()
        && call.parameters.keys().all(|k| !k.trim().is_empty())
        && ToolCall::from_value(&call.to_value()).as_ref() == Some(call);
    if !syntax {
        issues.push("call is not a well-formed {name, parameters} object".to_string());
    }
    let mut parameter_standard = true;
    for (name, value) in &call.parameters {
        match doc.param(name) {
            None => {
                parameter_standard = false;
                issues.push(format!("unknown parameter {name:?}"));
            }
            Some(spec) if !conforms(value, spec) => {
                parameter_standard = false;
                issues.push(format!(
                    "parameter {name:?} value {value:?} does not conform to {}",
                    spec.type_tag
                ));
            }
            Some(_) => {}
        }
    }
    for spec in doc.parameters.iter().filter(|p| p.required) {
        if !call.parameters.contains_key(&spec.name) {
            parameter_standard = false;
            issues.push(format!("missing required parameter {:?}", spec.name));
        }
    }
    let feasibility = call.name == doc.name;
    if !feasibility {
        issues.push(format!(
            "call targets {:?}, document describes {:?}",
            call.name, doc.name
        ));
    }
    CallCheck {
        syntax,
        parameter_standard,
        feasibility,
        issues,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub tools: usize,
    pub hop_histogram: BTreeMap<usize, usize>,
}

/// `tools` counts the tool documents when given, else distinct tool names.
pub fn summarize(samples: &[Sample], tools: Option<&[ToolDoc]>) -> DatasetSummary {
    let tools = match tools {
        Some(t) => t.len(),
        None => samples
            .iter()
            .map(|s| s.tool_name.as_str())
            .collect::<BTreeSet<_>>()
            .len(),
    };
    DatasetSummary {
        samples: samples.len(),
        tools,
        hop_histogram: hop_histogram(samples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_HOP: &str = "<speak>Speaker: Bob</speak> Search for a train leaving Dad's favorite spot arriving at Mom's favorite location, provide full details.  The extra information for the query is ([Bob, father, Jack], [Jack, prefer_dining_location, dining_location_0001], [Bob, mother, Alice], [Alice, prefer_dining_location, dining_location_0002]).";
    const SIX_HOP: &str = "<speak>Speaker: Bob</speak> Can you check flights between my paternal father's favorite city and my paternal grandmother's preferred destination?   The extra information for the query is ([Bob, father, Jack], [Jack, father, William], [William, prefer_travel_city, travel_city_0007], [Bob, father, Jack], [Jack, mother, Elizabeth], [Elizabeth, prefer_travel_to, travel_to_0004]).";

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::new(h, r, tl).unwrap()
    }

    fn raw(question: &str, name: &str, params: Value) -> Value {
        json!({"question": question, "answer": {"name": name, "parameters": params}})
    }

    #[test]
    fn loads_four_hop_example() {
        let src = json!([raw(FOUR_HOP, "SearchTrain", json!({"from": "dining_location_0001", "to": "dining_location_0002"}))]);
        let samples = load_dataset(&src.to_string()).unwrap();
        let s = &samples[0];
        assert_eq!(s.speaker, "Bob");
        assert_eq!(s.hop_count, 4);
        assert_eq!(
            s.gold_links,
            vec![
                t("Bob", "father", "Jack"),
                t("Jack", "prefer_dining_location", "dining_location_0001"),
                t("Bob", "mother", "Alice"),
                t("Alice", "prefer_dining_location", "dining_location_0002"),
            ]
        );
        assert_eq!(
            s.query,
            "Search for a train leaving Dad's favorite spot arriving at Mom's favorite location, provide full details."
        );
        assert_eq!(s.tool_name, "SearchTrain");
        assert_eq!(s.id, "0");
        let terminals: Vec<_> = s.gold_terminals().into_iter().collect();
        assert_eq!(terminals, ["dining_location_0001", "dining_location_0002"]);
    }

    #[test]
    fn loads_six_hop_example() {
        let src = json!([raw(SIX_HOP, "SearchFlights", json!({}))]);
        let samples = load_dataset(&src.to_string()).unwrap();
        assert_eq!(samples[0].hop_count, 6);
        assert_eq!(samples[0].gold_set().len(), 5);
    }

    #[test]
    fn empty_annotation_and_bare_parenthesized_list() {
        let src = json!([
            raw("<speak>Speaker: Alice</speak> Play some music. ()", "play", json!({})),
            raw("<speak>Speaker: Alice</speak> Can you order a pizza with my son's preferred crust type and toppings? ([Alice, son, Bob], [Bob, prefer_pizza_crust, pizza_crust_0000], [Bob, prefer_pizza_topping, pizza_topping_0000])", "order_pizza", json!({"crust": "pizza_crust_0000", "topping": "pizza_topping_0000"})),
        ]);
        let samples = load_dataset(&src.to_string()).unwrap();
        assert_eq!(samples[0].hop_count, 0);
        assert_eq!(samples[0].query, "Play some music.");
        assert_eq!(samples[1].hop_count, 3);
        assert_eq!(samples[1].gold_call.parameters["crust"], "pizza_crust_0000");
    }

    #[test]
    fn schema_and_annotation_errors_carry_index() {
        let src = json!([
            raw("<speak>Speaker: Bob</speak> hi ()", "a", json!({})),
            {"question": "<speak>Speaker: Bob</speak> hi ()"},
        ]);
        assert!(matches!(
            load_dataset(&src.to_string()),
            Err(DatasetError::Schema { index: 1, .. })
        ));
        let src = json!([raw("<speak>Speaker: Bob</speak> hi ([Bob, father])", "a", json!({}))]);
        assert!(matches!(
            load_dataset(&src.to_string()),
            Err(DatasetError::Links { index: 0, .. })
        ));
        let src = json!([raw("no annotation here", "a", json!({}))]);
        assert!(matches!(
            load_dataset(&src.to_string()),
            Err(DatasetError::Links { index: 0, .. })
        ));
        assert!(matches!(load_dataset("{"), Err(DatasetError::Json(_))));
    }

    #[test]
    fn normalized_round_trip_is_content_identical() {
        let src = json!([raw(FOUR_HOP, "SearchTrain", json!({"from": "dining_location_0001", "n": 2}))]);
        let samples = load_dataset(&src.to_string()).unwrap();
        let normalized = to_normalized_json(&samples);
        let again = load_dataset(&normalized).unwrap();
        assert_eq!(samples, again);
        let a: Value = serde_json::from_str(&normalized).unwrap();
        let b: Value = serde_json::from_str(&to_normalized_json(&again)).unwrap();
        assert_eq!(a, b);
        assert_eq!(samples[0].gold_call.parameters["n"], "2");
        let keys: Vec<_> = a[0].as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["id", "speaker", "query", "links", "call", "tool", "hop_count"]);
    }

    #[test]
    fn normalized_invariants_enforced() {
        let bad = json!([{"id": "x", "speaker": "Bob", "query": "q", "links": [["Bob","father","Jack"]],
            "call": {"name": "a", "parameters": {}}, "tool": "a", "hop_count": 2}]);
        assert!(matches!(
            load_dataset(&bad.to_string()),
            Err(DatasetError::Schema { index: 0, .. })
        ));
        let bad = json!([{"id": "x", "speaker": "Bob", "query": "q", "links": [],
            "call": {"name": "a", "parameters": {}}, "tool": "b", "hop_count": 0}]);
        assert!(load_dataset(&bad.to_string()).is_err());
    }

    fn seed_kg() -> KnowledgeGraph {
        KnowledgeGraph::load(r#"[["Alice","husband","Jack"],["Jack","wife","Alice"],["Alice","son","Bob"],["Jack","son","Bob"],["Bob","mother","Alice"],["Bob","father","Jack"]]"#).unwrap()
    }

    fn sample(links: Vec<Triple>, params: &[(&str, &str)]) -> Sample {
        Sample {
            id: "s".into(),
            speaker: "Bob".into(),
            query: "q".into(),
            hop_count: links.len(),
            gold_links: links,
            gold_call: ToolCall::new("call", params.iter().copied()),
            tool_name: "call".into(),
            candidate_tools: None,
        }
    }

    #[test]
    fn validation_flags_hallucinations() {
        let kg = seed_kg();
        let clean = sample(vec![t("Bob", "father", "Jack")], &[("who", "Jack")]);
        assert!(validate_against_kg(&[clean], &kg).is_clean());
        let bad = sample(vec![t("Bob", "uncle", "Tom")], &[]);
        let report = validate_against_kg(&[bad], &kg);
        assert_eq!(report.flags.len(), 1);
        assert!(matches!(report.flags[0].issue, ValidationIssue::HallucinatedLink { .. }));
        let unsupported = sample(vec![t("Bob", "father", "Jack")], &[("who", "Alice")]);
        let report = validate_against_kg(&[unsupported], &kg);
        assert!(matches!(
            &report.flags[0].issue,
            ValidationIssue::UnsupportedValue { value, .. } if value == "Alice"
        ));
    }

    fn pizza_doc() -> ToolDoc {
        ToolDoc::from_value(&json!({
            "name": "order_pizza",
            "description": "Order a pizza",
            "parameters": {
                "type": "object",
                "properties": {
                    "crust": {"type": "string"},
                    "topping": {"type": "string"},
                    "size": {"type": "integer"}
                },
                "required": ["crust", "topping"]
            }
        }))
        .unwrap()
    }

    #[test]
    fn examine_gold_pizza_call() {
        let call = ToolCall::new(
            "order_pizza",
            [("crust", "pizza_crust_0000"), ("topping", "pizza_topping_0000")],
        );
        let check = examine_call(&call, &pizza_doc());
        assert!(check.passed(), "{:?}", check.issues);
    }

    #[test]
    fn examine_failures() {
        let doc = pizza_doc();
        let missing = ToolCall::new("order_pizza", [("crust", "thin")]);
        let c = examine_call(&missing, &doc);
        assert!(c.syntax && !c.parameter_standard && c.feasibility);
        let wrong_tool = ToolCall::new("order_taxi", [("crust", "thin"), ("topping", "ham")]);
        let c = examine_call(&wrong_tool, &doc);
        assert!(c.parameter_standard && !c.feasibility);
        let bad_type = ToolCall::new("order_pizza", [("crust", "thin"), ("topping", "ham"), ("size", "large")]);
        assert!(!examine_call(&bad_type, &doc).parameter_standard);
        let unknown = ToolCall::new("order_pizza", [("crust", "thin"), ("topping", "ham"), ("sauce", "x")]);
        assert!(!examine_call(&unknown, &doc).parameter_standard);
        let empty_name = ToolCall::new("", [("crust", "thin")]);
        assert!(!examine_call(&empty_name, &doc).syntax);
    }

    #[test]
    fn tool_doc_forms() {
        let flat = ToolDoc::from_value(&json!({"name": "x", "parameters": [
            {"name": "a", "type": "string", "required": true},
            {"name": "b", "type": "integer", "enum": ["1", "2"]}
        ]}))
        .unwrap();
        assert_eq!(flat.parameters.len(), 2);
        let wrapped = ToolDoc::from_value(&json!({"type": "function", "function": flat.to_schema()}))
            .unwrap();
        assert_eq!(wrapped.param("a"), flat.param("a"));
        assert!(ToolDoc::from_value(&json!({"name": "x", "parameters": [{"name": "a"}, {"name": "a"}]})).is_err());
        assert!(ToolDoc::from_value(&json!({"parameters": []})).is_err());
    }

    #[test]
    fn histogram_and_signals() {
        assert!(hop_histogram(&[]).is_empty());
        let s1 = sample(vec![t("Bob", "father", "Jack")], &[]);
        let s2 = sample(vec![t("Bob", "father", "Jack"), t("Jack", "wife", "Alice")], &[]);
        let hist = hop_histogram(&[s1.clone(), s2.clone(), s2]);
        assert_eq!(hist, BTreeMap::from([(1, 1), (2, 2)]));
        assert!(is_signal_entity("food_0000"));
        assert!(is_signal_entity("dining_location_0001"));
        assert!(!is_signal_entity("Alice"));
        assert!(!is_signal_entity("food_"));
        assert!(!is_signal_entity("_0001"));
    }
}
