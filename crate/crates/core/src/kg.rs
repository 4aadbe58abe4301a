//! Immutable family knowledge graph: triples, adjacency index, exact path
//! grounding and the link-to-document rendering used by the retrieval
//! baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KgError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("triple at line {line}: empty {field}")]
    EmptyField { line: usize, field: &'static str },
    #[error("invalid triple: empty {0}")]
    InvalidTriple(&'static str),
    #[error("relation path must contain at least one relation")]
    EmptyPath,
    #[error("links {0} and {1} do not chain")]
    BrokenChain(usize, usize),
}

/// A directed labeled edge `(head, relation, tail)`.
///
/// Ordering is lexicographic over `(head, relation, tail)`; it drives every
/// deterministic tie-break in the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[String; 3]", into = "[String; 3]")]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    /// Builds a triple, trimming surrounding whitespace from each field.
    pub fn new(
        head: impl AsRef<str>,
        relation: impl AsRef<str>,
        tail: impl AsRef<str>,
    ) -> Result<Self, KgError> {
        let head = head.as_ref().trim();
        let relation = relation.as_ref().trim();
        let tail = tail.as_ref().trim();
        if head.is_empty() {
            return Err(KgError::InvalidTriple("head"));
        }
        if relation.is_empty() {
            return Err(KgError::InvalidTriple("relation"));
        }
        if tail.is_empty() {
            return Err(KgError::InvalidTriple("tail"));
        }
        Ok(Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        })
    }
}

impl TryFrom<[String; 3]> for Triple {
    type Error = KgError;

    fn try_from([h, r, t]: [String; 3]) -> Result<Self, Self::Error> {
        Triple::new(h, r, t)
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.head, t.relation, t.tail]
    }
}

/// Renders as `[head, relation, tail]`, the annotation style of the dataset.
impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.head, self.relation, self.tail)
    }
}

/// An ungrounded query: a start entity and the relations to follow.
///
/// Relations are free-form; identifiers outside the KG vocabulary ("fake"
/// relations produced by a model) are representable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationPath {
    pub start: String,
    pub relations: Vec<String>,
}

impl RelationPath {
    pub fn new<S: Into<String>>(
        start: impl Into<String>,
        relations: impl IntoIterator<Item = S>,
    ) -> Result<Self, KgError> {
        let relations: Vec<String> = relations.into_iter().map(Into::into).collect();
        if relations.is_empty() {
            return Err(KgError::EmptyPath);
        }
        Ok(Self {
            start: start.into(),
            relations,
        })
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

/// A concrete chain of edges; `links[i].tail == links[i + 1].head`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundedPath {
    links: Vec<Triple>,
}

impl GroundedPath {
    pub fn new(links: Vec<Triple>) -> Result<Self, KgError> {
        for i in 1..links.len() {
            if links[i - 1].tail != links[i].head {
                return Err(KgError::BrokenChain(i - 1, i));
            }
        }
        Ok(Self { links })
    }

    pub fn links(&self) -> &[Triple] {
        &self.links
    }

    pub fn into_links(self) -> Vec<Triple> {
        self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn last_tail(&self) -> Option<&str> {
        self.links.last().map(|t| t.tail.as_str())
    }

    /// Appends a link; the caller guarantees it continues the chain.
    pub(crate) fn extended(&self, link: &Triple) -> Self {
        debug_assert!(self.last_tail().is_none_or(|t| t == link.head));
        let mut links = Vec::with_capacity(self.links.len() + 1);
        links.extend_from_slice(&self.links);
        links.push(link.clone());
        Self { links }
    }

    pub fn is_chain(&self) -> bool {
        self.links.windows(2).all(|w| w[0].tail == w[1].head)
    }
}

/// Splits a flat link list into chains: a new chain starts whenever a head
/// differs from the previous tail.
pub fn rechain(links: &[Triple]) -> Vec<GroundedPath> {
    let mut chains: Vec<Vec<Triple>> = Vec::new();
    for link in links {
        match chains.last_mut() {
            Some(chain) if chain.last().is_some_and(|prev| prev.tail == link.head) => {
                chain.push(link.clone())
            }
            _ => chains.push(vec![link.clone()]),
        }
    }
    chains
        .into_iter()
        .map(|links| GroundedPath { links })
        .collect()
}

/// One-sentence rendering of a triple for the document retrieval baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source_triple: Triple,
}

impl Document {
    /// Renders `<head> <relation> <tail>.`; a field that would make the
    /// sentence ambiguous (whitespace, leading quote, backslash) is written
    /// as a double-quoted string with `\"` and `\\` escapes.
    pub fn render(t: &Triple) -> String {
        format!(
            "{} {} {}.",
            doc_field(&t.head),
            doc_field(&t.relation),
            doc_field(&t.tail)
        )
    }

    /// Inverse of [`Document::render`].
    pub fn parse_text(text: &str) -> Option<Triple> {
        let body = text.strip_suffix('.')?;
        let mut rest = body;
        let mut fields = Vec::with_capacity(3);
        for i in 0..3 {
            let (field, remainder) = take_doc_field(rest)?;
            fields.push(field);
            rest = remainder;
            if i < 2 {
                rest = rest.strip_prefix(' ')?;
            }
        }
        if !rest.is_empty() {
            return None;
        }
        let [h, r, t]: [String; 3] = fields.try_into().ok()?;
        Triple::new(&h, &r, &t)
            .ok()
            .filter(|tr| tr.head == h && tr.relation == r && tr.tail == t)
    }
}

fn needs_quoting(field: &str) -> bool {
    field.starts_with('"') || field.contains(char::is_whitespace) || field.contains('\\')
}

fn doc_field(field: &str) -> String {
    if !needs_quoting(field) {
        return field.to_string();
    }
    let mut out = String::with_capacity(field.len() + 2);
    out.push('"');
    for c in field.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn take_doc_field(s: &str) -> Option<(String, &str)> {
    if let Some(quoted) = s.strip_prefix('"') {
        let mut out = String::new();
        let mut chars = quoted.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => out.push(chars.next()?.1),
                '"' => return Some((out, &quoted[i + 1..])),
                _ => out.push(c),
            }
        }
        None
    } else {
        let end = s.find(' ').unwrap_or(s.len());
        let field = &s[..end];
        if field.is_empty() || needs_quoting(field) {
            return None;
        }
        Some((field.to_string(), &s[end..]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub nodes: usize,
    pub edges: usize,
    pub edge_types: usize,
}

/// Read-only knowledge graph. All indices are derived from `triples` at
/// construction and never change afterwards.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    out_index: BTreeMap<String, Vec<Triple>>,
    relation_vocab: BTreeSet<String>,
    entities: BTreeSet<String>,
}

impl KnowledgeGraph {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let triples: BTreeSet<Triple> = triples.into_iter().collect();
        let mut out_index: BTreeMap<String, Vec<Triple>> = BTreeMap::new();
        let mut relation_vocab = BTreeSet::new();
        let mut entities = BTreeSet::new();
        for t in &triples {
            out_index.entry(t.head.clone()).or_default().push(t.clone());
            relation_vocab.insert(t.relation.clone());
            entities.insert(t.head.clone());
            entities.insert(t.tail.clone());
        }
        Self {
            triples,
            out_index,
            relation_vocab,
            entities,
        }
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn relation_vocab(&self) -> &BTreeSet<String> {
        &self.relation_vocab
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn has_relation(&self, relation: &str) -> bool {
        self.relation_vocab.contains(relation)
    }

    pub fn has_entity(&self, entity: &str) -> bool {
        self.entities.contains(entity)
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            nodes: self.entities.len(),
            edges: self.triples.len(),
            edge_types: self.relation_vocab.len(),
        }
    }

    /// Outgoing edges of `entity`, sorted; empty for unknown entities.
    pub fn out_edges(&self, entity: &str) -> &[Triple] {
        self.out_index.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn out_degree(&self, entity: &str) -> usize {
        self.out_edges(entity).len()
    }

    /// Every full-length grounding of `path` by exact relation matching.
    pub fn ground_exact(&self, path: &RelationPath) -> BTreeSet<GroundedPath> {
        let mut frontier = vec![GroundedPath::default()];
        for relation in &path.relations {
            let mut next = Vec::new();
            for partial in &frontier {
                let at = partial.last_tail().unwrap_or(&path.start);
                next.extend(
                    self.out_edges(at)
                        .iter()
                        .filter(|t| &t.relation == relation)
                        .map(|t| partial.extended(t)),
                );
            }
            if next.is_empty() {
                return BTreeSet::new();
            }
            frontier = next;
        }
        frontier.into_iter().collect()
    }

    /// One document per triple, ids assigned in triple order.
    pub fn to_documents(&self) -> Vec<Document> {
        self.triples
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("doc_{i:05}"),
                text: Document::render(t),
                source_triple: t.clone(),
            })
            .collect()
    }

    /// Loads a triple file: a JSON array of `[head, relation, tail]` arrays,
    /// or one tab-separated triple per line.
    pub fn load(source: &str) -> Result<Self, KgError> {
        let trimmed = source.trim_start_matches('\u{feff}');
        if trimmed.trim_start().starts_with('[') {
            load_json(trimmed)
        } else {
            load_tsv(trimmed)
        }
    }

    /// Serializes as the canonical JSON triple file.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.triples.iter().collect::<Vec<_>>())
            .expect("triples serialize")
    }
}

fn load_json(source: &str) -> Result<KnowledgeGraph, KgError> {
    let rows: Vec<Vec<String>> = serde_json::from_str(source).map_err(|e| KgError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    // serde_json does not expose element offsets; locate rows by scanning for
    // their opening brackets so errors can still point at a line.
    let row_lines = json_row_lines(source);
    let mut triples = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let line = row_lines.get(i).copied().unwrap_or(1);
        if row.len() != 3 {
            return Err(KgError::Parse {
                line,
                column: 1,
                message: format!("row {i} has {} elements, expected 3", row.len()),
            });
        }
        triples.push(checked_triple(&row[0], &row[1], &row[2], line)?);
    }
    Ok(KnowledgeGraph::from_triples(triples))
}

fn json_row_lines(source: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut depth = 0usize;
    let mut line = 1usize;
    let mut in_str = false;
    let mut escaped = false;
    for c in source.chars() {
        if c == '\n' {
            line += 1;
        }
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '[' => {
                depth += 1;
                if depth == 2 {
                    lines.push(line);
                }
            }
            ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    lines
}

fn load_tsv(source: &str) -> Result<KnowledgeGraph, KgError> {
    let mut triples = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() || row.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                line,
                column: 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        triples.push(checked_triple(fields[0], fields[1], fields[2], line)?);
    }
    Ok(KnowledgeGraph::from_triples(triples))
}

fn checked_triple(h: &str, r: &str, t: &str, line: usize) -> Result<Triple, KgError> {
    Triple::new(h, r, t).map_err(|e| match e {
        KgError::InvalidTriple(field) => KgError::EmptyField { line, field },
        other => other,
    })
}

/// Union of all heads and tails across the given paths.
pub fn entities_of<'a>(paths: impl IntoIterator<Item = &'a GroundedPath>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for p in paths {
        for t in p.links() {
            out.insert(t.head.clone());
            out.insert(t.tail.clone());
        }
    }
    out
}

/// Flattens paths into their link set.
pub fn links_of<'a>(paths: impl IntoIterator<Item = &'a GroundedPath>) -> BTreeSet<Triple> {
    paths
        .into_iter()
        .flat_map(|p| p.links().iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SEED: &str = r#"[["Alice","husband","Jack"],["Jack","wife","Alice"],["Alice","son","Bob"],["Jack","son","Bob"],["Bob","mother","Alice"],["Bob","father","Jack"]]"#;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::new(h, r, tl).unwrap()
    }

    #[test]
    fn seed_kg_stats() {
        let kg = KnowledgeGraph::load(SEED).unwrap();
        // husband, wife, son (twice), mother, father
        let distinct: BTreeSet<&str> = ["husband", "wife", "son", "son", "mother", "father"].into();
        assert_eq!(
            kg.stats(),
            KgStats {
                nodes: 3,
                edges: 6,
                edge_types: distinct.len()
            }
        );
        assert_eq!(kg.stats().edge_types, 5);
    }

    #[test]
    fn empty_and_duplicate_sources() {
        let kg = KnowledgeGraph::load("[]").unwrap();
        assert_eq!(kg.stats().nodes, 0);
        assert_eq!(kg.stats().edges, 0);
        let kg = KnowledgeGraph::load(r#"[["a","r","b"],["a","r","b"]]"#).unwrap();
        assert_eq!(kg.stats().edges, 1);
        assert_eq!(KnowledgeGraph::load("").unwrap(), KnowledgeGraph::default());
    }

    #[test]
    fn json_and_tsv_agree() {
        let tsv = "Alice\thusband\tJack\nJack\twife\tAlice\nAlice\tson\tBob\n\
                   Jack\tson\tBob\nBob\tmother\tAlice\r\nBob\tfather\tJack\n";
        assert_eq!(
            KnowledgeGraph::load(SEED).unwrap(),
            KnowledgeGraph::load(tsv).unwrap()
        );
    }

    #[test]
    fn malformed_rows_report_location() {
        let err = KnowledgeGraph::load("[[\"a\",\"r\",\"b\"],\n [\"a\",\"r\"]]").unwrap_err();
        assert!(matches!(err, KgError::Parse { line: 2, .. }), "{err:?}");
        let err = KnowledgeGraph::load("a\tr\tb\nbroken line\n").unwrap_err();
        assert!(matches!(err, KgError::Parse { line: 2, .. }), "{err:?}");
        let err = KnowledgeGraph::load("[[\"a\", \"r\"").unwrap_err();
        assert!(matches!(err, KgError::Parse { .. }));
        let err = KnowledgeGraph::load("a\t \tb\n").unwrap_err();
        assert_eq!(
            err,
            KgError::EmptyField {
                line: 1,
                field: "relation"
            }
        );
        let err = KnowledgeGraph::load("[[\"a\",\"r\",\"b\"],[\"\",\"r\",\"b\"]]").unwrap_err();
        assert!(matches!(err, KgError::EmptyField { field: "head", .. }));
    }

    #[test]
    fn out_edges_of_seed() {
        let kg = KnowledgeGraph::load(SEED).unwrap();
        assert_eq!(
            kg.out_edges("Alice"),
            &[t("Alice", "husband", "Jack"), t("Alice", "son", "Bob")]
        );
        assert!(kg.out_edges("Zoe").is_empty());
    }

    #[test]
    fn ground_exact_examples() {
        let kg = KnowledgeGraph::load(SEED).unwrap();
        let got = kg.ground_exact(&RelationPath::new("Alice", ["son"]).unwrap());
        assert_eq!(got.len(), 1);
        assert_eq!(
            got.iter().next().unwrap().links(),
            &[t("Alice", "son", "Bob")]
        );
        assert!(kg
            .ground_exact(&RelationPath::new("Alice", ["daughter"]).unwrap())
            .is_empty());
        assert!(kg
            .ground_exact(&RelationPath::new("Zoe", ["son"]).unwrap())
            .is_empty());

        let kg = KnowledgeGraph::from_triples([t("A", "likes", "X"), t("A", "likes", "Y")]);
        let got = kg.ground_exact(&RelationPath::new("A", ["likes"]).unwrap());
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn ground_exact_multi_hop_with_cycle() {
        let kg = KnowledgeGraph::load(SEED).unwrap();
        let p = RelationPath::new("Bob", ["mother", "husband", "wife"]).unwrap();
        let got = kg.ground_exact(&p);
        assert_eq!(got.len(), 1);
        let path = got.into_iter().next().unwrap();
        assert!(path.is_chain());
        assert_eq!(path.last_tail(), Some("Alice"));
    }

    #[test]
    fn relation_path_requires_relations() {
        assert_eq!(
            RelationPath::new("Bob", Vec::<String>::new()),
            Err(KgError::EmptyPath)
        );
    }

    #[test]
    fn grounded_path_rejects_broken_chain() {
        let err = GroundedPath::new(vec![t("a", "r", "b"), t("c", "r", "d")]).unwrap_err();
        assert_eq!(err, KgError::BrokenChain(0, 1));
    }

    #[test]
    fn documents_round_trip() {
        let bob = t("Bob", "father", "Jack");
        assert_eq!(Document::render(&bob), "Bob father Jack.");
        assert_eq!(Document::parse_text("Bob father Jack."), Some(bob));
        let smith = t("Bob", "teacher", "Mr. Smith");
        let text = Document::render(&smith);
        assert_eq!(text, "Bob teacher \"Mr. Smith\".");
        assert_eq!(Document::parse_text(&text), Some(smith));
        assert!(KnowledgeGraph::default().to_documents().is_empty());
        assert_eq!(Document::parse_text("Bob father."), None);
        assert_eq!(Document::parse_text("a b c d."), None);
    }

    #[test]
    fn entities_of_paths() {
        let p = GroundedPath::new(vec![
            t("Bob", "father", "Jack"),
            t("Jack", "prefer_dining_location", "dining_location_0001"),
        ])
        .unwrap();
        let got = entities_of([&p]);
        let want: BTreeSet<String> = ["Bob", "Jack", "dining_location_0001"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(got, want);
        assert!(entities_of(std::iter::empty()).is_empty());
    }

    #[test]
    fn rechain_splits_on_head_change() {
        let links = vec![
            t("Bob", "father", "Jack"),
            t("Jack", "father", "William"),
            t("William", "prefer_travel_city", "travel_city_0007"),
            t("Bob", "father", "Jack"),
            t("Jack", "mother", "Elizabeth"),
            t("Elizabeth", "prefer_travel_to", "travel_to_0004"),
        ];
        let chains = rechain(&links);
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[0].last_tail(), Some("travel_city_0007"));
        assert_eq!(chains[1].last_tail(), Some("travel_to_0004"));
        assert!(rechain(&[]).is_empty());
    }
}
