//! Grounding of model-generated relation paths that may contain fake
//! relations.
//!
//! Three strategies are offered:
//!
//! * **exact**: plain [`KnowledgeGraph::ground_exact`].
//! * **greedy search**: walk left to right; where the frontier entity has no
//!   edge carrying the requested relation, expand every outgoing edge of that
//!   entity instead.
//! * **relation retrieval**: replace every relation that is absent from the
//!   vocabulary by its top-k most similar vocabulary relations, then ground
//!   each path of the Cartesian product exactly.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{GroundedPath, KnowledgeGraph, RelationPath};
use crate::similarity::{Scored, SimilarityError, SimilarityProvider};

pub const DEFAULT_MAX_CANDIDATES: usize = 4096;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("invalid extraction config: {0}")]
    Config(&'static str),
    #[error("relation retrieval failed: {0}")]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exact,
    GreedySearch,
    RelationRetrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub strategy: Strategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_max_candidates() -> usize {
    DEFAULT_MAX_CANDIDATES
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GreedySearch,
            k: DEFAULT_K,
            max_candidates: DEFAULT_MAX_CANDIDATES,
        }
    }
}

impl ExtractionConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.k == 0 {
            return Err(ExtractError::Config("k must be at least 1"));
        }
        if self.max_candidates == 0 {
            return Err(ExtractError::Config("max_candidates must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub grounded: BTreeSet<GroundedPath>,
    /// Positions whose relation is outside the KG vocabulary.
    pub fake_relation_count: usize,
    /// Greedy search: full-length walks produced. Relation retrieval:
    /// candidate relation paths grounded.
    pub candidate_count_pre_filter: usize,
    pub truncated: bool,
}

fn fake_positions(kg: &KnowledgeGraph, path: &RelationPath) -> Vec<usize> {
    path.relations
        .iter()
        .enumerate()
        .filter(|(_, r)| !kg.has_relation(r))
        .map(|(i, _)| i)
        .collect()
}

pub fn extract_exact(kg: &KnowledgeGraph, path: &RelationPath) -> ExtractionResult {
    let grounded = kg.ground_exact(path);
    ExtractionResult {
        candidate_count_pre_filter: grounded.len(),
        fake_relation_count: fake_positions(kg, path).len(),
        grounded,
        truncated: false,
    }
}

pub fn extract_greedy(
    kg: &KnowledgeGraph,
    path: &RelationPath,
    max_candidates: usize,
) -> ExtractionResult {
    let mut frontier = vec![GroundedPath::default()];
    let mut truncated = false;
    let mut produced = 0;
    for (step, relation) in path.relations.iter().enumerate() {
        let mut next = Vec::new();
        for partial in &frontier {
            let at = partial.last_tail().unwrap_or(&path.start);
            let edges = kg.out_edges(at);
            let matching: Vec<_> = edges.iter().filter(|t| &t.relation == relation).collect();
            if matching.is_empty() {
                next.extend(edges.iter().map(|t| partial.extended(t)));
            } else {
                next.extend(matching.into_iter().map(|t| partial.extended(t)));
            }
        }
        if step + 1 == path.relations.len() {
            produced = next.len();
        }
        if next.len() > max_candidates {
            next.sort();
            next.truncate(max_candidates);
            truncated = true;
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    ExtractionResult {
        grounded: frontier.into_iter().collect(),
        fake_relation_count: fake_positions(kg, path).len(),
        candidate_count_pre_filter: produced,
        truncated,
    }
}

pub fn extract_relation_retrieval(
    kg: &KnowledgeGraph,
    path: &RelationPath,
    sim: &dyn SimilarityProvider,
    k: usize,
    max_candidates: usize,
) -> Result<ExtractionResult, ExtractError> {
    if k == 0 {
        return Err(ExtractError::Config("k must be at least 1"));
    }
    let fakes = fake_positions(kg, path);
    if fakes.is_empty() {
        let grounded = kg.ground_exact(path);
        return Ok(ExtractionResult {
            grounded,
            fake_relation_count: 0,
            candidate_count_pre_filter: 1,
            truncated: false,
        });
    }
    let vocab: Vec<String> = kg.relation_vocab().iter().cloned().collect();
    if vocab.is_empty() {
        return Ok(ExtractionResult {
            fake_relation_count: fakes.len(),
            ..ExtractionResult::default()
        });
    }
    let mut options = Vec::with_capacity(fakes.len());
    for &pos in &fakes {
        options.push(sim.top_k(&path.relations[pos], &vocab, k)?);
    }
    let total = options
        .iter()
        .try_fold(1usize, |acc, o| acc.checked_mul(o.len()))
        .unwrap_or(usize::MAX);
    let substitutions = best_combinations(&options, max_candidates);
    let mut grounded = BTreeSet::new();
    for combo in &substitutions {
        let mut relations = path.relations.clone();
        for (slot, &pos) in fakes.iter().enumerate() {
            relations[pos] = options[slot][combo[slot]].candidate.clone();
        }
        let candidate = RelationPath {
            start: path.start.clone(),
            relations,
        };
        grounded.extend(kg.ground_exact(&candidate));
    }
    Ok(ExtractionResult {
        grounded,
        fake_relation_count: fakes.len(),
        candidate_count_pre_filter: substitutions.len(),
        truncated: total > max_candidates,
    })
}

/// A combination of per-position choices ordered by total score (higher
/// first), then by the chosen candidate texts.
struct Combo<'a> {
    score: f64,
    choice: Vec<usize>,
    options: &'a [Vec<Scored>],
}

impl Combo<'_> {
    fn key(&self) -> impl Iterator<Item = &str> {
        self.choice
            .iter()
            .zip(self.options)
            .map(|(&c, o)| o[c].candidate.as_str())
    }
}

impl PartialEq for Combo<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Combo<'_> {}

impl PartialOrd for Combo<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Combo<'_> {
    // max-heap: higher score first, then lexicographically smaller texts
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.key().cmp(self.key()))
    }
}

/// Enumerates the Cartesian product of `options` best-first and returns the
/// first `limit` index tuples. Each option list must already be ranked.
pub(crate) fn best_combinations(options: &[Vec<Scored>], limit: usize) -> Vec<Vec<usize>> {
    if options.iter().any(Vec::is_empty) || limit == 0 {
        return Vec::new();
    }
    let score = |choice: &[usize]| -> f64 {
        choice
            .iter()
            .zip(options)
            .map(|(&c, o)| o[c].score)
            .sum()
    };
    let first = vec![0; options.len()];
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    seen.insert(first.clone());
    heap.push(Combo {
        score: score(&first),
        choice: first,
        options,
    });
    let mut out = Vec::new();
    while let Some(top) = heap.pop() {
        for i in 0..options.len() {
            if top.choice[i] + 1 < options[i].len() {
                let mut next = top.choice.clone();
                next[i] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Combo {
                        score: score(&next),
                        choice: next,
                        options,
                    });
                }
            }
        }
        out.push(top.choice);
        if out.len() == limit {
            break;
        }
    }
    out
}

/// Dispatches on `config.strategy`.
pub fn extract(
    kg: &KnowledgeGraph,
    path: &RelationPath,
    config: &ExtractionConfig,
    sim: Option<&dyn SimilarityProvider>,
) -> Result<ExtractionResult, ExtractError> {
    config.validate()?;
    match config.strategy {
        Strategy::Exact => Ok(extract_exact(kg, path)),
        Strategy::GreedySearch => Ok(extract_greedy(kg, path, config.max_candidates)),
        Strategy::RelationRetrieval => {
            let sim = sim.ok_or(ExtractError::Config(
                "relation retrieval requires a similarity provider",
            ))?;
            extract_relation_retrieval(kg, path, sim, config.k, config.max_candidates)
        }
    }
}

/// Extracts every path and merges the results.
pub fn extract_all(
    kg: &KnowledgeGraph,
    paths: &[RelationPath],
    config: &ExtractionConfig,
    sim: Option<&dyn SimilarityProvider>,
) -> Result<ExtractionResult, ExtractError> {
    let mut merged = ExtractionResult::default();
    for path in paths {
        let r = extract(kg, path, config, sim)?;
        merged.grounded.extend(r.grounded);
        merged.fake_relation_count += r.fake_relation_count;
        merged.candidate_count_pre_filter += r.candidate_count_pre_filter;
        merged.truncated |= r.truncated;
    }
    Ok(merged)
}
