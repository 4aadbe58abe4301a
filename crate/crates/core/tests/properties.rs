use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Mutex;

use proptest::prelude::*;
use regex::Regex;

use kgetool::dataset::ToolCall;
use kgetool::evaluator::{aggregate, grade_extraction, grade_tool_use, ReportLabel, SampleRecord, ToolUseMetrics};
use kgetool::kg::{entities_of, Document, GroundedPath, KnowledgeGraph, RelationPath, Triple};
use kgetool::path_extractor::{extract_greedy, extract_relation_retrieval};
use kgetool::search_parser::{parse_kg_search, render_search};
use kgetool::similarity::{
    retrieve_documents, Embedder, EmbeddingSimilarity, LexicalSimilarity, SimilarityError,
    SimilarityProvider, TextTemplate,
};

fn triple_strategy(entities: u8, relations: u8) -> impl Strategy<Value = Triple> {
    (0..entities, 0..relations, 0..entities)
        .prop_map(|(h, r, t)| Triple::new(format!("e{h}"), format!("r{r}"), format!("e{t}")).unwrap())
}

fn kg_strategy(max_edges: usize) -> impl Strategy<Value = Vec<Triple>> {
    prop::collection::vec(triple_strategy(6, 4), 1..=max_edges)
        .prop_map(|v| v.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
}

/// `fake_pct` is the percentage of positions drawn from outside the vocabulary.
fn path_strategy(fake_pct: u32) -> impl Strategy<Value = RelationPath> {
    (
        0u8..6,
        prop::collection::vec(
            prop_oneof![
                (100 - fake_pct) => (0u8..4).prop_map(|r| format!("r{r}")),
                fake_pct => (0u8..3).prop_map(|r| format!("fake{r}")),
            ],
            1..4,
        ),
    )
        .prop_map(|(s, rels)| RelationPath::new(format!("e{s}"), rels).unwrap())
}

/// Every walk of `len` edges from `start`, by scanning the raw edge list.
fn all_walks(edges: &[Triple], start: &str, len: usize) -> Vec<Vec<Triple>> {
    let mut walks: Vec<Vec<Triple>> = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::new();
        for w in &walks {
            let at = w.last().map(|t| t.tail.as_str()).unwrap_or(start);
            for e in edges.iter().filter(|e| e.head == at) {
                let mut longer = w.clone();
                longer.push(e.clone());
                next.push(longer);
            }
        }
        walks = next;
    }
    walks
}

fn as_links(paths: &BTreeSet<GroundedPath>) -> BTreeSet<Vec<Triple>> {
    paths.iter().map(|p| p.links().to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ground_exact_equals_brute_force(edges in kg_strategy(50), path in path_strategy(10)) {
        let kg = KnowledgeGraph::from_triples(edges.clone());
        let want: BTreeSet<Vec<Triple>> = all_walks(&edges, &path.start, path.len())
            .into_iter()
            .filter(|w| w.iter().zip(&path.relations).all(|(e, r)| &e.relation == r))
            .collect();
        prop_assert_eq!(as_links(&kg.ground_exact(&path)), want);
    }

    #[test]
    fn greedy_equals_substitution_rule_walks(edges in kg_strategy(30), path in path_strategy(40)) {
        let kg = KnowledgeGraph::from_triples(edges.clone());
        let want: BTreeSet<Vec<Triple>> = all_walks(&edges, &path.start, path.len())
            .into_iter()
            .filter(|w| {
                w.iter().zip(&path.relations).all(|(e, r)| {
                    let has_r = edges.iter().any(|x| x.head == e.head && &x.relation == r);
                    !has_r || &e.relation == r
                })
            })
            .collect();
        let got = extract_greedy(&kg, &path, usize::MAX);
        prop_assert!(!got.truncated);
        prop_assert_eq!(got.candidate_count_pre_filter, want.len());
        prop_assert_eq!(as_links(&got.grounded), want);
    }

    #[test]
    fn every_strategy_is_sound(edges in kg_strategy(30), path in path_strategy(40), k in 1usize..4) {
        let kg = KnowledgeGraph::from_triples(edges);
        let lex = LexicalSimilarity::default();
        let results = [
            kg.ground_exact(&path),
            extract_greedy(&kg, &path, 64).grounded,
            extract_relation_retrieval(&kg, &path, &lex, k, 64).unwrap().grounded,
        ];
        for set in results {
            for p in &set {
                prop_assert!(p.is_chain());
                prop_assert_eq!(p.len(), path.len());
                prop_assert_eq!(&p.links()[0].head, &path.start);
                prop_assert!(p.links().iter().all(|t| kg.contains(t)));
            }
        }
    }

    #[test]
    fn greedy_contains_exact_and_matches_it_on_functional_kgs(edges in kg_strategy(30), path in path_strategy(0)) {
        let kg = KnowledgeGraph::from_triples(edges.clone());
        let exact = kg.ground_exact(&path);
        let gs = extract_greedy(&kg, &path, usize::MAX).grounded;
        prop_assert!(exact.is_subset(&gs));
        let functional: BTreeMap<(String, String), Triple> = edges
            .into_iter()
            .map(|t| ((t.head.clone(), t.relation.clone()), t))
            .collect();
        let fkg = KnowledgeGraph::from_triples(functional.into_values());
        let exact = fkg.ground_exact(&path);
        if !exact.is_empty() {
            prop_assert_eq!(extract_greedy(&fkg, &path, usize::MAX).grounded, exact);
        }
    }

    #[test]
    fn relation_retrieval_without_fakes_is_exact(edges in kg_strategy(30), path in path_strategy(0), k in 1usize..4) {
        let kg = KnowledgeGraph::from_triples(edges);
        prop_assume!(path.relations.iter().all(|r| kg.has_relation(r)));
        let rr = extract_relation_retrieval(&kg, &path, &LexicalSimilarity::default(), k, 16).unwrap();
        prop_assert_eq!(rr.grounded, kg.ground_exact(&path));
        prop_assert_eq!(rr.candidate_count_pre_filter, 1);
        prop_assert_eq!(rr.fake_relation_count, 0);
    }

    #[test]
    fn out_edges_and_entities_match_linear_scans(edges in kg_strategy(40), e in 0u8..7) {
        let kg = KnowledgeGraph::from_triples(edges.clone());
        let name = format!("e{e}");
        let mut want: Vec<Triple> = edges.iter().filter(|t| t.head == name).cloned().collect();
        want.sort();
        prop_assert_eq!(kg.out_edges(&name).to_vec(), want);
        let paths: Vec<GroundedPath> = edges.iter().map(|t| GroundedPath::new(vec![t.clone()]).unwrap()).collect();
        let mut flat = BTreeSet::new();
        for t in &edges {
            flat.insert(t.head.clone());
            flat.insert(t.tail.clone());
        }
        prop_assert_eq!(entities_of(&paths), flat);
    }

    #[test]
    fn document_round_trip(h in "\\PC{1,12}", r in "\\PC{1,12}", t in "\\PC{1,12}") {
        if let Ok(triple) = Triple::new(h, r, t) {
            let text = Document::render(&triple);
            prop_assert_eq!(Document::parse_text(&text), Some(triple));
        }
    }

    #[test]
    fn dsl_round_trip(start in "\\PC{1,10}", rels in prop::collection::vec("\\PC{1,10}", 1..4)) {
        prop_assume!(!start.trim().is_empty() && rels.iter().all(|r| !r.trim().is_empty()));
        let path = RelationPath::new(start, rels).unwrap();
        let text = render_search(&path);
        let parsed = parse_kg_search(&text).unwrap();
        prop_assert_eq!(parsed.searches, vec![path]);
    }

    #[test]
    fn parsing_is_deterministic_and_prose_immune(
        prefix in "\\PC{0,30}",
        middle in "\\PC{0,30}",
        suffix in "\\PC{0,30}",
        a in path_strategy(30),
        b in path_strategy(30),
    ) {
        for prose in [&prefix, &middle, &suffix] {
            prop_assume!(!prose.contains("KG.search("));
        }
        let core = format!("{}\n{}", render_search(&a), render_search(&b));
        let noisy = format!("{prefix}{}{middle}{}{suffix}", render_search(&a), render_search(&b));
        let clean = parse_kg_search(&core).unwrap();
        let dirty = parse_kg_search(&noisy).unwrap();
        prop_assert_eq!(&clean.searches, &dirty.searches);
        prop_assert_eq!(parse_kg_search(&noisy), parse_kg_search(&noisy));
    }

    #[test]
    fn parser_agrees_with_reference_regex(
        items in prop::collection::vec(
            (
                "[A-Za-z][A-Za-z0-9_]{0,8}",
                prop::collection::vec("[A-Za-z][A-Za-z0-9_]{0,8}", 1..4),
                "[ ]{0,2}",
                "[a-z ,.!?]{0,20}",
            ),
            1..4,
        )
    ) {
        let mut text = String::new();
        for (start, rels, ws, prose) in &items {
            text.push_str(&format!(
                "{prose}KG.search({ws}Start{ws}={ws}{start}{ws},{ws}Path{ws}={ws}[{ws}{}{ws}]{ws})",
                rels.join(&format!("{ws},{ws}"))
            ));
        }
        let re = Regex::new(r"KG\.search\(\s*Start\s*=\s*([A-Za-z0-9_]+)\s*,\s*Path\s*=\s*\[([^\]]*)\]\s*\)").unwrap();
        let want: Vec<RelationPath> = re
            .captures_iter(&text)
            .map(|c| RelationPath::new(&c[1], c[2].split(',').map(|s| s.trim().to_string())).unwrap())
            .collect();
        prop_assert_eq!(parse_kg_search(&text).unwrap().searches, want);
    }

    #[test]
    fn lexical_top_k_is_prefix_consistent(query in "[a-z_ ]{1,12}", cands in prop::collection::btree_set("[a-z_]{1,10}", 1..12), k in 1usize..12) {
        let cands: Vec<String> = cands.into_iter().collect();
        let lex = LexicalSimilarity::default();
        let small = lex.top_k(&query, &cands, k).unwrap();
        let big = lex.top_k(&query, &cands, k + 1).unwrap();
        prop_assert_eq!(small.len(), k.min(cands.len()));
        prop_assert_eq!(&big[..small.len()], &small[..]);
        prop_assert!(small.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn lexical_score_matches_trigram_oracle(a in "\\PC{0,12}", b in "\\PC{0,12}") {
        let grams = |s: &str| -> HashSet<String> {
            let padded: Vec<char> = format!("  {} ", s.to_lowercase()).chars().collect();
            (0..padded.len() - 2).map(|i| padded[i..i + 3].iter().collect()).collect()
        };
        let (ga, gb) = (grams(&a), grams(&b));
        let inter = ga.intersection(&gb).count() as f64;
        let union = ga.union(&gb).count() as f64;
        let want = if union == 0.0 { 1.0 } else { inter / union };
        let got = LexicalSimilarity::new(TextTemplate::Raw).score(&a, &b);
        prop_assert_eq!(got, want);
        prop_assert_eq!(got, LexicalSimilarity::new(TextTemplate::Raw).score(&b, &a));
    }

    #[test]
    fn retrieved_sources_grow_with_n(edges in kg_strategy(30), query in "[a-z0-9 ]{1,20}") {
        let kg = KnowledgeGraph::from_triples(edges);
        let docs = kg.to_documents();
        let lex = LexicalSimilarity::default();
        let mut prev: BTreeSet<Triple> = BTreeSet::new();
        for n in 1..=docs.len().min(10) {
            let got: BTreeSet<Triple> = retrieve_documents(&lex, &query, &docs, n)
                .unwrap()
                .into_iter()
                .map(|d| d.source_triple)
                .collect();
            prop_assert_eq!(got.len(), n);
            prop_assert!(prev.is_subset(&got));
            prev = got;
        }
    }
}

struct RandomVectors(HashMap<String, Vec<f32>>, Mutex<usize>);

impl Embedder for RandomVectors {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, SimilarityError> {
        *self.1.lock().unwrap() += 1;
        texts
            .iter()
            .map(|t| self.0.get(t).cloned().ok_or_else(|| SimilarityError::MissingVector(t.clone())))
            .collect()
    }
}

fn link_set() -> impl Strategy<Value = BTreeSet<Triple>> {
    prop::collection::btree_set(triple_strategy(5, 3), 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn warming_never_changes_rankings(
        vectors in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 6),
        k in 1usize..6,
    ) {
        let names: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
        let map: HashMap<String, Vec<f32>> = names.iter().cloned().zip(vectors).collect();
        let cold = EmbeddingSimilarity::new(Box::new(RandomVectors(map.clone(), Mutex::new(0))), TextTemplate::Raw);
        let warm = EmbeddingSimilarity::new(Box::new(RandomVectors(map, Mutex::new(0))), TextTemplate::Raw);
        warm.warm(&names).unwrap();
        let cands = names[1..].to_vec();
        prop_assert_eq!(cold.top_k(&names[0], &cands, k).unwrap(), warm.top_k(&names[0], &cands, k).unwrap());
    }

    #[test]
    fn extraction_metric_laws(gold in link_set(), extracted in link_set(), extra in link_set()) {
        let kg = KnowledgeGraph::from_triples(gold.iter().chain(&extracted).chain(&extra).cloned());
        let terminals: BTreeSet<String> = gold.iter().map(|t| t.tail.clone()).collect();
        let m = grade_extraction(&gold, &extracted, None, &kg, &terminals);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert_eq!(m.f1 == 1.0, m.em == 1);
        prop_assert_eq!(m.em == 1, m.fp == 0 && m.fn_ == 0);
        let swapped = grade_extraction(&extracted, &gold, None, &kg, &terminals);
        prop_assert_eq!((swapped.fp, swapped.fn_), (m.fn_, m.fp));
        prop_assert_eq!(swapped.f1, m.f1);
        let bigger: BTreeSet<Triple> = extracted.union(&extra).cloned().collect();
        let m2 = grade_extraction(&gold, &bigger, None, &kg, &terminals);
        prop_assert!(m2.coverage >= m.coverage);
        prop_assert_eq!(grade_extraction(&gold, &extracted, None, &kg, &terminals), m);
    }

    #[test]
    fn tool_use_metric_laws(
        gold in prop::collection::btree_map("[a-c]", "[a-c ]{1,3}", 0..4),
        pred in prop::collection::btree_map("[a-d]", "[a-c ]{1,3}", 0..4),
        same_name in any::<bool>(),
    ) {
        let g = ToolCall { name: "tool".into(), parameters: gold.clone() };
        let p = ToolCall { name: if same_name { "tool".into() } else { "other".into() }, parameters: pred };
        let m = grade_tool_use(Some(&p), &g);
        prop_assert_eq!(m.value_total, gold.len());
        prop_assert!(m.value_hits <= m.value_total);
        if m.em == 1 {
            prop_assert_eq!(m.tool_acc, 1);
            prop_assert_eq!(m.value_hits, m.value_total);
        }
        let none = grade_tool_use(None, &g);
        prop_assert_eq!((none.em, none.tool_acc, none.value_hits, none.made_tool_call), (0, 0, 0, 0));
        prop_assert_eq!(grade_tool_use(Some(&g), &g).em, 1);
    }

    #[test]
    fn aggregates_match_naive_recount(
        rows in prop::collection::vec((0u8..2, 0u8..2, 0usize..4, 0usize..4, 0u8..2), 50),
    ) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(em, tool, hits, extra, call))| SampleRecord {
                id: i.to_string(),
                extraction: None,
                tool_use: Some(ToolUseMetrics {
                    em: em & tool,
                    tool_acc: tool,
                    value_hits: hits,
                    value_total: hits + extra,
                    made_tool_call: call,
                }),
            })
            .collect();
        let report = aggregate(records.clone(), ReportLabel::default()).unwrap();
        let t = report.aggregates.tool_use.unwrap();
        let mut em_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut hits = 0;
        let mut total = 0;
        for r in &records {
            let m = r.tool_use.unwrap();
            em_sum += m.em as f64;
            acc_sum += m.tool_acc as f64;
            hits += m.value_hits;
            total += m.value_total;
        }
        let pct = |x: f64| (x * 10_000.0).round() / 100.0;
        prop_assert_eq!(t.em, pct(em_sum / 50.0));
        prop_assert_eq!(t.tool_acc, pct(acc_sum / 50.0));
        prop_assert_eq!((t.value_hits, t.value_total), (hits, total));
        let want = if total == 0 { 0.0 } else { pct(hits as f64 / total as f64) };
        prop_assert_eq!(t.value_acc, want);
    }
}
