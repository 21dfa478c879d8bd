//! Coarse-grained evidence sampling around the entities of a question.
//!
//! Question entities are extracted by the model and linked to graph nodes
//! (the *seeds*). Two subgraphs are then sampled over the undirected view
//! of the graph:
//!
//! * **path-based**: seeds are chained together by bounded-hop shortest
//!   paths, visiting the nearest remaining seed each time;
//! * **neighbor-based**: every triple touching a seed, plus every triple
//!   touching a seed neighbor whose name is semantically close to the
//!   question.
//!
//! Both are pruned to a size cap and can be verbalized into evidence
//! sentences by the model.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{relevance, EmbedError, Embedder, EmbeddingCache};
use crate::graph::{KnowledgeGraph, NodeId};
use crate::llm::{Gateway, LlmError};
use crate::prompt::{tags, Prompting, TemplateError};
use crate::text::normalize_name;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("seed {0:?} is not a node of the graph")]
    UnknownSeed(NodeId),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum hops between consecutive seeds in path exploration.
    pub hop_bound: usize,
    /// Minimum cosine similarity between a neighbor name and the question
    /// for its own neighbors to be added.
    pub relevance_threshold: f64,
    pub max_triples_per_subgraph: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            hop_bound: 2,
            relevance_threshold: 0.5,
            max_triples_per_subgraph: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgraphKind {
    PathBased,
    NeighborBased,
}

impl SubgraphKind {
    /// Evidence label used when verbalizing.
    pub fn label(self) -> &'static str {
        match self {
            SubgraphKind::PathBased => "Path-based Evidence",
            SubgraphKind::NeighborBased => "Neighbor-based Evidence",
        }
    }
}

/// A chain `nodes[0] -triples[0]- nodes[1] - ... - nodes[n]`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PathSegment {
    pub nodes: Vec<NodeId>,
    pub triples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceSubgraph {
    pub kind: SubgraphKind,
    /// Path-based only.
    pub segments: Vec<PathSegment>,
    /// Triple indices into the sampled snapshot, in priority order.
    pub triples: Vec<usize>,
    /// Neighbor-based only: how many leading `triples` touch a seed.
    pub seed_adjacent: usize,
    pub verbalized: Option<Vec<String>>,
}

impl EvidenceSubgraph {
    pub fn empty(kind: SubgraphKind) -> Self {
        EvidenceSubgraph {
            kind,
            segments: Vec::new(),
            triples: Vec::new(),
            seed_adjacent: 0,
            verbalized: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }
}

// ---------------------------------------------------------------------------
// Question entities

fn list_item_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*•]|\d{1,3}[.)])\s*").expect("valid regex"))
}

/// Parses a comma/semicolon/newline separated entity list.
pub fn parse_entity_list(text: &str) -> Vec<String> {
    let text = text.trim();
    let text = text.strip_prefix("Entities:").unwrap_or(text);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in text.split([',', ';', '\n']) {
        let mut s = item.trim();
        if let Some(m) = list_item_marker().find(s) {
            s = &s[m.end()..];
        }
        let s = s
            .trim()
            .trim_end_matches('.')
            .trim_matches(|c| c == '"' || c == '\'')
            .trim();
        if s.is_empty() {
            continue;
        }
        if seen.insert(normalize_name(s)) {
            out.push(s.to_string());
        }
    }
    out
}

pub fn extract_question_entities(
    question: &str,
    gateway: &Gateway,
    prompting: &Prompting,
) -> Result<Vec<String>, SamplerError> {
    let req = prompting.request(tags::EXTRACT_ENTITIES, &[("question", question)])?;
    let text = gateway.complete(&req)?;
    Ok(parse_entity_list(&text))
}

// ---------------------------------------------------------------------------
// Path-based exploration

fn check_seeds(graph: &KnowledgeGraph, seeds: &[NodeId]) -> Result<BTreeSet<NodeId>, SamplerError> {
    let mut set = BTreeSet::new();
    for &s in seeds {
        if s.index() >= graph.node_count() {
            return Err(SamplerError::UnknownSeed(s));
        }
        set.insert(s);
    }
    Ok(set)
}

/// Hop distances from `source` up to `limit` over the undirected view.
fn bounded_distances(graph: &KnowledgeGraph, source: NodeId, limit: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; graph.node_count()];
    dist[source.index()] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u.index()].expect("queued nodes have a distance");
        if d == limit {
            continue;
        }
        for e in graph.undirected(u) {
            if dist[e.neighbor.index()].is_none() {
                dist[e.neighbor.index()] = Some(d + 1);
                queue.push_back(e.neighbor);
            }
        }
    }
    dist
}

/// Nearest candidate within `hop_bound` of `start` and the path to it.
///
/// Ties are broken by path length, then target node key, then the path
/// itself compared as its sequence of (node key, triple order).
pub(crate) fn nearest_candidate(
    graph: &KnowledgeGraph,
    start: NodeId,
    candidates: &BTreeSet<NodeId>,
    hop_bound: usize,
) -> Option<(NodeId, PathSegment)> {
    let from_start = bounded_distances(graph, start, hop_bound);
    // Node ids follow key order, so the BTreeSet iterates targets by key.
    let (target, d) = candidates
        .iter()
        .filter_map(|&c| from_start[c.index()].map(|d| (c, d)))
        .min_by_key(|&(c, d)| (d, c))?;
    let to_target = bounded_distances(graph, target, d);

    let mut seg = PathSegment {
        nodes: vec![start],
        triples: Vec::new(),
    };
    let mut u = start;
    for step in 0..d {
        let remaining = d - step - 1;
        let next = graph
            .undirected(u)
            .filter(|e| {
                from_start[e.neighbor.index()] == Some(step + 1) && to_target[e.neighbor.index()] == Some(remaining)
            })
            .min_by_key(|e| (e.neighbor, e.triple))
            .expect("a shortest path continues");
        seg.nodes.push(next.neighbor);
        seg.triples.push(next.triple);
        u = next.neighbor;
    }
    Some((target, seg))
}

/// Chains the seeds together with bounded-hop paths.
///
/// Starting from the smallest seed, repeatedly walks to the nearest
/// remaining seed within `hop_bound` hops, extending the current segment.
/// When none is reachable the segment is closed and a new one starts at
/// the smallest remaining seed. Ends when every seed has been visited.
pub fn explore_paths(
    graph: &KnowledgeGraph,
    seeds: &[NodeId],
    config: &SamplerConfig,
) -> Result<EvidenceSubgraph, SamplerError> {
    let mut candidates = check_seeds(graph, seeds)?;
    let mut out = EvidenceSubgraph::empty(SubgraphKind::PathBased);
    let Some(first) = candidates.pop_first() else {
        return Ok(out);
    };
    let mut start = first;
    let mut current = PathSegment {
        nodes: vec![start],
        triples: Vec::new(),
    };
    while !candidates.is_empty() {
        match nearest_candidate(graph, start, &candidates, config.hop_bound) {
            Some((hit, path)) => {
                current.nodes.extend_from_slice(&path.nodes[1..]);
                current.triples.extend_from_slice(&path.triples);
                candidates.remove(&hit);
                start = hit;
            }
            None => {
                out.segments.push(std::mem::take(&mut current));
                start = candidates.pop_first().expect("non-empty");
                current.nodes.push(start);
            }
        }
    }
    out.segments.push(current);

    let mut seen = HashSet::new();
    for seg in &out.segments {
        for &t in &seg.triples {
            if seen.insert(t) {
                out.triples.push(t);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Neighbor-based exploration

/// Seed-adjacent triples, then triples around question-relevant neighbors.
pub fn explore_neighbors(
    graph: &KnowledgeGraph,
    seeds: &[NodeId],
    question: &str,
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    config: &SamplerConfig,
) -> Result<EvidenceSubgraph, SamplerError> {
    let seed_set = check_seeds(graph, seeds)?;
    let mut out = EvidenceSubgraph::empty(SubgraphKind::NeighborBased);
    if seed_set.is_empty() {
        return Ok(out);
    }

    let mut first_hop = BTreeSet::new();
    let mut neighbors = BTreeSet::new();
    for &s in &seed_set {
        for e in graph.undirected(s) {
            first_hop.insert(e.triple);
            if !seed_set.contains(&e.neighbor) {
                neighbors.insert(e.neighbor);
            }
        }
    }

    let nodes = cache.get_or_build(graph, embedder)?;
    let question_vec = embedder.embed(&[question.to_string()])?.remove(0);
    let mut second_hop = BTreeSet::new();
    for &n in &neighbors {
        if relevance(&nodes.vectors[n.index()], &question_vec) >= config.relevance_threshold {
            for e in graph.undirected(n) {
                if !first_hop.contains(&e.triple) {
                    second_hop.insert(e.triple);
                }
            }
        }
    }

    out.seed_adjacent = first_hop.len();
    out.triples = first_hop.into_iter().chain(second_hop).collect();
    Ok(out)
}

/// Drops repeated triples and truncates to the size cap, keeping the
/// highest-priority triples.
pub fn prune(mut subgraph: EvidenceSubgraph, config: &SamplerConfig) -> EvidenceSubgraph {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(subgraph.triples.len());
    let mut adjacent = 0;
    for (i, t) in subgraph.triples.iter().copied().enumerate() {
        if seen.insert(t) {
            if i < subgraph.seed_adjacent {
                adjacent += 1;
            }
            kept.push(t);
        }
    }
    kept.truncate(config.max_triples_per_subgraph);
    subgraph.seed_adjacent = adjacent.min(kept.len());
    subgraph.triples = kept;
    subgraph
}

// ---------------------------------------------------------------------------
// Verbalization

/// One `head->relation->tail` line per triple.
pub fn render_triples(graph: &KnowledgeGraph, triples: &[usize]) -> String {
    triples
        .iter()
        .map(|&t| graph.render_triple(t))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `'head' relation 'tail'.`
pub fn template_sentence(graph: &KnowledgeGraph, triple: usize) -> String {
    let t = graph.triple(triple);
    format!("'{}' {} '{}'.", t.head, t.relation, t.tail)
}

fn evidence_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:#+\s*)?(?:path|neighbor)-based evidence\s*(\d+)\s*:\s*(.+?)\s*$").expect("valid regex")
    })
}

/// Evidence sentences from a describe response, or `None` when no line
/// carries an evidence label.
pub fn parse_evidence_sentences(text: &str) -> Option<Vec<String>> {
    let sentences: Vec<String> = text
        .lines()
        .filter_map(|l| evidence_line().captures(l).map(|c| c[2].to_string()))
        .collect();
    (!sentences.is_empty()).then_some(sentences)
}

/// Asks the model to describe `triples` in natural language. Falls back to
/// one templated sentence per triple when the response has no evidence
/// lines.
pub fn verbalize(
    graph: &KnowledgeGraph,
    triples: &[usize],
    kind: SubgraphKind,
    gateway: &Gateway,
    prompting: &Prompting,
) -> Result<Vec<String>, SamplerError> {
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let rendered = render_triples(graph, triples);
    let req = prompting.request(tags::DESCRIBE, &[("graph", &rendered), ("label", kind.label())])?;
    let text = gateway.complete(&req)?;
    Ok(parse_evidence_sentences(&text).unwrap_or_else(|| {
        log::info!("describe output had no evidence lines; using templates");
        triples.iter().map(|&t| template_sentence(graph, t)).collect()
    }))
}
