//! Self-aware retrieval: the model reranks its sampled evidence and only
//! the top `k` triples that can be matched back to the candidates survive.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::llm::{Gateway, LlmError, LlmRequest};
use crate::prompt::{tags, Prompting, TemplateError};
use crate::sampler::{render_triples, EvidenceSubgraph};
use crate::text::normalize_name;

pub const DEFAULT_RETRIEVE_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerankError {
    #[error("nothing to rerank: the subgraph is empty")]
    EmptySubgraph,
    #[error("retrieve_k must be positive")]
    ZeroK,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Whether the two sampled subgraphs are reranked by one call each or by a
/// single call over their union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    #[default]
    Separate,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedEvidence {
    /// Triple indices in the order the model ranked them.
    pub triples: Vec<usize>,
    pub retrieve_k: usize,
    pub raw_response: String,
    pub unmatched_lines: usize,
}

impl RankedEvidence {
    pub fn empty(retrieve_k: usize) -> Self {
        RankedEvidence {
            triples: Vec::new(),
            retrieve_k,
            raw_response: String::new(),
            unmatched_lines: 0,
        }
    }
}

/// The output-format lines shown to the model, one per slot.
pub fn format_scaffold(k: usize) -> String {
    (1..=k)
        .map(|i| format!("Reranked Triple{i}: xxx ——> xxx"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_rerank_prompt(
    question: &str,
    graph: &KnowledgeGraph,
    triples: &[usize],
    retrieve_k: usize,
    prompting: &Prompting,
) -> Result<LlmRequest, RerankError> {
    if triples.is_empty() {
        return Err(RerankError::EmptySubgraph);
    }
    if retrieve_k == 0 {
        return Err(RerankError::ZeroK);
    }
    let k = retrieve_k.to_string();
    Ok(prompting.request(
        tags::SELF_RETRIEVE,
        &[
            ("graph", &render_triples(graph, triples)),
            ("question", question),
            ("k", &k),
            ("format", &format_scaffold(retrieve_k)),
        ],
    )?)
}

fn ranked_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:#+\s*)?reranked\s+triples?\s*(\d+)\s*[:：]\s*(.*?)\s*$").expect("valid regex")
    })
}

fn arrow() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*(?:—+>|-+>|→)\s*").expect("valid regex"))
}

/// Splits an echoed triple on arrow tokens, dropping empty pieces.
pub fn split_arrows(payload: &str) -> Vec<String> {
    arrow()
        .split(payload)
        .map(|p| p.trim().trim_end_matches('.').trim())
        .filter(|p| !p.is_empty())
        .map(normalize_name)
        .collect()
}

/// Matches each ranked line back to a candidate triple.
///
/// A line matches on the full normalized triple, or failing that on its
/// normalized (head, tail) pair. Lines are taken in ascending rank number;
/// repeats are dropped, lines matching nothing are counted, and at most
/// `retrieve_k` triples are kept. Never fails.
pub fn parse_rerank_output(
    text: &str,
    graph: &KnowledgeGraph,
    candidates: &[usize],
    retrieve_k: usize,
) -> RankedEvidence {
    let keys: Vec<(usize, [String; 3])> = candidates
        .iter()
        .map(|&i| {
            let t = graph.triple(i);
            (
                i,
                [
                    normalize_name(&t.head),
                    normalize_name(&t.relation),
                    normalize_name(&t.tail),
                ],
            )
        })
        .collect();

    let mut lines: Vec<(u64, &str)> = text
        .lines()
        .filter_map(|l| {
            let c = ranked_line().captures(l)?;
            let n = c[1].parse().unwrap_or(u64::MAX);
            Some((n, c.get(2).map_or("", |m| m.as_str())))
        })
        .collect();
    lines.sort_by_key(|&(n, _)| n);

    let mut out = RankedEvidence {
        raw_response: text.to_string(),
        ..RankedEvidence::empty(retrieve_k)
    };
    let mut taken = HashSet::new();
    for (_, payload) in lines {
        if out.triples.len() == retrieve_k {
            break;
        }
        let parts = split_arrows(payload);
        let full = (parts.len() == 3)
            .then(|| keys.iter().find(|(_, k)| k[..] == parts[..]).map(|(i, _)| *i))
            .flatten();
        let found = full.or_else(|| {
            let (h, t) = (parts.first()?, parts.last()?);
            if parts.len() < 2 {
                return None;
            }
            let mut pair = keys.iter().filter(|(_, k)| &k[0] == h && &k[2] == t);
            let first = pair.clone().next().map(|(i, _)| *i);
            pair.find(|(i, _)| !taken.contains(i)).map(|(i, _)| *i).or(first)
        });
        match found {
            Some(i) => {
                if taken.insert(i) {
                    out.triples.push(i);
                }
            }
            None => out.unmatched_lines += 1,
        }
    }
    if out.triples.is_empty() {
        log::warn!("rerank output matched no candidate triple");
    }
    out
}

fn rerank_one(
    question: &str,
    graph: &KnowledgeGraph,
    triples: &[usize],
    retrieve_k: usize,
    gateway: &Gateway,
    prompting: &Prompting,
) -> Result<RankedEvidence, RerankError> {
    if triples.is_empty() {
        return Ok(RankedEvidence::empty(retrieve_k));
    }
    let req = build_rerank_prompt(question, graph, triples, retrieve_k, prompting)?;
    let text = gateway.complete(&req)?;
    Ok(parse_rerank_output(&text, graph, triples, retrieve_k))
}

/// Reranks both subgraphs, returning (path, neighbor) evidence.
///
/// In joint mode a single call sees the union and each kept triple is
/// attributed to the path family if it was sampled there.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    question: &str,
    graph: &KnowledgeGraph,
    path: &EvidenceSubgraph,
    neighbor: &EvidenceSubgraph,
    retrieve_k: usize,
    mode: RerankMode,
    gateway: &Gateway,
    prompting: &Prompting,
) -> Result<(RankedEvidence, RankedEvidence), RerankError> {
    if retrieve_k == 0 {
        return Err(RerankError::ZeroK);
    }
    match mode {
        RerankMode::Separate => Ok((
            rerank_one(question, graph, &path.triples, retrieve_k, gateway, prompting)?,
            rerank_one(question, graph, &neighbor.triples, retrieve_k, gateway, prompting)?,
        )),
        RerankMode::Joint => {
            let mut union = path.triples.clone();
            let in_path: HashSet<usize> = union.iter().copied().collect();
            union.extend(neighbor.triples.iter().filter(|t| !in_path.contains(t)));
            let joint = rerank_one(question, graph, &union, retrieve_k, gateway, prompting)?;
            let (p, n): (Vec<usize>, Vec<usize>) = joint.triples.iter().partition(|t| in_path.contains(t));
            let mut pe = RankedEvidence {
                triples: p,
                ..joint.clone()
            };
            let ne = RankedEvidence { triples: n, ..joint };
            // Unmatched lines belong to the single call; report them once.
            pe.unmatched_lines = 0;
            Ok((pe, ne))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{ExtractionMethod, Triple};
    use crate::llm::ScriptedMock;
    use crate::sampler::SubgraphKind;

    fn graph(edges: &[(&str, &str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(
            edges
                .iter()
                .map(|(h, r, t)| Triple::new(h, r, t, "d", 2015, ExtractionMethod::Generative).unwrap()),
        )
    }

    fn all(g: &KnowledgeGraph) -> Vec<usize> {
        (0..g.triples().len()).collect()
    }

    fn find(g: &KnowledgeGraph, h: &str, t: &str) -> usize {
        g.triples().iter().position(|x| x.head == h && x.tail == t).unwrap()
    }

    #[test]
    fn prompt_shape() {
        let g = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let p = Prompting::default();
        let req = build_rerank_prompt("q?", &g, &all(&g), 5, &p).unwrap();
        assert!(req.user_prompt.contains("at most 5"));
        assert!(req.user_prompt.contains("Reranked Triple1: xxx ——> xxx"));
        assert_eq!(req.tag, "self_retrieve");
        let fixed = p.template(tags::SELF_RETRIEVE).text().lines().count() - 2;
        assert_eq!(req.user_prompt.lines().count(), fixed + 2 + 5);
        assert_eq!(
            build_rerank_prompt("q", &g, &[], 5, &p).unwrap_err(),
            RerankError::EmptySubgraph
        );
    }

    #[test]
    fn arrows_and_case() {
        let g = graph(&[("neurofibrillary tangles", "FORMED BY", "tau")]);
        for line in [
            "Reranked Triple1: neurofibrillary tangles ——> FORMED BY ——> tau",
            "Reranked Triples1: Neurofibrillary tangles -->formed by--> Tau",
            "reranked triple 1: neurofibrillary tangles → FORM BY → tau",
            "Reranked Triple1: neurofibrillary tangles ——> tau",
        ] {
            let r = parse_rerank_output(line, &g, &[0], 5);
            assert_eq!(r.triples, vec![0], "{line}");
            assert_eq!(r.unmatched_lines, 0);
        }
    }

    #[test]
    fn dedup_hallucination_and_truncation() {
        let g = graph(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")]);
        let text = "Reranked Triple1: a -> r -> b\nReranked Triple2: a -> r -> b\nReranked Triple3: x -> r -> y\nReranked Triple4: c -> r -> d\nReranked Triple5: b -> r -> c";
        let r = parse_rerank_output(text, &g, &all(&g), 5);
        assert_eq!(
            r.triples,
            vec![find(&g, "a", "b"), find(&g, "c", "d"), find(&g, "b", "c")]
        );
        assert_eq!(r.unmatched_lines, 1);
        let r = parse_rerank_output(text, &g, &all(&g), 1);
        assert_eq!(r.triples, vec![find(&g, "a", "b")]);
    }

    #[test]
    fn ascending_rank_order() {
        let g = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let r = parse_rerank_output("Reranked Triple2: b->r->c\nReranked Triple1: a->r->b", &g, &all(&g), 5);
        assert_eq!(r.triples, vec![find(&g, "a", "b"), find(&g, "b", "c")]);
    }

    #[test]
    fn non_candidates_never_returned() {
        let g = graph(&[("a", "r", "b"), ("b", "r", "c")]);
        let r = parse_rerank_output("Reranked Triple1: b -> r -> c", &g, &[find(&g, "a", "b")], 5);
        assert!(r.triples.is_empty());
        assert_eq!(r.unmatched_lines, 1);
        assert!(parse_rerank_output("", &g, &all(&g), 5).triples.is_empty());
    }

    fn sub(kind: SubgraphKind, triples: Vec<usize>) -> EvidenceSubgraph {
        EvidenceSubgraph {
            triples,
            ..EvidenceSubgraph::empty(kind)
        }
    }

    #[test]
    fn separate_retrieval_uses_two_calls() {
        let g = graph(&[("a", "r", "b"), ("c", "s", "d")]);
        let (ab, cd) = (find(&g, "a", "b"), find(&g, "c", "d"));
        let gw = Gateway::scripted(
            ScriptedMock::new()
                .tagged_rule("self_retrieve", ["a->r->b"], "Reranked Triple1: a -> r -> b")
                .tagged_rule("self_retrieve", ["c->s->d"], "Reranked Triple1: c -> s -> d"),
        );
        let p = Prompting::default();
        let (pe, ne) = retrieve(
            "q",
            &g,
            &sub(SubgraphKind::PathBased, vec![ab]),
            &sub(SubgraphKind::NeighborBased, vec![cd]),
            5,
            RerankMode::Separate,
            &gw,
            &p,
        )
        .unwrap();
        assert_eq!((pe.triples, ne.triples), (vec![ab], vec![cd]));
        assert_eq!(gw.call_count(), 2);

        let (pe, ne) = retrieve(
            "q",
            &g,
            &sub(SubgraphKind::PathBased, vec![]),
            &sub(SubgraphKind::NeighborBased, vec![cd]),
            5,
            RerankMode::Separate,
            &gw,
            &p,
        )
        .unwrap();
        assert!(pe.triples.is_empty());
        assert_eq!(ne.triples, vec![cd]);
        assert_eq!(gw.call_count(), 3);
    }

    #[test]
    fn joint_retrieval_splits_by_family() {
        let g = graph(&[("a", "r", "b"), ("c", "s", "d")]);
        let (ab, cd) = (find(&g, "a", "b"), find(&g, "c", "d"));
        let gw = Gateway::scripted(ScriptedMock::new().tagged_rule(
            "self_retrieve",
            Vec::<String>::new(),
            "Reranked Triple1: c -> s -> d\nReranked Triple2: a -> r -> b",
        ));
        let (pe, ne) = retrieve(
            "q",
            &g,
            &sub(SubgraphKind::PathBased, vec![ab]),
            &sub(SubgraphKind::NeighborBased, vec![cd]),
            5,
            RerankMode::Joint,
            &gw,
            &Prompting::default(),
        )
        .unwrap();
        assert_eq!((pe.triples, ne.triples), (vec![ab], vec![cd]));
        assert_eq!(gw.call_count(), 1);
    }
}
