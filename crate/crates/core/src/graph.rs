//! Immutable knowledge-graph snapshots.
//!
//! A [`KnowledgeGraph`] is built from a bag of triples. Triples are
//! deduplicated on their normalized `(head, relation, tail)` key (the
//! earliest-year record wins) and stored in canonical key order, so every
//! index, the TSV form and the `snapshot_id` digest are independent of
//! insertion order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::construct::{ExtractionMethod, Triple, TripleKey};
use crate::text::normalize_name;

pub const TSV_HEADER: &str = "head\trelation\ttail\tsource_doc\tyear\tmethod";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("malformed TSV row {0}")]
    MalformedRow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Node {
    pub id: NodeId,
    /// Display form.
    pub name: String,
    /// Normalized identity key.
    pub key: String,
}

/// One adjacency entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub neighbor: NodeId,
    pub triple: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

/// Result row of [`KnowledgeGraph::neighbors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor<'g> {
    pub relation: &'g str,
    pub neighbor: NodeId,
    pub triple: usize,
    /// True when the queried node is the triple's head.
    pub outgoing: bool,
}

/// Node, relation and triple counts in the layout of a corpus statistics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub corpus: usize,
    pub nodes: usize,
    pub relations: usize,
    pub triples: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    triples: Vec<Triple>,
    endpoints: Vec<(NodeId, NodeId)>,
    out_index: Vec<Vec<Edge>>,
    in_index: Vec<Vec<Edge>>,
    by_key: HashMap<String, NodeId>,
    snapshot_id: String,
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self::from_triples(Vec::new())
    }
}

fn preference(t: &Triple) -> impl Ord + '_ {
    (t.year, &t.source_doc, &t.head, &t.relation, &t.tail, t.method)
}

impl KnowledgeGraph {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut unique: BTreeMap<TripleKey, Triple> = BTreeMap::new();
        for t in triples {
            match unique.entry(t.key()) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(t);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    if preference(&t) < preference(o.get()) {
                        o.insert(t);
                    }
                }
            }
        }

        // Smallest display variant names the node.
        let mut names: BTreeMap<String, String> = BTreeMap::new();
        for (key, t) in &unique {
            for (k, display) in [(&key.head, &t.head), (&key.tail, &t.tail)] {
                names
                    .entry(k.clone())
                    .and_modify(|d| {
                        if display < d {
                            *d = display.clone();
                        }
                    })
                    .or_insert_with(|| display.clone());
            }
        }
        let nodes: Vec<Node> = names
            .into_iter()
            .enumerate()
            .map(|(i, (key, name))| Node {
                id: NodeId(i as u32),
                name,
                key,
            })
            .collect();
        let by_key: HashMap<String, NodeId> = nodes.iter().map(|n| (n.key.clone(), n.id)).collect();

        let mut out_index = vec![Vec::new(); nodes.len()];
        let mut in_index = vec![Vec::new(); nodes.len()];
        let mut endpoints = Vec::with_capacity(unique.len());
        let mut triples = Vec::with_capacity(unique.len());
        for (i, (key, t)) in unique.into_iter().enumerate() {
            let h = by_key[&key.head];
            let d = by_key[&key.tail];
            out_index[h.index()].push(Edge { neighbor: d, triple: i });
            in_index[d.index()].push(Edge { neighbor: h, triple: i });
            endpoints.push((h, d));
            triples.push(t);
        }

        let mut g = KnowledgeGraph {
            nodes,
            triples,
            endpoints,
            out_index,
            in_index,
            by_key,
            snapshot_id: String::new(),
        };
        g.snapshot_id = hex::encode(Sha256::digest(g.to_tsv().as_bytes()));
        g
    }

    /// Digest of the canonical TSV form.
    pub fn snapshot_id(&self) -> &str {
        &self.snapshot_id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, index: usize) -> &Triple {
        &self.triples[index]
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Head and tail node of a triple.
    pub fn endpoints(&self, triple: usize) -> (NodeId, NodeId) {
        self.endpoints[triple]
    }

    /// Looks a node up by any spelling that normalizes to its key.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_key.get(&normalize_name(name)).copied()
    }

    pub fn out_edges(&self, id: NodeId) -> &[Edge] {
        &self.out_index[id.index()]
    }

    pub fn in_edges(&self, id: NodeId) -> &[Edge] {
        &self.in_index[id.index()]
    }

    /// Out and in edges merged in triple order: the undirected view used for
    /// traversal.
    pub fn undirected(&self, id: NodeId) -> impl Iterator<Item = Edge> + '_ {
        let out = self.out_edges(id);
        let inn = self.in_edges(id);
        let (mut i, mut j) = (0, 0);
        std::iter::from_fn(move || {
            let next = match (out.get(i), inn.get(j)) {
                (Some(a), Some(b)) if a.triple <= b.triple => {
                    i += 1;
                    *a
                }
                (_, Some(b)) => {
                    j += 1;
                    *b
                }
                (Some(a), None) => {
                    i += 1;
                    *a
                }
                (None, None) => return None,
            };
            Some(next)
        })
    }

    pub fn neighbors(&self, id: NodeId, direction: Direction) -> Result<Vec<Neighbor<'_>>, GraphError> {
        if id.index() >= self.nodes.len() {
            return Err(GraphError::UnknownNode(id.0.to_string()));
        }
        let make = |e: Edge| Neighbor {
            relation: &self.triples[e.triple].relation,
            neighbor: e.neighbor,
            triple: e.triple,
            outgoing: self.endpoints[e.triple].0 == id,
        };
        Ok(match direction {
            Direction::Out => self.out_edges(id).iter().copied().map(make).collect(),
            Direction::In => self.in_edges(id).iter().copied().map(make).collect(),
            Direction::Both => self.undirected(id).map(make).collect(),
        })
    }

    pub fn neighbors_by_name(&self, name: &str, direction: Direction) -> Result<Vec<Neighbor<'_>>, GraphError> {
        let id = self
            .find(name)
            .ok_or_else(|| GraphError::UnknownNode(name.to_string()))?;
        self.neighbors(id, direction)
    }

    /// Triples with `year <= year`, re-indexed.
    pub fn snapshot_until(&self, year: i32) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(self.triples.iter().filter(|t| t.year <= year).cloned())
    }

    pub fn stats(&self) -> GraphStats {
        let docs: std::collections::BTreeSet<&str> = self.triples.iter().map(|t| t.source_doc.as_str()).collect();
        let relations: std::collections::BTreeSet<String> =
            self.triples.iter().map(|t| normalize_name(&t.relation)).collect();
        GraphStats {
            corpus: docs.len(),
            nodes: self.nodes.len(),
            relations: relations.len(),
            triples: self.triples.len(),
        }
    }

    /// `head->relation->tail` in stored direction.
    pub fn render_triple(&self, index: usize) -> String {
        let t = &self.triples[index];
        format!("{}->{}->{}", t.head, t.relation, t.tail)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                escape(&t.head),
                escape(&t.relation),
                escape(&t.tail),
                escape(&t.source_doc),
                t.year,
                t.method
            );
        }
        out
    }

    pub fn from_tsv(input: &str) -> Result<Self, GraphError> {
        let mut lines = input.lines().enumerate();
        match lines.next() {
            None => return Ok(Self::default()),
            Some((_, h)) if h.trim_end_matches('\r') == TSV_HEADER => {}
            Some(_) => return Err(GraphError::MalformedRow(1)),
        }
        let mut triples = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(GraphError::MalformedRow(line_no));
            }
            let year: i32 = cols[4].parse().map_err(|_| GraphError::MalformedRow(line_no))?;
            let method: ExtractionMethod = cols[5].parse().map_err(|_| GraphError::MalformedRow(line_no))?;
            let t = Triple::new(
                &unescape(cols[0]),
                &unescape(cols[1]),
                &unescape(cols[2]),
                &unescape(cols[3]),
                year,
                method,
            )
            .map_err(|_| GraphError::MalformedRow(line_no))?;
            triples.push(t);
        }
        Ok(Self::from_triples(triples))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::ExtractionMethod::Generative;

    fn t(h: &str, r: &str, d: &str, year: i32) -> Triple {
        Triple::new(h, r, d, "doc", year, Generative).unwrap()
    }

    #[test]
    fn empty_graph() {
        let g = KnowledgeGraph::from_triples(vec![]);
        assert_eq!(g.node_count(), 0);
        assert!(g.is_empty());
        assert_eq!(g.to_tsv(), format!("{TSV_HEADER}\n"));
    }

    #[test]
    fn single_triple() {
        let g = KnowledgeGraph::from_triples(vec![t("a", "r", "b", 2015)]);
        assert_eq!(g.node_count(), 2);
        let a = g.find("A").unwrap();
        assert_eq!(g.out_edges(a).len(), 1);
        assert_eq!(g.in_edges(a).len(), 0);
    }

    #[test]
    fn dedup_keeps_earliest_year() {
        let mut a = t("APOE", "associates", "AD", 2015);
        a.source_doc = "2".into();
        let mut b = t("apoe", "ASSOCIATES", "ad", 2012);
        b.source_doc = "1".into();
        let g1 = KnowledgeGraph::from_triples(vec![a.clone(), b.clone()]);
        let g2 = KnowledgeGraph::from_triples(vec![b, a]);
        assert_eq!(g1.triples().len(), 1);
        assert_eq!(g1.triple(0).year, 2012);
        assert_eq!(g1.snapshot_id(), g2.snapshot_id());
    }

    #[test]
    fn star_hub_degree() {
        let n = 7;
        let g = KnowledgeGraph::from_triples((0..n - 1).map(|i| t("hub", "r", &format!("leaf{i}"), 2011)));
        let hub = g.find("hub").unwrap();
        assert_eq!(g.neighbors(hub, Direction::Both).unwrap().len(), n - 1);
        assert_eq!(g.neighbors(hub, Direction::In).unwrap().len(), 0);
    }

    #[test]
    fn unknown_node() {
        let g = KnowledgeGraph::from_triples(vec![t("a", "r", "b", 2015)]);
        assert!(matches!(
            g.neighbors(NodeId(9), Direction::Both),
            Err(GraphError::UnknownNode(_))
        ));
        assert!(matches!(
            g.neighbors_by_name("zzz", Direction::Both),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn snapshot_bounds() {
        let g = KnowledgeGraph::from_triples(vec![t("a", "r", "b", 2012), t("b", "r", "c", 2015)]);
        assert!(g.snapshot_until(2011).is_empty());
        assert_eq!(g.snapshot_until(2012).triples().len(), 1);
        assert_eq!(g.snapshot_until(2030).snapshot_id(), g.snapshot_id());
    }

    #[test]
    fn tsv_errors() {
        let four = format!("{TSV_HEADER}\na\tr\tb\tdoc\n");
        assert_eq!(
            KnowledgeGraph::from_tsv(&four).unwrap_err(),
            GraphError::MalformedRow(2)
        );
        assert_eq!(
            KnowledgeGraph::from_tsv("x\ty\n").unwrap_err(),
            GraphError::MalformedRow(1)
        );
        let bad_year = format!("{TSV_HEADER}\na\tr\tb\tdoc\tyr\tgenerative\n");
        assert_eq!(
            KnowledgeGraph::from_tsv(&bad_year).unwrap_err(),
            GraphError::MalformedRow(2)
        );
    }

    #[test]
    fn tsv_escapes_round_trip() {
        let g = KnowledgeGraph::from_triples(vec![t("a\\b", "r", "tab\there", 2015)]);
        let back = KnowledgeGraph::from_tsv(&g.to_tsv()).unwrap();
        assert_eq!(back.snapshot_id(), g.snapshot_id());
        assert_eq!(back.triple(0).tail, "tab here");
    }

    #[test]
    fn stats_layout() {
        let g = KnowledgeGraph::from_triples(vec![t("a", "r", "b", 2012), t("b", "R", "c", 2015)]);
        let s = g.stats();
        assert_eq!((s.corpus, s.nodes, s.relations, s.triples), (1, 3, 1, 2));
    }
}
