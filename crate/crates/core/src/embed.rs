//! Embedding providers and nearest-neighbor entity linking.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{KnowledgeGraph, NodeId};
use crate::llm::{http_agent, post_json, with_retry, LlmError, RetryPolicy, API_KEY_ENV};

pub const HASHED_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("nothing to embed")]
    EmptyInput,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error(transparent)]
    Transport(#[from] LlmError),
    #[error("embedding cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EmbeddingVector(self.0.iter().map(|v| v * factor).collect())
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    if !c.is_finite() {
        return Err(EmbedError::NonFinite);
    }
    Ok(c.clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    /// Stable identity, part of the node-embedding cache key.
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Offline signed-hashing bag-of-tokens embedder.
///
/// Each lowercase alphanumeric token adds ±1 to one of `dim` buckets, both
/// chosen from the SHA-256 of the token. No normalization is applied.
#[derive(Debug, Clone)]
pub struct HashedBagEmbedder {
    dim: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder { dim: HASHED_DIM }
    }
}

impl HashedBagEmbedder {
    pub fn new(dim: usize) -> Self {
        HashedBagEmbedder { dim: dim.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }

    /// `(bucket, sign)` for one token.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let digest = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(b);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        for tok in Self::tokens(text) {
            let (i, s) = self.slot(&tok);
            v[i] += s;
        }
        EmbeddingVector(v)
    }
}

impl Embedder for HashedBagEmbedder {
    fn id(&self) -> String {
        format!("hashed-bag-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-style `POST {base_url}/embeddings` client.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEmbedder {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
            agent: http_agent(Duration::from_secs(120)),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let url = format!("{}/embeddings", self.base_url);
        let body = serde_json::json!({"model": self.model, "input": texts});
        let value = with_retry(&self.retry, || {
            post_json(&self.agent, &url, self.api_key.as_deref(), &body)
        })?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| LlmError::Decode("missing data array".into()))?;
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let v: Vec<f64> =
                serde_json::from_value(item["embedding"].clone()).map_err(|e| LlmError::Decode(e.to_string()))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::NonFinite);
            }
            out.push(EmbeddingVector(v));
        }
        if out.len() != texts.len() {
            return Err(LlmError::Decode(format!("{} embeddings for {} inputs", out.len(), texts.len())).into());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Node embeddings

/// Embeddings of every node name of one graph snapshot, in node-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub snapshot_id: String,
    pub provider_id: String,
    pub names: Vec<String>,
    pub vectors: Vec<EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    name: String,
    vector: EmbeddingVector,
}

impl NodeEmbeddings {
    pub fn build(graph: &KnowledgeGraph, embedder: &dyn Embedder) -> Result<Self, EmbedError> {
        let names: Vec<String> = graph.nodes().iter().map(|n| n.name.clone()).collect();
        let vectors = if names.is_empty() {
            Vec::new()
        } else {
            embedder.embed(&names)?
        };
        Ok(NodeEmbeddings {
            snapshot_id: graph.snapshot_id().to_string(),
            provider_id: embedder.id(),
            names,
            vectors,
        })
    }

    /// Writes `{name, vector}` JSON lines.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), EmbedError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EmbedError::Cache(e.to_string()))?);
        for (name, vector) in self.names.iter().zip(&self.vectors) {
            let line = serde_json::to_string(&CacheLine {
                name: name.clone(),
                vector: vector.clone(),
            })
            .map_err(|e| EmbedError::Cache(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| EmbedError::Cache(e.to_string()))?;
        }
        f.flush().map_err(|e| EmbedError::Cache(e.to_string()))
    }

    /// Loads a JSON-lines cache for `graph`; every node must be present.
    pub fn load_jsonl(path: &Path, graph: &KnowledgeGraph, provider_id: &str) -> Result<Self, EmbedError> {
        let f = std::fs::File::open(path).map_err(|e| EmbedError::Cache(e.to_string()))?;
        let mut by_name = HashMap::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| EmbedError::Cache(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(&line).map_err(|e| EmbedError::Cache(e.to_string()))?;
            by_name.insert(l.name, l.vector);
        }
        let names: Vec<String> = graph.nodes().iter().map(|n| n.name.clone()).collect();
        let vectors = names
            .iter()
            .map(|n| {
                by_name
                    .remove(n)
                    .ok_or_else(|| EmbedError::Cache(format!("no vector for node {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NodeEmbeddings {
            snapshot_id: graph.snapshot_id().to_string(),
            provider_id: provider_id.to_string(),
            names,
            vectors,
        })
    }
}

/// Node embeddings keyed by `(snapshot_id, provider_id)`.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), Arc<NodeEmbeddings>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        graph: &KnowledgeGraph,
        embedder: &dyn Embedder,
    ) -> Result<Arc<NodeEmbeddings>, EmbedError> {
        let key = (graph.snapshot_id().to_string(), embedder.id());
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(hit) = entries.get(&key) {
            return Ok(hit.clone());
        }
        let built = Arc::new(NodeEmbeddings::build(graph, embedder)?);
        entries.insert(key, built.clone());
        Ok(built)
    }

    pub fn insert(&self, embeddings: NodeEmbeddings) {
        let key = (embeddings.snapshot_id.clone(), embeddings.provider_id.clone());
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, Arc::new(embeddings));
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Linking

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkResult {
    pub query_entity: String,
    pub linked_node: NodeId,
    pub node_name: String,
    pub similarity: f64,
}

/// Nearest graph node of a query vector; ties go to the smaller node key.
pub fn nearest_node(query: &EmbeddingVector, nodes: &NodeEmbeddings) -> Option<(NodeId, f64)> {
    let mut best: Option<(NodeId, f64)> = None;
    // Nodes are numbered in key order, so the first maximum is the smallest key.
    for (i, v) in nodes.vectors.iter().enumerate() {
        let Ok(sim) = cosine(query, v) else { continue };
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((NodeId(i as u32), sim));
        }
    }
    best
}

/// Links each query entity to its nearest graph node by cosine similarity.
///
/// A query whose normalized name equals a node key links to that node with
/// similarity exactly 1.0 without embedding. Results are deduplicated by
/// node, keeping the first occurrence; with `min_similarity` set, weaker
/// links are dropped.
pub fn link_entities(
    query_entities: &[String],
    graph: &KnowledgeGraph,
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    min_similarity: Option<f64>,
) -> Result<Vec<LinkResult>, EmbedError> {
    if graph.node_count() == 0 {
        return Err(EmbedError::EmptyGraph);
    }
    let mut resolved: Vec<Option<(NodeId, f64)>> = query_entities
        .iter()
        .map(|q| graph.find(q).map(|id| (id, 1.0)))
        .collect();

    let pending: Vec<usize> = (0..query_entities.len()).filter(|&i| resolved[i].is_none()).collect();
    if !pending.is_empty() {
        let nodes = cache.get_or_build(graph, embedder)?;
        let texts: Vec<String> = pending.iter().map(|&i| query_entities[i].clone()).collect();
        let vectors = embedder.embed(&texts)?;
        for (&i, v) in pending.iter().zip(&vectors) {
            resolved[i] = nearest_node(v, &nodes);
            if resolved[i].is_none() {
                log::warn!("entity {:?} could not be embedded for linking", query_entities[i]);
            }
        }
    }

    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (q, r) in query_entities.iter().zip(resolved) {
        let Some((id, sim)) = r else { continue };
        if min_similarity.is_some_and(|m| sim < m) {
            continue;
        }
        if seen.insert(id) {
            out.push(LinkResult {
                query_entity: q.clone(),
                linked_node: id,
                node_name: graph.node(id).name.clone(),
                similarity: sim,
            });
        }
    }
    Ok(out)
}

/// Cosine similarity with a zero vector on either side scored as 0.
pub fn relevance(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    cosine(a, b).unwrap_or(0.0)
}
