//! Multiple-choice question answering over the knowledge graph.
//!
//! [`answer`] runs the full pipeline for one sample: entity extraction,
//! linking, subgraph sampling, self-retrieval, verbalization and the final
//! chain-of-thought inference call. Every model call it makes is recorded
//! in the prediction's trace.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::embed::{link_entities, Embedder, EmbeddingCache};
use crate::graph::KnowledgeGraph;
use crate::llm::{traced, Gateway, LlmRequest};
use crate::prompt::{tags, Prompting};
use crate::rerank::{retrieve, RankedEvidence, RerankMode, DEFAULT_RETRIEVE_K};
use crate::sampler::{
    explore_neighbors, explore_paths, extract_question_entities, prune, verbalize, EvidenceSubgraph, SamplerConfig,
    SubgraphKind,
};

#[derive(Debug, Error)]
pub enum QaError {
    #[error("line {line}: {message}")]
    InvalidSample { line: usize, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Source benchmark of a question. Unknown names are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dataset {
    MedQA,
    MedMCQA,
    MMLU,
    QA4MRE,
    Other(String),
}

impl Dataset {
    pub const KNOWN: [Dataset; 4] = [Dataset::MedQA, Dataset::MedMCQA, Dataset::MMLU, Dataset::QA4MRE];
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::MedQA => "MedQA",
            Dataset::MedMCQA => "MedMCQA",
            Dataset::MMLU => "MMLU",
            Dataset::QA4MRE => "QA4MRE",
            Dataset::Other(s) => s,
        })
    }
}

impl FromStr for Dataset {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "MedQA" => Dataset::MedQA,
            "MedMCQA" => Dataset::MedMCQA,
            "MMLU" => Dataset::MMLU,
            "QA4MRE" => Dataset::QA4MRE,
            other => Dataset::Other(other.to_string()),
        })
    }
}

impl Serialize for Dataset {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub dataset: Dataset,
    pub question: String,
    /// Option letter to option text, contiguous from `A`.
    pub options: BTreeMap<char, String>,
    pub gold: char,
}

impl QASample {
    pub fn validate(&self) -> Result<(), String> {
        if !(2..=5).contains(&self.options.len()) {
            return Err(format!(
                "{}: expected 2 to 5 options, got {}",
                self.id,
                self.options.len()
            ));
        }
        for (i, &l) in self.options.keys().enumerate() {
            if l != (b'A' + i as u8) as char {
                return Err(format!("{}: option letters must run from A without gaps", self.id));
            }
        }
        if !self.options.contains_key(&self.gold) {
            return Err(format!("{}: gold {} is not an option", self.id, self.gold));
        }
        Ok(())
    }

    pub fn letters(&self) -> Vec<char> {
        self.options.keys().copied().collect()
    }

    /// One `L. text` line per option.
    pub fn render_options(&self) -> String {
        self.options
            .iter()
            .map(|(l, t)| format!("{l}. {t}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Sampling, self-retrieval and evidence-augmented inference.
    #[default]
    Dalk,
    /// Sampling without reranking: all pruned triples become evidence.
    NoSelfRetrieval,
    /// Chain-of-thought inference with no evidence.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "error", rename_all = "snake_case")]
pub enum PredictionStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub dataset: Dataset,
    pub gold: char,
    pub predicted: Option<char>,
    pub raw_response: String,
    /// The mode actually run; `Baseline` when no question entity linked.
    pub mode: AnswerMode,
    pub linked_entities: Vec<String>,
    pub path_evidence: RankedEvidence,
    pub neighbor_evidence: RankedEvidence,
    /// Cache keys of every model call made for this sample, in order.
    pub trace: Vec<String>,
    #[serde(flatten)]
    pub status: PredictionStatus,
}

impl Prediction {
    /// Unanswered samples count as wrong.
    pub fn is_correct(&self) -> bool {
        self.predicted == Some(self.gold)
    }
}

/// What was sampled and said for one question; written by the debug dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgraphDump {
    pub sample_id: String,
    pub path_segments: Vec<Vec<String>>,
    pub path_triples: Vec<String>,
    pub neighbor_triples: Vec<String>,
    pub path_sentences: Vec<String>,
    pub neighbor_sentences: Vec<String>,
}

impl SubgraphDump {
    fn new(sample_id: &str, graph: &KnowledgeGraph, path: &EvidenceSubgraph, neighbor: &EvidenceSubgraph) -> Self {
        let render = |ts: &[usize]| ts.iter().map(|&t| graph.render_triple(t)).collect();
        SubgraphDump {
            sample_id: sample_id.to_string(),
            path_segments: path
                .segments
                .iter()
                .map(|s| s.nodes.iter().map(|&n| graph.node(n).name.clone()).collect())
                .collect(),
            path_triples: render(&path.triples),
            neighbor_triples: render(&neighbor.triples),
            path_sentences: path.verbalized.clone().unwrap_or_default(),
            neighbor_sentences: neighbor.verbalized.clone().unwrap_or_default(),
        }
    }
}

/// Everything [`answer`] needs besides the sample and the graph.
pub struct QaContext<'a> {
    pub gateway: &'a Gateway,
    pub prompting: &'a Prompting,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a EmbeddingCache,
    pub sampler: SamplerConfig,
    pub retrieve_k: usize,
    pub rerank_mode: RerankMode,
    pub min_link_similarity: Option<f64>,
    /// Extract entities from the options as well as the stem.
    pub entities_from_options: bool,
}

impl<'a> QaContext<'a> {
    pub fn new(
        gateway: &'a Gateway,
        prompting: &'a Prompting,
        embedder: &'a dyn Embedder,
        cache: &'a EmbeddingCache,
    ) -> Self {
        QaContext {
            gateway,
            prompting,
            embedder,
            cache,
            sampler: SamplerConfig::default(),
            retrieve_k: DEFAULT_RETRIEVE_K,
            rerank_mode: RerankMode::default(),
            min_link_similarity: None,
            entities_from_options: true,
        }
    }
}

fn evidence_block(label: &str, sentences: &[String]) -> String {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let hashes = if i == 0 { "###" } else { "" };
            format!("{hashes}{label} {}: {s}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The final inference prompt. With no sentences at all it is a plain
/// chain-of-thought prompt carrying no evidence section.
pub fn build_inference_prompt(
    sample: &QASample,
    path_sentences: &[String],
    neighbor_sentences: &[String],
    prompting: &Prompting,
) -> LlmRequest {
    let mut blocks = Vec::new();
    if !path_sentences.is_empty() {
        blocks.push(evidence_block(SubgraphKind::PathBased.label(), path_sentences));
    }
    if !neighbor_sentences.is_empty() {
        blocks.push(evidence_block(SubgraphKind::NeighborBased.label(), neighbor_sentences));
    }
    let evidence = if blocks.is_empty() {
        String::new()
    } else {
        format!(
            "\nYou have some medical knowledge information in the following:\n{}\n",
            blocks.join("\n")
        )
    };
    prompting
        .request(
            tags::INFERENCE,
            &[
                ("question", &sample.question),
                ("options", &sample.render_options()),
                ("evidence", &evidence),
            ],
        )
        .expect("inference template slots are fixed")
}

fn answer_patterns() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"(?i:answer is)\s*:?\s*\(?([A-Z])\b").expect("valid regex"),
            Regex::new(r"\((?i:option)\s*([A-Z])\)").expect("valid regex"),
            Regex::new(r"(?m)^\s*([A-Z])\.").expect("valid regex"),
        ]
    })
}

/// The option letter a free-text response settles on.
///
/// Tries, in order, the last "answer is L", the last "(option L)", and the
/// last line starting with "L.". Letters outside `letters` are ignored.
pub fn extract_answer(text: &str, letters: &[char]) -> Option<char> {
    answer_patterns().iter().find_map(|re| {
        re.captures_iter(text)
            .filter_map(|c| c[1].chars().next())
            .filter(|l| letters.contains(l))
            .last()
    })
}

/// Answers one sample. Model failures are reported in the prediction's
/// status, never returned as errors.
pub fn answer(sample: &QASample, graph: &KnowledgeGraph, ctx: &QaContext<'_>, mode: AnswerMode) -> Prediction {
    answer_detailed(sample, graph, ctx, mode).0
}

/// Like [`answer`], also returning the sampled subgraphs when any were.
pub fn answer_detailed(
    sample: &QASample,
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    mode: AnswerMode,
) -> (Prediction, Option<SubgraphDump>) {
    let mut pred = Prediction {
        sample_id: sample.id.clone(),
        dataset: sample.dataset.clone(),
        gold: sample.gold,
        predicted: None,
        raw_response: String::new(),
        mode,
        linked_entities: Vec::new(),
        path_evidence: RankedEvidence::empty(ctx.retrieve_k),
        neighbor_evidence: RankedEvidence::empty(ctx.retrieve_k),
        trace: Vec::new(),
        status: PredictionStatus::Ok,
    };
    let mut dump = None;
    let (result, trace) = traced(|| run(sample, graph, ctx, &mut pred, &mut dump));
    pred.trace = trace;
    if let Err(e) = result {
        log::warn!("sample {} failed: {e}", sample.id);
        pred.status = PredictionStatus::Failed(e);
    }
    (pred, dump)
}

fn run(
    sample: &QASample,
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    pred: &mut Prediction,
    dump: &mut Option<SubgraphDump>,
) -> Result<(), String> {
    let mut sentences = (Vec::new(), Vec::new());
    if mode_uses_graph(pred.mode) {
        match sample_evidence(sample, graph, ctx, pred)? {
            Some((path, neighbor)) => {
                sentences = (
                    path.verbalized.clone().unwrap_or_default(),
                    neighbor.verbalized.clone().unwrap_or_default(),
                );
                *dump = Some(SubgraphDump::new(&sample.id, graph, &path, &neighbor));
            }
            None => pred.mode = AnswerMode::Baseline,
        }
    }
    let req = build_inference_prompt(sample, &sentences.0, &sentences.1, ctx.prompting);
    let text = ctx.gateway.complete(&req).map_err(|e| e.to_string())?;
    pred.predicted = extract_answer(&text, &sample.letters());
    pred.raw_response = text;
    Ok(())
}

fn mode_uses_graph(mode: AnswerMode) -> bool {
    mode != AnswerMode::Baseline
}

/// Samples, reranks and verbalizes evidence. `None` when no question
/// entity links to the graph.
fn sample_evidence(
    sample: &QASample,
    graph: &KnowledgeGraph,
    ctx: &QaContext<'_>,
    pred: &mut Prediction,
) -> Result<Option<(EvidenceSubgraph, EvidenceSubgraph)>, String> {
    if graph.is_empty() {
        return Ok(None);
    }
    let query = if ctx.entities_from_options {
        format!("{}\n{}", sample.question, sample.render_options())
    } else {
        sample.question.clone()
    };
    let entities = extract_question_entities(&query, ctx.gateway, ctx.prompting).map_err(|e| e.to_string())?;
    if entities.is_empty() {
        return Ok(None);
    }
    let links =
        link_entities(&entities, graph, ctx.embedder, ctx.cache, ctx.min_link_similarity).map_err(|e| e.to_string())?;
    if links.is_empty() {
        return Ok(None);
    }
    pred.linked_entities = links.iter().map(|l| l.node_name.clone()).collect();
    let seeds: Vec<_> = links.iter().map(|l| l.linked_node).collect();

    let err = |e: crate::sampler::SamplerError| e.to_string();
    let mut path = prune(explore_paths(graph, &seeds, &ctx.sampler).map_err(err)?, &ctx.sampler);
    let mut neighbor = prune(
        explore_neighbors(graph, &seeds, &sample.question, ctx.embedder, ctx.cache, &ctx.sampler).map_err(err)?,
        &ctx.sampler,
    );

    let (pe, ne) = match pred.mode {
        AnswerMode::Dalk => retrieve(
            &sample.question,
            graph,
            &path,
            &neighbor,
            ctx.retrieve_k,
            ctx.rerank_mode,
            ctx.gateway,
            ctx.prompting,
        )
        .map_err(|e| e.to_string())?,
        _ => {
            let all = |s: &EvidenceSubgraph| RankedEvidence {
                triples: s.triples.clone(),
                retrieve_k: s.triples.len(),
                raw_response: String::new(),
                unmatched_lines: 0,
            };
            (all(&path), all(&neighbor))
        }
    };
    path.verbalized =
        Some(verbalize(graph, &pe.triples, SubgraphKind::PathBased, ctx.gateway, ctx.prompting).map_err(err)?);
    neighbor.verbalized = Some(
        verbalize(
            graph,
            &ne.triples,
            SubgraphKind::NeighborBased,
            ctx.gateway,
            ctx.prompting,
        )
        .map_err(err)?,
    );
    pred.path_evidence = pe;
    pred.neighbor_evidence = ne;
    Ok(Some((path, neighbor)))
}

/// Reads one sample per non-blank line, validating each.
pub fn read_samples(path: &Path) -> Result<Vec<QASample>, QaError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| QaError::InvalidSample { line: i + 1, message };
        let s: QASample = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        s.validate().map_err(invalid)?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
