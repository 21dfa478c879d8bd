//! Knowledge-graph construction from annotated abstracts.
//!
//! Two relation-extraction strategies share the Hetionet relation menu:
//!
//! * **generative**: one request per abstract; the model lists every triple
//!   as `head | relation | tail`, choosing a Hetionet relation or inventing a
//!   predicate;
//! * **pair-wise**: one request per entity pair whose PubTator types map onto
//!   Hetionet types; the model picks a lettered option from the relations
//!   Hetionet allows for that type pair, `no-relation`, or `others` with a
//!   short free-text predicate.
//!
//! Triples are stamped with their source document and publication year and
//! deduplicated into a [`KnowledgeGraph`] keeping the earliest year.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, EntityType};
use crate::graph::KnowledgeGraph;
use crate::llm::{BatchError, Gateway, LlmRequest};
use crate::prompt::{tags, Prompting, TemplateError};
use crate::text::{collapse_whitespace, normalize_name};

/// Relation vocabulary offered to the model in both strategies.
pub const HETIONET_RELATIONS: [&str; 10] = [
    "covaries",
    "interacts",
    "regulates",
    "resembles",
    "downregulates",
    "upregulates",
    "associates",
    "binds",
    "treats",
    "palliates",
];

/// Pair-wise instruction for the free-text option.
pub const OTHERS_OPTION: &str = "others, please specify by generating a short predicate in 5 words.";
pub const NO_RELATION_OPTION: &str = "no-relation";
pub const MAX_GENERATED_PREDICATE_WORDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructError {
    #[error("document {0} has fewer than two distinct entities")]
    TooFewEntities(String),
    #[error("entity pair has no candidate relations")]
    NoCandidates,
    #[error("document {0} has no publication year")]
    MissingYear(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] BatchError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TripleError {
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("head and tail are the same entity")]
    SelfLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMethod {
    Generative,
    #[serde(rename = "pairwise")]
    PairWise,
}

impl fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractionMethod::Generative => "generative",
            ExtractionMethod::PairWise => "pairwise",
        })
    }
}

impl FromStr for ExtractionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generative" => Ok(ExtractionMethod::Generative),
            "pairwise" => Ok(ExtractionMethod::PairWise),
            other => Err(format!("unknown extraction method {other:?}")),
        }
    }
}

/// A provenance-stamped `(head, relation, tail)` assertion. Fields keep their
/// display casing; identity goes through [`Triple::key`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source_doc: String,
    pub year: i32,
    pub method: ExtractionMethod,
}

/// Normalized identity of a triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleKey {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(
        head: &str,
        relation: &str,
        tail: &str,
        source_doc: &str,
        year: i32,
        method: ExtractionMethod,
    ) -> Result<Self, TripleError> {
        let head = collapse_whitespace(head);
        let relation = collapse_whitespace(relation);
        let tail = collapse_whitespace(tail);
        for (name, v) in [("head", &head), ("relation", &relation), ("tail", &tail)] {
            if v.is_empty() {
                return Err(TripleError::EmptyField(name));
            }
        }
        if normalize_name(&head) == normalize_name(&tail) {
            return Err(TripleError::SelfLoop);
        }
        Ok(Triple {
            head,
            relation,
            tail,
            source_doc: source_doc.to_string(),
            year,
            method,
        })
    }

    pub fn key(&self) -> TripleKey {
        TripleKey {
            head: normalize_name(&self.head),
            relation: normalize_name(&self.relation),
            tail: normalize_name(&self.tail),
        }
    }
}

// ---------------------------------------------------------------------------
// Hetionet tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HetionetType {
    Genes,
    Compounds,
    Diseases,
}

impl HetionetType {
    pub fn as_str(self) -> &'static str {
        match self {
            HetionetType::Genes => "genes",
            HetionetType::Compounds => "compounds",
            HetionetType::Diseases => "diseases",
        }
    }
}

/// PubTator type → Hetionet type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeMatchTable {
    entries: Vec<(EntityType, HetionetType)>,
}

impl Default for TypeMatchTable {
    fn default() -> Self {
        TypeMatchTable {
            entries: vec![
                (EntityType::Gene, HetionetType::Genes),
                (EntityType::Chemical, HetionetType::Compounds),
                (EntityType::Disease, HetionetType::Diseases),
            ],
        }
    }
}

impl TypeMatchTable {
    pub fn entries(&self) -> &[(EntityType, HetionetType)] {
        &self.entries
    }

    pub fn lookup(&self, t: &EntityType) -> Option<HetionetType> {
        self.entries.iter().find(|(k, _)| k == t).map(|(_, v)| *v)
    }
}

/// Unordered Hetionet type pair → allowed relations. Lookup is symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationCandidateTable {
    entries: Vec<(&'static str, (HetionetType, HetionetType), Vec<&'static str>)>,
}

impl Default for RelationCandidateTable {
    fn default() -> Self {
        use HetionetType::*;
        RelationCandidateTable {
            entries: vec![
                (
                    "genes-genes",
                    (Genes, Genes),
                    vec!["covaries", "interacts", "regulates"],
                ),
                ("disease-disease", (Diseases, Diseases), vec!["resembles"]),
                ("compounds-compounds", (Compounds, Compounds), vec!["resembles"]),
                (
                    "genes-diseases",
                    (Genes, Diseases),
                    vec!["downregulates", "associates", "upregulates"],
                ),
                (
                    "genes-compounds",
                    (Genes, Compounds),
                    vec!["binds", "upregulates", "downregulates"],
                ),
                ("compounds-diseases", (Compounds, Diseases), vec!["treats", "palliates"]),
            ],
        }
    }
}

impl RelationCandidateTable {
    /// `(label, relations)` rows in table order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &[&'static str])> {
        self.entries.iter().map(|(label, _, rels)| (*label, rels.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, a: HetionetType, b: HetionetType) -> Option<&[&'static str]> {
        self.entries
            .iter()
            .find(|(_, (x, y), _)| (*x, *y) == (a, b) || (*x, *y) == (b, a))
            .map(|(_, _, rels)| rels.as_slice())
    }
}

// ---------------------------------------------------------------------------
// Entities

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConstructOptions {
    /// Feed the title (and its mentions) to the model as well as the abstract.
    pub include_title: bool,
}

/// A distinct entity of a document: first mention per normalized surface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocEntity {
    pub surface: String,
    pub entity_type: EntityType,
}

pub fn document_entities(doc: &AnnotatedDocument, opts: ConstructOptions) -> Vec<DocEntity> {
    let off = if opts.include_title { 0 } else { doc.abstract_offset() };
    let mut seen = HashSet::new();
    doc.mentions
        .iter()
        .filter(|m| m.start >= off)
        .filter(|m| seen.insert(normalize_name(&m.surface)))
        .map(|m| DocEntity {
            surface: collapse_whitespace(&m.surface),
            entity_type: m.entity_type.clone(),
        })
        .collect()
}

fn prompt_text(doc: &AnnotatedDocument, opts: ConstructOptions) -> String {
    if opts.include_title {
        doc.full_text()
    } else {
        doc.abstract_text.clone()
    }
}

fn entity_list(entities: &[DocEntity]) -> String {
    entities
        .iter()
        .map(|e| e.surface.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------
// Generative extraction

pub fn build_generative_prompt(
    doc: &AnnotatedDocument,
    prompting: &Prompting,
    opts: ConstructOptions,
) -> Result<LlmRequest, ConstructError> {
    let entities = document_entities(doc, opts);
    if entities.len() < 2 {
        return Err(ConstructError::TooFewEntities(doc.doc_id.clone()));
    }
    let text = prompt_text(doc, opts);
    Ok(prompting.request(
        tags::RE_GENERATIVE,
        &[("abstract", &text), ("entities", &entity_list(&entities))],
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerativeParse {
    pub triples: Vec<Triple>,
    pub rejected: usize,
}

/// Splits on newlines and on commas outside brackets and double quotes.
fn split_top_level(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut buf = String::new();
    let mut depth = 0i32;
    let mut quoted = false;
    for c in text.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                buf.push(c);
            }
            '(' | '[' | '{' if !quoted => {
                depth += 1;
                buf.push(c);
            }
            ')' | ']' | '}' if !quoted => {
                depth = (depth - 1).max(0);
                buf.push(c);
            }
            '\n' => {
                items.push(std::mem::take(&mut buf));
                depth = 0;
                quoted = false;
            }
            ',' if depth == 0 && !quoted => items.push(std::mem::take(&mut buf)),
            _ => buf.push(c),
        }
    }
    items.push(buf);
    items
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]|\d{1,3}[.)])\s+").expect("valid regex"))
}

fn strip_item(item: &str) -> &str {
    let mut s = item.trim();
    if let Some(rest) = s.strip_prefix("Output:") {
        s = rest.trim();
    }
    if let Some(m) = list_marker().find(s) {
        s = &s[m.end()..];
    }
    let s = s.trim().trim_end_matches('.');
    s.trim_matches('"').trim()
}

/// Parses `head | relation | tail` items. Items without exactly three
/// non-degenerate fields are counted in `rejected`.
pub fn parse_generative_output(text: &str, doc: &AnnotatedDocument) -> GenerativeParse {
    let year = doc.year.unwrap_or_default();
    let mut out = GenerativeParse::default();
    for item in split_top_level(text) {
        let item = strip_item(&item);
        if item.is_empty() {
            continue;
        }
        let fields: Vec<&str> = item.split('|').map(str::trim).collect();
        let triple = match fields.as_slice() {
            [h, r, t] => Triple::new(h, r, t, &doc.doc_id, year, ExtractionMethod::Generative).ok(),
            _ => None,
        };
        match triple {
            Some(t) => out.triples.push(t),
            None => out.rejected += 1,
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pair-wise extraction

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityPair {
    pub head: DocEntity,
    pub tail: DocEntity,
    pub candidates: Vec<&'static str>,
}

impl EntityPair {
    /// Option labels in prompt order: candidates, no-relation, others.
    pub fn options(&self) -> Vec<String> {
        let mut v: Vec<String> = self.candidates.iter().map(|s| s.to_string()).collect();
        v.push(NO_RELATION_OPTION.to_string());
        v.push(OTHERS_OPTION.to_string());
        v
    }

    pub fn no_relation_index(&self) -> usize {
        self.candidates.len()
    }

    pub fn others_index(&self) -> usize {
        self.candidates.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairEnumeration {
    pub pairs: Vec<EntityPair>,
    /// Pairs skipped because an entity type has no Hetionet counterpart.
    pub excluded: usize,
}

pub fn enumerate_pairs(
    doc: &AnnotatedDocument,
    types: &TypeMatchTable,
    relations: &RelationCandidateTable,
    opts: ConstructOptions,
) -> PairEnumeration {
    let entities = document_entities(doc, opts);
    let mut out = PairEnumeration::default();
    for (i, a) in entities.iter().enumerate() {
        for b in &entities[i + 1..] {
            let candidates = match (types.lookup(&a.entity_type), types.lookup(&b.entity_type)) {
                (Some(x), Some(y)) => relations.lookup(x, y),
                _ => None,
            };
            match candidates {
                Some(c) => out.pairs.push(EntityPair {
                    head: a.clone(),
                    tail: b.clone(),
                    candidates: c.to_vec(),
                }),
                None => out.excluded += 1,
            }
        }
    }
    out
}

fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// `A. x B. y ...` rendering of a pair's options.
pub fn render_options(pair: &EntityPair) -> String {
    pair.options()
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", option_letter(i), o))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn build_pairwise_prompt(
    pair: &EntityPair,
    doc: &AnnotatedDocument,
    prompting: &Prompting,
    opts: ConstructOptions,
) -> Result<LlmRequest, ConstructError> {
    if pair.candidates.is_empty() {
        return Err(ConstructError::NoCandidates);
    }
    let entities = document_entities(doc, opts);
    let text = prompt_text(doc, opts);
    let options = render_options(pair);
    Ok(prompting.request(
        tags::RE_PAIRWISE,
        &[
            ("abstract", &text),
            ("entities", &entity_list(&entities)),
            ("head", &pair.head.surface),
            ("tail", &pair.tail.surface),
            ("head_type", pair.head.entity_type.as_str()),
            ("tail_type", pair.tail.entity_type.as_str()),
            ("options", &options),
        ],
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairwiseOutcome {
    Relation {
        triple: Triple,
        /// True when the predicate came from the free-text `others` option.
        generated: bool,
    },
    NoRelation,
    Unparseable,
}

fn answer_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:answer is)\s*:?\s*\(?([A-Z])\b").expect("valid regex"))
}

fn generated_predicate(rest: &str) -> Option<String> {
    let rest = rest.trim_start_matches(|c: char| c == '.' || c == ')' || c == ':' || c.is_whitespace());
    let rest = match rest.get(..6) {
        Some(p) if p.eq_ignore_ascii_case("others") => &rest[6..],
        _ => rest,
    };
    let rest = rest.trim_start_matches(|c: char| ",:;-".contains(c) || c.is_whitespace());
    let line = rest.lines().next().unwrap_or("");
    let sentence = line.split(". ").next().unwrap_or("").trim().trim_end_matches('.');
    let sentence = sentence.trim_matches(|c: char| c == '"' || c == '\'' || c.is_whitespace());
    if sentence.is_empty() || sentence.to_ascii_lowercase().starts_with("please specify") {
        return None;
    }
    let words: Vec<&str> = sentence
        .split_whitespace()
        .take(MAX_GENERATED_PREDICATE_WORDS)
        .collect();
    Some(words.join(" "))
}

/// Reads the model's choice from the last `answer is: <LETTER>`.
pub fn parse_pairwise_output(text: &str, pair: &EntityPair, doc: &AnnotatedDocument) -> PairwiseOutcome {
    let Some(cap) = answer_letter().captures_iter(text).last() else {
        log::warn!("doc {}: no answer letter in pair-wise output", doc.doc_id);
        return PairwiseOutcome::Unparseable;
    };
    let m = cap.get(1).expect("group 1");
    let index = (m.as_str().as_bytes()[0] - b'A') as usize;
    let (relation, generated) = if index < pair.candidates.len() {
        (pair.candidates[index].to_string(), false)
    } else if index == pair.no_relation_index() {
        return PairwiseOutcome::NoRelation;
    } else if index == pair.others_index() {
        match generated_predicate(&text[m.end()..]) {
            Some(p) => (p, true),
            None => {
                log::warn!("doc {}: others option without a predicate", doc.doc_id);
                return PairwiseOutcome::Unparseable;
            }
        }
    } else {
        log::warn!("doc {}: answer letter {} out of range", doc.doc_id, m.as_str());
        return PairwiseOutcome::Unparseable;
    };
    match Triple::new(
        &pair.head.surface,
        &relation,
        &pair.tail.surface,
        &doc.doc_id,
        doc.year.unwrap_or_default(),
        ExtractionMethod::PairWise,
    ) {
        Ok(triple) => PairwiseOutcome::Relation { triple, generated },
        Err(_) => PairwiseOutcome::Unparseable,
    }
}

// ---------------------------------------------------------------------------
// Whole-corpus construction

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub method: Option<ExtractionMethod>,
    pub documents: usize,
    /// Documents with fewer than two entities (generative) or no eligible pair.
    pub documents_skipped: usize,
    pub requests: usize,
    /// Well-formed triples extracted before deduplication.
    pub raw_candidates: usize,
    /// Generative items that were not well-formed triples.
    pub rejected: usize,
    pub pairs_excluded: usize,
    pub no_relation: usize,
    pub unparseable: usize,
    pub generated_relations: usize,
    pub triples_kept: usize,
}

pub struct BuildContext<'a> {
    pub gateway: &'a Gateway,
    pub prompting: &'a Prompting,
    pub options: ConstructOptions,
    pub types: TypeMatchTable,
    pub relations: RelationCandidateTable,
}

impl<'a> BuildContext<'a> {
    pub fn new(gateway: &'a Gateway, prompting: &'a Prompting) -> Self {
        BuildContext {
            gateway,
            prompting,
            options: ConstructOptions::default(),
            types: TypeMatchTable::default(),
            relations: RelationCandidateTable::default(),
        }
    }
}

pub fn construct_kg(
    docs: &[AnnotatedDocument],
    method: ExtractionMethod,
    ctx: &BuildContext<'_>,
) -> Result<(KnowledgeGraph, BuildReport), ConstructError> {
    if let Some(d) = docs.iter().find(|d| d.year.is_none()) {
        return Err(ConstructError::MissingYear(d.doc_id.clone()));
    }
    let mut report = BuildReport {
        method: Some(method),
        documents: docs.len(),
        ..Default::default()
    };
    let mut triples = Vec::new();

    match method {
        ExtractionMethod::Generative => {
            let mut requests = Vec::new();
            let mut owners = Vec::new();
            for doc in docs {
                match build_generative_prompt(doc, ctx.prompting, ctx.options) {
                    Ok(r) => {
                        requests.push(r);
                        owners.push(doc);
                    }
                    Err(ConstructError::TooFewEntities(id)) => {
                        log::info!("skipping document {id}: fewer than two entities");
                        report.documents_skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            report.requests = requests.len();
            let responses = ctx.gateway.complete_batch(&requests)?;
            for (doc, text) in owners.into_iter().zip(responses) {
                let parsed = parse_generative_output(&text, doc);
                if parsed.rejected > 0 {
                    log::warn!("doc {}: {} malformed items", doc.doc_id, parsed.rejected);
                }
                report.rejected += parsed.rejected;
                triples.extend(parsed.triples);
            }
        }
        ExtractionMethod::PairWise => {
            let mut requests = Vec::new();
            let mut owners = Vec::new();
            for doc in docs {
                let e = enumerate_pairs(doc, &ctx.types, &ctx.relations, ctx.options);
                report.pairs_excluded += e.excluded;
                if e.pairs.is_empty() {
                    report.documents_skipped += 1;
                }
                for pair in e.pairs {
                    requests.push(build_pairwise_prompt(&pair, doc, ctx.prompting, ctx.options)?);
                    owners.push((doc, pair));
                }
            }
            report.requests = requests.len();
            let responses = ctx.gateway.complete_batch(&requests)?;
            for ((doc, pair), text) in owners.into_iter().zip(responses) {
                match parse_pairwise_output(&text, &pair, doc) {
                    PairwiseOutcome::Relation { triple, generated } => {
                        report.generated_relations += generated as usize;
                        triples.push(triple);
                    }
                    PairwiseOutcome::NoRelation => report.no_relation += 1,
                    PairwiseOutcome::Unparseable => report.unparseable += 1,
                }
            }
        }
    }

    report.raw_candidates = triples.len();
    let graph = KnowledgeGraph::from_triples(triples);
    report.triples_kept = graph.triples().len();
    Ok((graph, report))
}
