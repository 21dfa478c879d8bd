//! PubTator-format annotated abstracts.
//!
//! A PubTator file is a sequence of blocks separated by blank lines:
//!
//! ```text
//! 12345|t|Title text
//! 12345|a|Abstract text
//! 12345<TAB>0<TAB>5<TAB>Title<TAB>Disease<TAB>MESH:D000001
//! ```
//!
//! Annotation offsets are character offsets (Unicode scalar values) into
//! `title + " " + abstract`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::collapse_whitespace;

pub const MIN_YEAR: i32 = 1900;
pub const MAX_YEAR: i32 = 2100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("annotation span {start}..{end} out of range in document {doc_id}")]
    OffsetOutOfRange { doc_id: String, start: usize, end: usize },
    #[error("annotation span {start}..{end} in document {doc_id} does not match its mention text")]
    MentionMismatch { doc_id: String, start: usize, end: usize },
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("no year for document {0}")]
    MissingYear(String),
    #[error("year {year} for document {doc_id} outside [{MIN_YEAR}, {MAX_YEAR}]")]
    YearOutOfRange { doc_id: String, year: i32 },
}

/// PubTator bioconcept type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    Gene,
    Chemical,
    Disease,
    Mutation,
    Species,
    CellLine,
    Other(String),
}

impl EntityType {
    pub fn as_str(&self) -> &str {
        match self {
            EntityType::Gene => "Gene",
            EntityType::Chemical => "Chemical",
            EntityType::Disease => "Disease",
            EntityType::Mutation => "Mutation",
            EntityType::Species => "Species",
            EntityType::CellLine => "CellLine",
            EntityType::Other(s) => s,
        }
    }
}

impl FromStr for EntityType {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Gene" => EntityType::Gene,
            "Chemical" => EntityType::Chemical,
            "Disease" => EntityType::Disease,
            "Mutation" => EntityType::Mutation,
            "Species" => EntityType::Species,
            "CellLine" => EntityType::CellLine,
            other => EntityType::Other(other.to_string()),
        })
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EntityType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EntityType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap_or_else(|e| match e {}))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub entity_type: EntityType,
    pub concept_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    /// Publication year; `None` until [`attach_years`] runs.
    pub year: Option<i32>,
    pub title: String,
    pub abstract_text: String,
    pub mentions: Vec<EntityMention>,
}

impl AnnotatedDocument {
    /// The text annotation offsets index into.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.abstract_text)
    }

    /// Character offset at which the abstract starts within [`full_text`](Self::full_text).
    pub fn abstract_offset(&self) -> usize {
        self.title.chars().count() + 1
    }

    pub fn abstract_mentions(&self) -> impl Iterator<Item = &EntityMention> {
        let off = self.abstract_offset();
        self.mentions.iter().filter(move |m| m.start >= off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Any defect fails the whole parse.
    #[default]
    Strict,
    /// Defective annotations and stray lines are dropped and counted.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub documents: Vec<AnnotatedDocument>,
    pub dropped_annotations: usize,
    pub skipped_lines: usize,
    pub skipped_documents: usize,
}

/// Parses in strict mode.
pub fn parse_pubtator(input: &str) -> Result<Vec<AnnotatedDocument>, CorpusError> {
    parse_pubtator_with(input, ParseMode::Strict).map(|r| r.documents)
}

pub fn parse_pubtator_with(input: &str, mode: ParseMode) -> Result<ParseReport, CorpusError> {
    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    let mut block: Vec<(usize, &str)> = Vec::new();

    let lines = input
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    for (line_no, line) in lines.chain(std::iter::once((0, ""))) {
        if !line.trim().is_empty() {
            block.push((line_no, line));
            continue;
        }
        if block.is_empty() {
            continue;
        }
        let lines = std::mem::take(&mut block);
        match parse_block(&lines, mode, &mut report)? {
            Some(doc) => {
                if !seen.insert(doc.doc_id.clone()) {
                    if mode == ParseMode::Strict {
                        return Err(CorpusError::DuplicateDocId(doc.doc_id));
                    }
                    log::warn!("dropping duplicate document {}", doc.doc_id);
                    report.skipped_documents += 1;
                    continue;
                }
                report.documents.push(doc);
            }
            None => report.skipped_documents += 1,
        }
    }
    Ok(report)
}

fn split_text_line(line: &str) -> Option<(&str, &str, &str)> {
    let mut parts = line.splitn(3, '|');
    let id = parts.next()?;
    let kind = parts.next()?;
    let text = parts.next()?;
    if id.is_empty() || id.contains('\t') || !(kind == "t" || kind == "a") {
        return None;
    }
    Some((id, kind, text))
}

fn parse_block(
    lines: &[(usize, &str)],
    mode: ParseMode,
    report: &mut ParseReport,
) -> Result<Option<AnnotatedDocument>, CorpusError> {
    let mut title: Option<(&str, &str)> = None;
    let mut abstract_text: Option<&str> = None;
    let mut annotations: Vec<(usize, &str)> = Vec::new();

    for &(line_no, line) in lines {
        match split_text_line(line) {
            Some((id, "t", text)) if title.is_none() && annotations.is_empty() => {
                title = Some((id, text));
            }
            Some((id, "a", text))
                if abstract_text.is_none() && annotations.is_empty() && title.is_some_and(|(tid, _)| tid == id) =>
            {
                abstract_text = Some(text);
            }
            Some(_) => {
                if mode == ParseMode::Strict {
                    return Err(CorpusError::MalformedLine(line_no));
                }
                report.skipped_lines += 1;
            }
            None => annotations.push((line_no, line)),
        }
    }

    let (Some((doc_id, title)), Some(abstract_text)) = (title, abstract_text) else {
        if mode == ParseMode::Strict {
            // Point at the line where the missing title or abstract belongs.
            let at = if title.is_some() { lines.get(1) } else { None }.unwrap_or(&lines[0]);
            return Err(CorpusError::MalformedLine(at.0));
        }
        report.skipped_lines += lines.len();
        return Ok(None);
    };

    let mut doc = AnnotatedDocument {
        doc_id: doc_id.to_string(),
        year: None,
        title: title.to_string(),
        abstract_text: abstract_text.to_string(),
        mentions: Vec::new(),
    };
    let text: Vec<char> = doc.full_text().chars().collect();

    for (line_no, line) in annotations {
        match parse_annotation(line_no, line, &doc.doc_id, &text) {
            Ok(m) => doc.mentions.push(m),
            Err(e) if mode == ParseMode::Lenient => {
                log::warn!("dropping annotation: {e}");
                report.dropped_annotations += 1;
            }
            Err(e) => return Err(e),
        }
    }
    doc.mentions.sort_by_key(|m| (m.start, m.end));
    Ok(Some(doc))
}

fn parse_annotation(line_no: usize, line: &str, doc_id: &str, text: &[char]) -> Result<EntityMention, CorpusError> {
    let cols: Vec<&str> = line.split('\t').collect();
    if !(cols.len() == 5 || cols.len() == 6) || cols[0] != doc_id {
        return Err(CorpusError::MalformedLine(line_no));
    }
    let start: usize = cols[1].parse().map_err(|_| CorpusError::MalformedLine(line_no))?;
    let end: usize = cols[2].parse().map_err(|_| CorpusError::MalformedLine(line_no))?;
    let out_of_range = || CorpusError::OffsetOutOfRange {
        doc_id: doc_id.to_string(),
        start,
        end,
    };
    if start >= end || end > text.len() {
        return Err(out_of_range());
    }
    let referenced: String = text[start..end].iter().collect();
    if collapse_whitespace(&referenced) != collapse_whitespace(cols[3]) {
        return Err(CorpusError::MentionMismatch {
            doc_id: doc_id.to_string(),
            start,
            end,
        });
    }
    Ok(EntityMention {
        surface: cols[3].to_string(),
        start,
        end,
        entity_type: cols[4].parse().unwrap_or_else(|e| match e {}),
        concept_id: cols.get(5).map(|s| s.to_string()),
    })
}

/// Writes documents back in PubTator format, one blank line between blocks.
pub fn serialize_pubtator(docs: &[AnnotatedDocument]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{}|t|{}\n", doc.doc_id, doc.title));
        out.push_str(&format!("{}|a|{}\n", doc.doc_id, doc.abstract_text));
        for m in &doc.mentions {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                doc.doc_id, m.start, m.end, m.surface, m.entity_type
            ));
            if let Some(id) = &m.concept_id {
                out.push('\t');
                out.push_str(id);
            }
            out.push('\n');
        }
    }
    out
}

/// Line-ending and trailing-blank-line normalization under which
/// `serialize_pubtator(parse_pubtator(x)) == normalize_pubtator(x)`.
pub fn normalize_pubtator(input: &str) -> String {
    let mut out = input.replace("\r\n", "\n");
    let trimmed = out.trim_end_matches('\n').len();
    out.truncate(trimmed);
    out.push('\n');
    out
}

/// Parses a two-column `doc_id<TAB>year` file. An optional `doc_id<TAB>year`
/// header and blank lines are skipped.
pub fn parse_year_map(input: &str) -> Result<HashMap<String, i32>, CorpusError> {
    let mut map = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line == "doc_id\tyear") {
            continue;
        }
        let (id, year) = line.split_once('\t').ok_or(CorpusError::MalformedLine(i + 1))?;
        let year: i32 = year.trim().parse().map_err(|_| CorpusError::MalformedLine(i + 1))?;
        map.insert(id.trim().to_string(), year);
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YearPolicy {
    Strict,
    Lenient { default_year: i32 },
}

/// Stamps publication years onto documents. Returns the ids that had no
/// entry in `year_map` (only non-empty under [`YearPolicy::Lenient`]).
pub fn attach_years(
    docs: &mut [AnnotatedDocument],
    year_map: &HashMap<String, i32>,
    policy: YearPolicy,
) -> Result<Vec<String>, CorpusError> {
    let mut missing = Vec::new();
    for doc in docs.iter_mut() {
        let year = match (year_map.get(&doc.doc_id), policy) {
            (Some(&y), _) => y,
            (None, YearPolicy::Strict) => return Err(CorpusError::MissingYear(doc.doc_id.clone())),
            (None, YearPolicy::Lenient { default_year }) => {
                missing.push(doc.doc_id.clone());
                default_year
            }
        };
        if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
            return Err(CorpusError::YearOutOfRange {
                doc_id: doc.doc_id.clone(),
                year,
            });
        }
        doc.year = Some(year);
    }
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let docs = parse_pubtator("1|t|T.\n1|a|A.\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].doc_id, "1");
        assert!(docs[0].mentions.is_empty());
    }

    #[test]
    fn degenerate_span() {
        let err = parse_pubtator("1|t|Tau.\n1|a|A.\n1\t3\t3\tx\tGene\n").unwrap_err();
        assert!(matches!(err, CorpusError::OffsetOutOfRange { start: 3, end: 3, .. }));
        let err = parse_pubtator("1|t|Tau.\n1|a|A.\n1\t2\t1\tx\tGene\n").unwrap_err();
        assert!(matches!(err, CorpusError::OffsetOutOfRange { .. }));
    }

    #[test]
    fn span_past_end() {
        let err = parse_pubtator("1|t|Tau.\n1|a|A.\n1\t5\t9\tA.\tGene\n").unwrap_err();
        assert!(matches!(err, CorpusError::OffsetOutOfRange { end: 9, .. }));
    }

    #[test]
    fn offsets_span_title_and_abstract() {
        let input =
            "7|t|APOE risk\n7|a|Amyloid beta in AD.\n7\t0\t4\tAPOE\tGene\t348\n7\t10\t22\tAmyloid beta\tChemical\n";
        let docs = parse_pubtator(input).unwrap();
        let m = &docs[0].mentions;
        assert_eq!(m[0].entity_type, EntityType::Gene);
        assert_eq!(m[0].concept_id.as_deref(), Some("348"));
        assert_eq!(m[1].concept_id, None);
        assert_eq!(docs[0].abstract_mentions().count(), 1);
    }

    #[test]
    fn unicode_offsets_are_characters() {
        let input = "9|t|β-amyloid\n9|a|Aβ oligomers.\n9\t10\t12\tAβ\tChemical\n";
        let docs = parse_pubtator(input).unwrap();
        assert_eq!(docs[0].mentions[0].surface, "Aβ");
    }

    #[test]
    fn unknown_type_maps_to_other() {
        let docs = parse_pubtator("1|t|Tau x.\n1|a|A.\n1\t0\t3\tTau\tProteinThing\n").unwrap();
        assert_eq!(
            docs[0].mentions[0].entity_type,
            EntityType::Other("ProteinThing".into())
        );
    }

    #[test]
    fn duplicate_doc_id() {
        let input = "1|t|T.\n1|a|A.\n\n1|t|U.\n1|a|B.\n";
        assert_eq!(
            parse_pubtator(input).unwrap_err(),
            CorpusError::DuplicateDocId("1".into())
        );
        let r = parse_pubtator_with(input, ParseMode::Lenient).unwrap();
        assert_eq!(r.documents.len(), 1);
        assert_eq!(r.skipped_documents, 1);
    }

    #[test]
    fn lenient_drops_annotation_not_document() {
        let input = "1|t|Tau.\n1|a|A.\n1\t0\t3\tTau\tGene\n1\t0\t99\tx\tGene\n1\tCID\tD1\tD2\n";
        assert!(matches!(
            parse_pubtator(input),
            Err(CorpusError::OffsetOutOfRange { .. })
        ));
        let r = parse_pubtator_with(input, ParseMode::Lenient).unwrap();
        assert_eq!(r.documents.len(), 1);
        assert_eq!(r.documents[0].mentions.len(), 1);
        assert_eq!(r.dropped_annotations, 2);
    }

    #[test]
    fn malformed_line_number() {
        let input = "1|t|T.\n1|a|A.\n\n2|t|U.\n2|x|B.\n";
        assert_eq!(parse_pubtator(input).unwrap_err(), CorpusError::MalformedLine(5));
    }

    #[test]
    fn mention_text_must_match() {
        let err = parse_pubtator("1|t|Tau.\n1|a|A.\n1\t0\t3\tApp\tGene\n").unwrap_err();
        assert!(matches!(err, CorpusError::MentionMismatch { .. }));
    }

    #[test]
    fn years() {
        let mut docs = parse_pubtator("1|t|T.\n1|a|A.\n\n2|t|T.\n2|a|A.\n").unwrap();
        let map = parse_year_map("doc_id\tyear\n1\t2015\n").unwrap();
        assert_eq!(
            attach_years(&mut docs, &HashMap::new(), YearPolicy::Strict).unwrap_err(),
            CorpusError::MissingYear("1".into())
        );
        let missing = attach_years(&mut docs, &map, YearPolicy::Lenient { default_year: 2011 }).unwrap();
        assert_eq!(docs[0].year, Some(2015));
        assert_eq!(docs[1].year, Some(2011));
        assert_eq!(missing, vec!["2".to_string()]);
    }

    #[test]
    fn year_range_checked() {
        let mut docs = parse_pubtator("1|t|T.\n1|a|A.\n").unwrap();
        let map = HashMap::from([("1".to_string(), 1850)]);
        assert!(matches!(
            attach_years(&mut docs, &map, YearPolicy::Strict),
            Err(CorpusError::YearOutOfRange { .. })
        ));
    }

    #[test]
    fn bad_year_map_row() {
        assert_eq!(
            parse_year_map("1\t2015\n2 2016\n").unwrap_err(),
            CorpusError::MalformedLine(2)
        );
    }
}
