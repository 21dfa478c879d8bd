//! Knowledge-graph augmented multiple-choice QA over biomedical literature.
//!
//! A language model extracts year-stamped triples from annotated abstracts
//! ([`corpus`], [`construct`]) into a [`graph::KnowledgeGraph`]. Questions are
//! answered by linking their entities into the graph ([`embed`]), sampling
//! path and neighbor evidence ([`sampler`]), letting the model rerank that
//! evidence ([`rerank`]) and prompting with what survives ([`qa`]). [`bench`](mod@bench)
//! scores runs and [`llm`] routes every model call through one replayable
//! gateway.

pub mod bench;
pub mod config;
pub mod construct;
pub mod corpus;
pub mod embed;
pub mod graph;
pub mod llm;
pub mod prompt;
pub mod qa;
pub mod rerank;
pub mod sampler;
pub mod text;

/// The guide's chapters, compiled so their examples run as doc-tests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub struct Corpus;
    #[doc = include_str!("../../../book/src/construction.md")]
    pub struct Construction;
    #[doc = include_str!("../../../book/src/graph.md")]
    pub struct Graph;
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub struct Sampling;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub struct Retrieval;
    #[doc = include_str!("../../../book/src/answering.md")]
    pub struct Answering;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/determinism.md")]
    pub struct Determinism;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
