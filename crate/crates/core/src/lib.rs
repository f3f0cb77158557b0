//! Core library for building and querying hierarchical sentence logic graphs.
//!
//! The offline side ([`builder`]) decomposes documents into sentences, asks an
//! LLM to identify core sentences and the logical relations between them,
//! attaches supplementary sentences to their nuclei, and bridges document
//! topics into a single three-layer graph ([`graph`]). The online side
//! ([`pipeline`]) selects query anchors with a lexical or dense ranker
//! ([`retrieval`]), refines them with the LLM, expands reasoning paths
//! breadth-first, and generates an answer from the collected sentence
//! evidence. [`eval`] provides EM/F1/accuracy metrics and a sampled
//! evaluation harness; [`llm`] is the provider boundary with retry, scripted
//! replay, and token accounting.

pub mod builder;
pub mod corpus;
pub mod eval;
pub mod graph;
pub mod llm;
pub mod pipeline;
pub mod relations;
pub mod retrieval;

pub use builder::{build_graph, BuildConfig, SimilarityBackend};
pub use corpus::{ingest_corpus, load_qa_dataset, segment_sentences, Document, QAItem, Sentence};
pub use eval::{run_eval, EvalReport, MetricSet};
pub use graph::{EdgeKind, GraphEdge, GraphNode, Layer, NodeId, SentenceGraph};
pub use llm::{ChatProvider, ChatRequest, ChatResponse, ScriptedProvider};
pub use pipeline::{answer_query, Answer, PipelineConfig};
pub use retrieval::{rank_nodes, LexicalIndex, Ranker, ScoredNode};

/// Version tag written into graph files and echoed by every JSON interface.
pub const FORMAT_VERSION: &str = "1";
