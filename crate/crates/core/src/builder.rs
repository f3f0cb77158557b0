//! Offline graph construction: per-document logic modeling (core sentence
//! identification, satellite assignment, relation labeling, topic building)
//! followed by cross-document bridging between topic nodes.
//!
//! Every LLM failure degrades through a documented fallback, so a build only
//! fails on corpus or configuration errors. With a scripted provider the
//! whole build is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{paragraph_first_indices, segment_sentences, Document, Sentence};
use crate::graph::{
    GraphEdge, GraphMeta, GraphNode, Layer, NodeId, SentenceGraph, ValidationReport,
};
use crate::llm::{complete_with_retry, ChatProvider, ChatRequest, LlmError, RetryPolicy};
use crate::relations::{
    escape_delimiters, parse_core_indices, parse_relation_response, render_nn_prompt,
    render_ns_prompt, render_template, RelationAssertion, RelationKind, RelationLabel, NSRelation,
    FORMAT_REMINDER,
};
use crate::retrieval::{cosine, lexical_cosine, EmbeddingProvider};

pub const BRIDGE_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/bridge_v1.txt");
pub const SUMMARY_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/summary_v1.txt");
pub const ENTITIES_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/entities_v1.txt");

/// Offline stage configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Blend between semantic similarity and contextual distance when
    /// assigning satellites: score = alpha * sim + (1 - alpha) / (1 + gap).
    pub alpha: f64,
    /// Topic-text similarity threshold for bridge candidate pairs.
    pub tau_bridge: f64,
    /// Cap on the fraction of a document's sentences marked core; responses
    /// marking more are truncated in model-given order.
    pub max_core_fraction: f64,
    /// Maximum in-flight LLM calls during the build.
    pub llm_concurrency: usize,
    pub seed: u64,
    /// Model name placed in chat requests.
    pub model: String,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            alpha: 0.7,
            tau_bridge: 0.5,
            max_core_fraction: 0.5,
            llm_concurrency: 4,
            seed: 0,
            model: "default".into(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), BuildError> {
        let check = |name: &str, value: f64, lo: f64, hi: f64| {
            if value.is_finite() && (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(BuildError::Config(format!(
                    "{name} must be in [{lo}, {hi}], got {value}"
                )))
            }
        };
        check("alpha", self.alpha, 0.0, 1.0)?;
        check("tau_bridge", self.tau_bridge, 0.0, 1.0)?;
        check("max_core_fraction", self.max_core_fraction, 0.0, 1.0)?;
        if self.max_core_fraction == 0.0 {
            return Err(BuildError::Config("max_core_fraction must be positive".into()));
        }
        if self.llm_concurrency == 0 {
            return Err(BuildError::Config("llm_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid build config: {0}")]
    Config(String),
    #[error("constructed graph fails validation:\n{0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Pairwise text similarity source for satellite assignment and bridge
/// candidate filtering. Lexical needs no external service; an embedding
/// backend falls back to lexical (with a warning) if it fails.
#[derive(Clone, Copy)]
pub enum SimilarityBackend<'a> {
    Lexical,
    Dense(&'a dyn EmbeddingProvider),
}

impl SimilarityBackend<'_> {
    fn tag(&self) -> &'static str {
        match self {
            SimilarityBackend::Lexical => "lexical",
            SimilarityBackend::Dense(_) => "dense",
        }
    }
}

enum SimData {
    Lexical(Vec<String>),
    Dense(Vec<Vec<f64>>),
}

impl SimData {
    fn build(texts: Vec<String>, backend: &SimilarityBackend) -> SimData {
        match backend {
            SimilarityBackend::Lexical => SimData::Lexical(texts),
            SimilarityBackend::Dense(embedder) => match embedder.embed(&texts) {
                Ok(vectors) => SimData::Dense(vectors),
                Err(err) => {
                    log::warn!("embedding failed, using lexical similarity: {err}");
                    SimData::Lexical(texts)
                }
            },
        }
    }

    fn sim(&self, a: usize, b: usize) -> f64 {
        match self {
            SimData::Lexical(texts) => lexical_cosine(&texts[a], &texts[b]),
            SimData::Dense(vectors) => cosine(&vectors[a], &vectors[b]).unwrap_or(0.0),
        }
    }
}

fn retry_policy() -> RetryPolicy {
    RetryPolicy::default()
}

/// One LLM exchange with a single parse retry: if the first response cannot
/// be used, the prompt is re-sent once with a format reminder appended.
fn ask_with_reminder<T>(
    llm: &dyn ChatProvider,
    model: &str,
    prompt: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Option<T> {
    let policy = retry_policy();
    for attempt in 0..2 {
        let content = if attempt == 0 {
            prompt.to_string()
        } else {
            format!("{prompt}{FORMAT_REMINDER}")
        };
        match complete_with_retry(llm, &ChatRequest::user(model, content), &policy) {
            Ok(response) => {
                if let Some(value) = parse(&response.text) {
                    return Some(value);
                }
            }
            Err(LlmError::BadResponse(msg)) => log::debug!("llm bad response: {msg}"),
            Err(err) => log::warn!("llm call failed: {err}"),
        }
    }
    None
}

/// Identify the core sentences of one document and the nucleus-nucleus
/// relations between them. An unusable response (after one reminder retry)
/// falls back to marking the first sentence of every paragraph core, with no
/// relations; the returned core set is never empty.
pub fn identify_core_sentences(
    sentences: &[Sentence],
    paragraph_firsts: &[usize],
    llm: &dyn ChatProvider,
    config: &BuildConfig,
) -> (BTreeSet<usize>, Vec<RelationAssertion>) {
    assert!(!sentences.is_empty(), "sentences must be nonempty");
    let valid: BTreeSet<usize> = sentences.iter().map(|s| s.index).collect();
    let prompt = render_nn_prompt(sentences).expect("nonempty sentences");

    let parsed = ask_with_reminder(llm, &config.model, &prompt, |text| {
        let cores = parse_core_indices(text, &valid).ok()?;
        if cores.is_empty() {
            return None;
        }
        let relations = parse_relation_response(text, RelationKind::Nn, &valid).unwrap_or_default();
        Some((cores, relations))
    });

    let (ordered_cores, relations) = match parsed {
        Some(v) => v,
        None => {
            let fallback: Vec<usize> = if paragraph_firsts.is_empty() {
                vec![0]
            } else {
                paragraph_firsts.to_vec()
            };
            return (fallback.into_iter().collect(), Vec::new());
        }
    };

    let cap = ((config.max_core_fraction * sentences.len() as f64).ceil() as usize)
        .clamp(1, sentences.len());
    let core: BTreeSet<usize> = ordered_cores.into_iter().take(cap).collect();
    let relations = relations
        .into_iter()
        .filter(|r| core.contains(&r.src) && core.contains(&r.dst))
        .collect();
    (core, relations)
}

/// Assign every non-core sentence to exactly one core sentence by
/// score = alpha * sim + (1 - alpha) / (1 + |gap|); ties go to the nearer
/// core, then the lower core index. Keys cover all cores, values ascend.
pub fn assign_satellites(
    core: &BTreeSet<usize>,
    sentences: &[Sentence],
    similarity: &dyn Fn(usize, usize) -> f64,
    alpha: f64,
) -> BTreeMap<usize, Vec<usize>> {
    assert!(!core.is_empty(), "core set must be nonempty");
    let mut assignment: BTreeMap<usize, Vec<usize>> =
        core.iter().map(|&c| (c, Vec::new())).collect();
    for sentence in sentences {
        let s = sentence.index;
        if core.contains(&s) {
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None; // (score, gap, core)
        for &c in core {
            let gap = s.abs_diff(c);
            let score = alpha * similarity(s, c) + (1.0 - alpha) / (1.0 + gap as f64);
            let candidate = (score, gap, c);
            best = Some(match best {
                None => candidate,
                Some(current) => {
                    let (bs, bg, bc) = current;
                    if score > bs || (score == bs && (gap < bg || (gap == bg && c < bc))) {
                        candidate
                    } else {
                        current
                    }
                }
            });
        }
        let (_, _, chosen) = best.expect("core nonempty");
        assignment.get_mut(&chosen).expect("key exists").push(s);
    }
    assignment
}

/// Label every (core, satellite) pair with a nucleus-satellite relation.
/// Pairs the model skips, and whole groups that stay unusable after the
/// reminder retry, default to elaboration; this never fails.
pub fn link_satellites(
    assignment: &BTreeMap<usize, Vec<usize>>,
    sentences: &[Sentence],
    llm: &dyn ChatProvider,
    config: &BuildConfig,
) -> Vec<RelationAssertion> {
    let by_index: BTreeMap<usize, &Sentence> = sentences.iter().map(|s| (s.index, s)).collect();
    let mut out = Vec::new();
    for (&core, satellites) in assignment {
        if satellites.is_empty() {
            continue;
        }
        let core_sentence = by_index[&core];
        let satellite_sentences: Vec<Sentence> =
            satellites.iter().map(|&s| by_index[&s].clone()).collect();
        let prompt =
            render_ns_prompt(core_sentence, &satellite_sentences).expect("nonempty satellites");
        let valid: BTreeSet<usize> =
            satellites.iter().copied().chain(std::iter::once(core)).collect();

        let parsed = ask_with_reminder(llm, &config.model, &prompt, |text| {
            parse_relation_response(text, RelationKind::Ns, &valid).ok()
        })
        .unwrap_or_default();

        let mut labels: BTreeMap<usize, NSRelation> = BTreeMap::new();
        for assertion in parsed {
            if assertion.src == core && satellites.contains(&assertion.dst) {
                if let RelationLabel::Ns(rel) = assertion.label {
                    labels.entry(assertion.dst).or_insert(rel);
                }
            }
        }
        for &satellite in satellites {
            out.push(RelationAssertion {
                src: core,
                dst: satellite,
                label: RelationLabel::Ns(
                    labels.get(&satellite).copied().unwrap_or(NSRelation::Elaboration),
                ),
            });
        }
    }
    out
}

pub(crate) fn summary_prompt(core_sentences: &[&Sentence]) -> String {
    let listing = core_sentences
        .iter()
        .map(|s| escape_delimiters(&s.text))
        .collect::<Vec<_>>()
        .join("\n");
    render_template(SUMMARY_PROMPT_TEMPLATE, &[("sentences", &listing)])
}

pub(crate) fn entities_prompt(doc: &Document, core_sentences: &[&Sentence]) -> String {
    let mut basis = String::new();
    if let Some(title) = &doc.title {
        basis.push_str(title);
    }
    for s in core_sentences {
        if !basis.is_empty() {
            basis.push(' ');
        }
        basis.push_str(&s.text);
    }
    render_template(ENTITIES_PROMPT_TEMPLATE, &[("text", &escape_delimiters(&basis))])
}

pub(crate) fn bridge_prompt(a: &GraphNode, b: &GraphNode) -> String {
    render_template(
        BRIDGE_PROMPT_TEMPLATE,
        &[
            ("topic_a", &escape_delimiters(&a.text)),
            ("entities_a", &a.entities.join(", ")),
            ("topic_b", &escape_delimiters(&b.text)),
            ("entities_b", &b.entities.join(", ")),
        ],
    )
}

fn parse_entity_list(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for piece in text.split(|c| c == ',' || c == '\n') {
        let entity = piece.trim().trim_matches('"').trim().to_lowercase();
        if entity.is_empty() {
            continue;
        }
        if seen.insert(entity.clone()) {
            out.push(entity);
        }
    }
    out
}

/// Build the topic node for one document. The topic text is the document
/// title when present, otherwise an LLM one-sentence summary of the core
/// sentences (falling back to the first core sentence). Entities are
/// LLM-extracted, lowercased and deduplicated; extraction failure leaves
/// them empty.
pub fn build_topic(
    doc: &Document,
    core_sentences: &[&Sentence],
    llm: &dyn ChatProvider,
    config: &BuildConfig,
) -> GraphNode {
    let title = doc.title.as_deref().map(str::trim).filter(|t| !t.is_empty());
    let text = match title {
        Some(t) => t.to_string(),
        None if core_sentences.is_empty() => doc.doc_id.clone(),
        None => {
            let prompt = summary_prompt(core_sentences);
            ask_with_reminder(llm, &config.model, &prompt, |text| {
                let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
                Some(line.to_string())
            })
            .unwrap_or_else(|| core_sentences[0].text.clone())
        }
    };

    let entities = if core_sentences.is_empty() && title.is_none() {
        Vec::new()
    } else {
        let prompt = entities_prompt(doc, core_sentences);
        ask_with_reminder(llm, &config.model, &prompt, |text| {
            let entities = parse_entity_list(text);
            if entities.is_empty() {
                None
            } else {
                Some(entities)
            }
        })
        .unwrap_or_default()
    };

    GraphNode::topic(&doc.doc_id, text, entities)
}

/// Bridge topic pairs across documents. Candidates share at least one entity
/// or have topic-text similarity >= tau_bridge; each candidate goes to the
/// LLM, which either names a relation (one edge) or answers NONE. A failed
/// call skips the pair.
pub fn bridge_topics(
    topics: &[GraphNode],
    similarity: &dyn Fn(usize, usize) -> f64,
    llm: &dyn ChatProvider,
    config: &BuildConfig,
) -> Vec<GraphEdge> {
    let mut edges = Vec::new();
    for i in 0..topics.len() {
        for j in i + 1..topics.len() {
            let (a, b) = (&topics[i], &topics[j]);
            let shares_entity = a.entities.iter().any(|e| b.entities.contains(e));
            if !shares_entity && similarity(i, j) < config.tau_bridge {
                continue;
            }
            let prompt = bridge_prompt(a, b);
            let relation = ask_with_reminder(llm, &config.model, &prompt, |text| {
                let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
                Some(line.trim_matches('"').trim_end_matches('.').trim().to_string())
            });
            match relation {
                Some(r) if r.eq_ignore_ascii_case("none") || r.is_empty() => {}
                Some(r) => edges.push(GraphEdge::tt(a.id.clone(), b.id.clone(), r)),
                None => log::warn!("bridge call failed for {} / {}, pair skipped", a.id, b.id),
            }
        }
    }
    edges
}

struct DocOutcome {
    topic: GraphNode,
    sentence_nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    cores: usize,
    satellites: usize,
}

fn process_document(
    doc: &Document,
    llm: &dyn ChatProvider,
    backend: &SimilarityBackend,
    config: &BuildConfig,
) -> DocOutcome {
    let sentences = segment_sentences(doc);
    if sentences.is_empty() {
        return DocOutcome {
            topic: build_topic(doc, &[], llm, config),
            sentence_nodes: Vec::new(),
            edges: Vec::new(),
            cores: 0,
            satellites: 0,
        };
    }
    let paragraph_firsts = paragraph_first_indices(doc);
    let (core, nn) = identify_core_sentences(&sentences, &paragraph_firsts, llm, config);

    let texts: Vec<String> = sentences.iter().map(|s| s.text.clone()).collect();
    let sim_data = SimData::build(texts, backend);
    let sim = |a: usize, b: usize| sim_data.sim(a, b);
    let assignment = assign_satellites(&core, &sentences, &sim, config.alpha);
    let ns = link_satellites(&assignment, &sentences, llm, config);

    let core_sentences: Vec<&Sentence> =
        sentences.iter().filter(|s| core.contains(&s.index)).collect();
    let topic = build_topic(doc, &core_sentences, llm, config);

    let doc_id = doc.doc_id.as_str();
    let mut sentence_nodes = Vec::new();
    for s in &sentences {
        let layer = if core.contains(&s.index) { Layer::Core } else { Layer::Supplementary };
        sentence_nodes.push(GraphNode::sentence(doc_id, s.index, s.text.clone(), layer));
    }

    let mut edges = Vec::new();
    for &c in &core {
        edges.push(GraphEdge::tc(topic.id.clone(), NodeId::sentence(doc_id, c)));
    }
    for r in &nn {
        if let RelationLabel::Nn(rel) = &r.label {
            edges.push(GraphEdge::cc(
                NodeId::sentence(doc_id, r.src),
                NodeId::sentence(doc_id, r.dst),
                *rel,
            ));
        }
    }
    for r in &ns {
        if let RelationLabel::Ns(rel) = &r.label {
            edges.push(GraphEdge::cs(
                NodeId::sentence(doc_id, r.src),
                NodeId::sentence(doc_id, r.dst),
                *rel,
            ));
        }
    }

    let satellites = sentences.len() - core.len();
    DocOutcome {
        topic,
        sentence_nodes,
        edges,
        cores: core.len(),
        satellites,
    }
}

fn config_fingerprint(config: &BuildConfig, provider_id: &str, backend_tag: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    hasher.update(provider_id.as_bytes());
    hasher.update(backend_tag.as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn created_unix() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Run the full offline stage over a corpus: per-document modeling with a
/// bounded worker pool, deterministic merge in doc_id order, then topic
/// bridging. The result is validated and frozen.
pub fn build_graph(
    corpus: &[Document],
    llm: &dyn ChatProvider,
    backend: SimilarityBackend<'_>,
    config: &BuildConfig,
) -> Result<SentenceGraph, BuildError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(BuildError::EmptyCorpus);
    }

    let mut docs: Vec<&Document> = corpus.iter().collect();
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let outcomes: Mutex<Vec<Option<DocOutcome>>> =
        Mutex::new((0..docs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = config.llm_concurrency.min(docs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= docs.len() {
                    break;
                }
                let outcome = process_document(docs[i], llm, &backend, config);
                outcomes.lock().expect("outcomes poisoned")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<DocOutcome> = outcomes
        .into_inner()
        .expect("outcomes poisoned")
        .into_iter()
        .map(|o| o.expect("every doc processed"))
        .collect();

    let meta = GraphMeta {
        config_fingerprint: config_fingerprint(config, llm.id(), backend.tag()),
        created_unix: created_unix(),
    };
    let mut graph = SentenceGraph::new(meta);
    let mut topics = Vec::with_capacity(outcomes.len());
    for (doc, outcome) in docs.iter().zip(outcomes) {
        log::info!(
            "built doc={} cores={} sats={}",
            doc.doc_id,
            outcome.cores,
            outcome.satellites
        );
        graph.add_node(outcome.topic.clone())?;
        for node in outcome.sentence_nodes {
            graph.add_node(node)?;
        }
        for edge in outcome.edges {
            graph.add_edge(edge)?;
        }
        topics.push(outcome.topic);
    }

    if topics.len() >= 2 {
        let topic_texts: Vec<String> = topics.iter().map(|t| t.text.clone()).collect();
        let sim_data = SimData::build(topic_texts, &backend);
        let sim = |a: usize, b: usize| sim_data.sim(a, b);
        for edge in bridge_topics(&topics, &sim, llm, config) {
            graph.add_edge(edge)?;
        }
    }

    let report = graph.validate();
    if !report.is_clean() {
        return Err(BuildError::Validation(report));
    }
    graph.freeze();
    Ok(graph)
}
