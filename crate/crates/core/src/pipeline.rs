//! Online stage: anchor selection and LLM refinement, adaptive breadth-first
//! path expansion over the frozen graph, sentence-level evidence assembly,
//! and answer generation.
//!
//! Every step is deterministic given the ranker's scores and the provider's
//! responses; queries over one shared frozen graph are independent and can
//! run concurrently.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graph::{Layer, NodeId, SentenceGraph};
use crate::llm::{
    complete_with_retry, ChatProvider, ChatRequest, LlmError, RetryPolicy, UsageLedger,
};
use crate::relations::{escape_delimiters, render_template, FORMAT_REMINDER};
use crate::retrieval::{rank_nodes, Ranker, ScoredNode};
use crate::FORMAT_VERSION;

pub const REFINE_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/anchor_refine_v1.txt");
pub const ANSWER_PROMPT_TEMPLATE: &str = include_str!("../resources/prompts/answer_v1.txt");

/// How neighbors are scored during expansion: against the query (default) or
/// against the text of the path's tail node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborScoring {
    Query,
    PathTail,
}

/// Online stage configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// How many top-scoring nodes become candidate anchors.
    pub k_anchors: usize,
    /// Maximum hops per path from its anchor.
    pub max_path_len: usize,
    /// Neighbors kept per expansion step.
    pub branch_width: usize,
    /// Maximum distinct new nodes added per anchor.
    pub node_budget: usize,
    /// Cap on the final evidence sentence count.
    pub max_evidence: usize,
    /// Model name placed in chat requests.
    pub model: String,
    pub neighbor_scoring: NeighborScoring,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_anchors: 20,
            max_path_len: 2,
            branch_width: 2,
            node_budget: 10,
            max_evidence: 12,
            model: "default".into(),
            neighbor_scoring: NeighborScoring::Query,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, value) in [
            ("k_anchors", self.k_anchors),
            ("branch_width", self.branch_width),
            ("node_budget", self.node_budget),
            ("max_evidence", self.max_evidence),
        ] {
            if value == 0 {
                return Err(PipelineError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("graph must be frozen before answering queries")]
    GraphNotFrozen,
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("answer generation failed: {0}")]
    Llm(#[from] LlmError),
}

/// Result of LLM anchor refinement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    /// Subset of the candidate anchors judged relevant.
    pub kept: Vec<NodeId>,
    /// Whether the kept anchors alone suffice to answer.
    pub sufficient: bool,
}

/// An ordered node sequence grown from an anchor (the head). Consecutive
/// nodes are graph-adjacent and no node repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub nodes: Vec<NodeId>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn tail(&self) -> &NodeId {
        self.nodes.last().expect("paths are nonempty")
    }
}

/// One evidence sentence with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub node_id: NodeId,
    pub doc_id: String,
    /// Topic text of the owning document, shown in the generation prompt.
    pub doc_label: String,
    pub text: String,
}

/// Audit trail of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub anchors: Vec<ScoredNode>,
    pub refinement: RefinementOutcome,
    pub paths: Vec<Vec<NodeId>>,
    pub evidence_ids: Vec<NodeId>,
}

/// Final answer with evidence, token usage and the full trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub evidence: Vec<EvidenceItem>,
    pub usage: UsageLedger,
    pub trace: Trace,
}

#[derive(Serialize)]
struct AnswerBody<'a> {
    version: &'static str,
    answer: &'a str,
    evidence: Vec<EvidenceRef<'a>>,
    usage: &'a UsageLedger,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a Trace>,
}

#[derive(Serialize)]
struct EvidenceRef<'a> {
    node_id: &'a NodeId,
    text: &'a str,
}

/// Canonical single-line JSON form of an answer; the CLI and the HTTP
/// service both emit exactly these bytes.
pub fn answer_json(answer: &Answer, include_trace: bool) -> String {
    let body = AnswerBody {
        version: FORMAT_VERSION,
        answer: &answer.text,
        evidence: answer
            .evidence
            .iter()
            .map(|e| EvidenceRef {
                node_id: &e.node_id,
                text: &e.text,
            })
            .collect(),
        usage: &answer.usage,
        trace: include_trace.then_some(&answer.trace),
    };
    serde_json::to_string(&body).expect("answer serializes")
}

/// Top-k candidate anchors for the query, over all layers.
pub fn select_anchors(
    query: &str,
    graph: &SentenceGraph,
    ranker: &dyn Ranker,
    k: usize,
) -> Vec<ScoredNode> {
    rank_nodes(ranker, query, graph, k, None)
}

pub fn render_refine_prompt(query: &str, anchor_texts: &[String]) -> String {
    let listing = anchor_texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{i}] {}", escape_delimiters(t)))
        .collect::<Vec<_>>()
        .join("\n");
    render_template(
        REFINE_PROMPT_TEMPLATE,
        &[("question", &escape_delimiters(query)), ("anchors", &listing)],
    )
}

fn parse_refinement(text: &str, anchor_count: usize) -> Option<(Vec<usize>, bool)> {
    let mut kept: Option<Vec<usize>> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.len() >= 5 && trimmed[..5].eq_ignore_ascii_case("keep:") {
            let rest = trimmed[5..].split('/').next().unwrap_or("");
            let mut seen = BTreeSet::new();
            let mut indices = Vec::new();
            for token in rest.split(|c: char| !c.is_ascii_digit()) {
                if token.is_empty() {
                    continue;
                }
                if let Ok(idx) = token.parse::<usize>() {
                    if idx < anchor_count && seen.insert(idx) {
                        indices.push(idx);
                    }
                }
            }
            kept = Some(indices);
            break;
        }
    }
    let kept = kept?;
    let upper = text.to_ascii_uppercase();
    let sufficient = if upper.contains("INSUFFICIENT") {
        false
    } else if upper.contains("SUFFICIENT") {
        true
    } else {
        return None;
    };
    Some((kept, sufficient))
}

/// Ask the LLM to filter the candidate anchors and judge sufficiency.
/// An unusable response (after one reminder retry) fails open: all anchors
/// kept, sufficiency false, so flakiness degrades to more retrieval.
pub fn refine_anchors(
    query: &str,
    anchors: &[ScoredNode],
    graph: &SentenceGraph,
    llm: &dyn ChatProvider,
    config: &PipelineConfig,
    usage: &mut UsageLedger,
) -> RefinementOutcome {
    assert!(!anchors.is_empty(), "anchors must be nonempty");
    let texts: Vec<String> = anchors
        .iter()
        .map(|a| graph.node(&a.node_id).map(|n| n.text.clone()).unwrap_or_default())
        .collect();
    let prompt = render_refine_prompt(query, &texts);
    let policy = RetryPolicy::default();
    for attempt in 0..2 {
        let content = if attempt == 0 {
            prompt.clone()
        } else {
            format!("{prompt}{FORMAT_REMINDER}")
        };
        match complete_with_retry(llm, &ChatRequest::user(&config.model, content), &policy) {
            Ok(response) => {
                usage.record(&response);
                if let Some((indices, sufficient)) = parse_refinement(&response.text, anchors.len())
                {
                    return RefinementOutcome {
                        kept: indices.into_iter().map(|i| anchors[i].node_id.clone()).collect(),
                        sufficient,
                    };
                }
            }
            Err(err) => log::warn!("anchor refinement call failed: {err}"),
        }
    }
    RefinementOutcome {
        kept: anchors.iter().map(|a| a.node_id.clone()).collect(),
        sufficient: false,
    }
}

/// Breadth-first path expansion from each kept anchor.
///
/// Per anchor: paths grow from a FIFO queue; at each step the unvisited
/// neighbors of the path's tail are scored, the top `branch_width` extend the
/// path, and expansion stops at `max_path_len` hops or once `node_budget`
/// distinct new nodes were added for this anchor. The visited set is
/// per-anchor. Returns all maximal retained paths; ties break by node id.
pub fn expand_paths(
    query: &str,
    kept_anchors: &[NodeId],
    graph: &SentenceGraph,
    ranker: &dyn Ranker,
    config: &PipelineConfig,
) -> Vec<Path> {
    let mut retained = Vec::new();
    for anchor in kept_anchors {
        if graph.node(anchor).is_none() {
            continue;
        }
        let mut visited: HashSet<NodeId> = HashSet::from([anchor.clone()]);
        let mut added = 0usize;
        let mut queue: VecDeque<Path> = VecDeque::from([Path {
            nodes: vec![anchor.clone()],
        }]);
        while let Some(path) = queue.pop_front() {
            if path.hops() >= config.max_path_len || added >= config.node_budget {
                retained.push(path);
                continue;
            }
            let step_query: String = match config.neighbor_scoring {
                NeighborScoring::Query => query.to_string(),
                NeighborScoring::PathTail => graph
                    .node(path.tail())
                    .map(|n| n.text.clone())
                    .unwrap_or_else(|| query.to_string()),
            };
            let mut candidates: Vec<ScoredNode> = Vec::new();
            let mut seen = HashSet::new();
            for (neighbor, _edge) in graph.neighbors(path.tail(), None).expect("tail exists") {
                if visited.contains(&neighbor) || !seen.insert(neighbor.clone()) {
                    continue;
                }
                if let Ok(score) = ranker.score(&step_query, &neighbor) {
                    candidates.push(ScoredNode {
                        node_id: neighbor,
                        score,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score.total_cmp(&a.score).then_with(|| a.node_id.cmp(&b.node_id))
            });
            let take = config.branch_width.min(config.node_budget - added);
            candidates.truncate(take);
            if candidates.is_empty() {
                retained.push(path);
                continue;
            }
            for chosen in candidates {
                visited.insert(chosen.node_id.clone());
                added += 1;
                let mut nodes = path.nodes.clone();
                nodes.push(chosen.node_id);
                queue.push_back(Path { nodes });
            }
        }
    }
    retained
}

/// Shared ordering and truncation for evidence candidates: when the cap
/// triggers, the candidates with the highest anchor-score provenance
/// survive; the final order is by document position.
fn order_and_truncate(
    candidates: BTreeMap<NodeId, f64>,
    graph: &SentenceGraph,
    max_evidence: usize,
) -> Vec<EvidenceItem> {
    let mut entries: Vec<(NodeId, f64, String, usize)> = candidates
        .into_iter()
        .filter_map(|(id, provenance)| {
            let node = graph.node(&id)?;
            node.sent_index
                .map(|idx| (id, provenance, node.doc_id.clone(), idx))
        })
        .collect();
    if entries.len() > max_evidence {
        entries.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.2.cmp(&b.2))
                .then_with(|| a.3.cmp(&b.3))
        });
        entries.truncate(max_evidence);
    }
    entries.sort_by(|a, b| a.2.cmp(&b.2).then_with(|| a.3.cmp(&b.3)));
    entries
        .into_iter()
        .map(|(id, _, doc_id, _)| {
            let node = graph.node(&id).expect("filtered above");
            let doc_label = graph
                .node(&NodeId::topic(&doc_id))
                .map(|t| t.text.clone())
                .unwrap_or_else(|| doc_id.clone());
            EvidenceItem {
                node_id: id,
                doc_id,
                doc_label,
                text: node.text.clone(),
            }
        })
        .collect()
}

/// Collect the sentence nodes on the retained paths into the final evidence
/// set: topics are excluded, duplicates collapse, order is (doc_id,
/// sent_index), and the cap keeps the best anchor-score provenance.
pub fn assemble_evidence(
    paths: &[Path],
    anchor_scores: &BTreeMap<NodeId, f64>,
    graph: &SentenceGraph,
    max_evidence: usize,
) -> Vec<EvidenceItem> {
    let mut candidates: BTreeMap<NodeId, f64> = BTreeMap::new();
    for path in paths {
        let provenance = path
            .nodes
            .first()
            .and_then(|head| anchor_scores.get(head).copied())
            .unwrap_or(0.0);
        for node_id in &path.nodes {
            let Some(node) = graph.node(node_id) else { continue };
            if !node.layer.is_sentence() {
                continue;
            }
            let entry = candidates.entry(node_id.clone()).or_insert(f64::NEG_INFINITY);
            if provenance > *entry {
                *entry = provenance;
            }
        }
    }
    order_and_truncate(candidates, graph, max_evidence)
}

pub fn render_answer_prompt(query: &str, evidence: &[EvidenceItem]) -> String {
    let listing = if evidence.is_empty() {
        "(none)".to_string()
    } else {
        evidence
            .iter()
            .enumerate()
            .map(|(i, e)| {
                format!("[{}] ({}) {}", i + 1, escape_delimiters(&e.doc_label), escape_delimiters(&e.text))
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    render_template(
        ANSWER_PROMPT_TEMPLATE,
        &[("evidence", &listing), ("question", &escape_delimiters(query))],
    )
}

/// Generate the final answer from the evidence. Unlike every other LLM step
/// this one has no silent fallback: a hard provider failure is surfaced.
pub fn generate_answer(
    query: &str,
    evidence: &[EvidenceItem],
    llm: &dyn ChatProvider,
    config: &PipelineConfig,
    usage: &mut UsageLedger,
) -> Result<String, PipelineError> {
    let prompt = render_answer_prompt(query, evidence);
    let response = complete_with_retry(
        llm,
        &ChatRequest::user(&config.model, prompt),
        &RetryPolicy::default(),
    )?;
    usage.record(&response);
    Ok(response.text.trim().to_string())
}

/// The full online pipeline: select anchors, refine them, short-circuit to
/// generation when the refinement judges them sufficient, otherwise expand
/// paths and assemble evidence first.
///
/// When a kept anchor is a topic node and the verdict is sufficient, the
/// topic contributes its tc-children core sentences instead of its own text,
/// since evidence is sentence-level by construction.
pub fn answer_query(
    query: &str,
    graph: &SentenceGraph,
    ranker: &dyn Ranker,
    llm: &dyn ChatProvider,
    config: &PipelineConfig,
) -> Result<Answer, PipelineError> {
    if !graph.is_frozen() {
        return Err(PipelineError::GraphNotFrozen);
    }
    config.validate()?;
    let mut usage = UsageLedger::default();

    let anchors = select_anchors(query, graph, ranker, config.k_anchors);
    let anchor_scores: BTreeMap<NodeId, f64> =
        anchors.iter().map(|a| (a.node_id.clone(), a.score)).collect();

    let refinement = if anchors.is_empty() {
        RefinementOutcome {
            kept: Vec::new(),
            sufficient: false,
        }
    } else {
        refine_anchors(query, &anchors, graph, llm, config, &mut usage)
    };

    let (paths, evidence) = if refinement.sufficient {
        let mut candidates: BTreeMap<NodeId, f64> = BTreeMap::new();
        for kept in &refinement.kept {
            let score = anchor_scores.get(kept).copied().unwrap_or(0.0);
            let Some(node) = graph.node(kept) else { continue };
            if node.layer.is_sentence() {
                let entry = candidates.entry(kept.clone()).or_insert(f64::NEG_INFINITY);
                *entry = entry.max(score);
            } else {
                for (child, _) in graph
                    .neighbors(kept, Some(&[crate::graph::EdgeKind::Tc]))
                    .expect("kept anchor exists")
                {
                    let entry = candidates.entry(child).or_insert(f64::NEG_INFINITY);
                    *entry = entry.max(score);
                }
            }
        }
        (Vec::new(), order_and_truncate(candidates, graph, config.max_evidence))
    } else {
        let paths = expand_paths(query, &refinement.kept, graph, ranker, config);
        let evidence = assemble_evidence(&paths, &anchor_scores, graph, config.max_evidence);
        (paths, evidence)
    };

    let text = generate_answer(query, &evidence, llm, config, &mut usage)?;
    let trace = Trace {
        anchors,
        refinement,
        paths: paths.iter().map(|p| p.nodes.clone()).collect(),
        evidence_ids: evidence.iter().map(|e| e.node_id.clone()).collect(),
    };
    Ok(Answer {
        text,
        evidence,
        usage,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeKind, GraphEdge, GraphMeta, GraphNode, SentenceGraph};
    use crate::llm::{CountingProvider, ScriptedProvider};
    use crate::relations::{NNRelation, NSRelation};
    use crate::retrieval::TableRanker;

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            model: "m".into(),
            ..PipelineConfig::default()
        }
    }

    /// doc a: topic + cores 0,1 + sat 2; doc b: topic + core 0; tt bridge.
    fn toy_graph() -> SentenceGraph {
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("a", "Topic A".into(), vec!["alpha".into()])).unwrap();
        g.add_node(GraphNode::sentence("a", 0, "A core zero.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 1, "A core one.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 2, "A satellite.".into(), Layer::Supplementary))
            .unwrap();
        g.add_node(GraphNode::topic("b", "Topic B".into(), vec!["beta".into()])).unwrap();
        g.add_node(GraphNode::sentence("b", 0, "B core zero.".into(), Layer::Core)).unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 0))).unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 1))).unwrap();
        g.add_edge(GraphEdge::cc(NodeId::sentence("a", 0), NodeId::sentence("a", 1), NNRelation::Sequence))
            .unwrap();
        g.add_edge(GraphEdge::cs(NodeId::sentence("a", 0), NodeId::sentence("a", 2), NSRelation::Elaboration))
            .unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("b"), NodeId::sentence("b", 0))).unwrap();
        g.add_edge(GraphEdge::tt(NodeId::topic("a"), NodeId::topic("b"), "linked".into()))
            .unwrap();
        g.freeze();
        g
    }

    fn table(entries: &[(&NodeId, f64)]) -> TableRanker {
        TableRanker::new(entries.iter().map(|(id, s)| ((*id).clone(), *s)).collect())
    }

    fn full_table(g: &SentenceGraph, special: &[(&NodeId, f64)]) -> TableRanker {
        let mut entries: Vec<(NodeId, f64)> =
            g.nodes().map(|n| (n.id.clone(), 0.0)).collect();
        for (id, score) in special {
            if let Some(e) = entries.iter_mut().find(|(eid, _)| eid == *id) {
                e.1 = *score;
            }
        }
        TableRanker::new(entries)
    }

    #[test]
    fn select_anchors_delegates_to_ranker() {
        let g = toy_graph();
        let a0 = NodeId::sentence("a", 0);
        let ranker = full_table(&g, &[(&a0, 1.0)]);
        let anchors = select_anchors("q", &g, &ranker, 2);
        assert_eq!(anchors.len(), 2);
        assert_eq!(anchors[0].node_id, a0);
    }

    #[test]
    fn select_anchors_respects_k_and_empty_graph() {
        let mut empty = SentenceGraph::new(GraphMeta::default());
        empty.freeze();
        let ranker = TableRanker::new(vec![]);
        assert!(select_anchors("q", &empty, &ranker, 5).is_empty());

        let g = toy_graph();
        let ranker = full_table(&g, &[]);
        assert_eq!(select_anchors("q", &g, &ranker, 100).len(), g.node_count());
    }

    #[test]
    fn refinement_parses_keep_and_verdict() {
        let g = toy_graph();
        let anchors = vec![
            ScoredNode { node_id: NodeId::sentence("a", 0), score: 0.9 },
            ScoredNode { node_id: NodeId::sentence("a", 1), score: 0.8 },
            ScoredNode { node_id: NodeId::sentence("b", 0), score: 0.7 },
        ];
        let texts: Vec<String> = anchors
            .iter()
            .map(|a| g.node(&a.node_id).unwrap().text.clone())
            .collect();
        let prompt = render_refine_prompt("q", &texts);
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", &prompt, "KEEP: 0,2 / SUFFICIENT");
        let mut usage = UsageLedger::default();
        let outcome = refine_anchors("q", &anchors, &g, &provider, &cfg(), &mut usage);
        assert!(outcome.sufficient);
        assert_eq!(outcome.kept, vec![NodeId::sentence("a", 0), NodeId::sentence("b", 0)]);
        assert_eq!(usage.calls, 1);
    }

    #[test]
    fn refinement_keep_none_insufficient() {
        let g = toy_graph();
        let anchors = vec![ScoredNode { node_id: NodeId::sentence("a", 0), score: 0.9 }];
        let texts = vec![g.node(&anchors[0].node_id).unwrap().text.clone()];
        let prompt = render_refine_prompt("q", &texts);
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", &prompt, "KEEP: none / INSUFFICIENT");
        let mut usage = UsageLedger::default();
        let outcome = refine_anchors("q", &anchors, &g, &provider, &cfg(), &mut usage);
        assert!(!outcome.sufficient);
        assert!(outcome.kept.is_empty());
    }

    #[test]
    fn refinement_fails_open_after_two_bad_attempts() {
        let g = toy_graph();
        let anchors = vec![
            ScoredNode { node_id: NodeId::sentence("a", 0), score: 0.9 },
            ScoredNode { node_id: NodeId::sentence("a", 1), score: 0.8 },
        ];
        let provider = CountingProvider::new(ScriptedProvider::new());
        let mut usage = UsageLedger::default();
        let outcome = refine_anchors("q", &anchors, &g, &provider, &cfg(), &mut usage);
        assert!(!outcome.sufficient);
        assert_eq!(outcome.kept.len(), 2, "fail-open keeps all anchors");
        assert_eq!(provider.calls(), 2);
    }

    #[test]
    fn refinement_drops_out_of_range_indices() {
        assert_eq!(parse_refinement("KEEP: 0, 7\nVERDICT: SUFFICIENT", 3), Some((vec![0], true)));
        assert_eq!(parse_refinement("verdict only SUFFICIENT", 3), None);
        assert_eq!(parse_refinement("KEEP: 1\nno verdict", 3), None);
    }

    #[test]
    fn expansion_with_zero_hops_returns_singletons() {
        let g = toy_graph();
        let ranker = full_table(&g, &[]);
        let config = PipelineConfig { max_path_len: 0, ..cfg() };
        let anchors = vec![NodeId::topic("a"), NodeId::sentence("b", 0)];
        let paths = expand_paths("q", &anchors, &g, &ranker, &config);
        assert_eq!(paths.len(), 2);
        assert!(paths.iter().all(|p| p.nodes.len() == 1));
    }

    #[test]
    fn star_expansion_keeps_top_branch_width_neighbors() {
        // Anchor t:a has neighbors c(a,0), c(a,1), t:b scored 0.9/0.5/0.1.
        let g = toy_graph();
        let ranker = full_table(
            &g,
            &[
                (&NodeId::sentence("a", 0), 0.9),
                (&NodeId::sentence("a", 1), 0.5),
                (&NodeId::topic("b"), 0.1),
            ],
        );
        let config = PipelineConfig { max_path_len: 1, branch_width: 2, ..cfg() };
        let paths = expand_paths("q", &[NodeId::topic("a")], &g, &ranker, &config);
        assert_eq!(paths.len(), 2);
        let tails: Vec<&NodeId> = paths.iter().map(|p| p.tail()).collect();
        assert!(tails.contains(&&NodeId::sentence("a", 0)));
        assert!(tails.contains(&&NodeId::sentence("a", 1)));
    }

    #[test]
    fn chain_expansion_follows_monotone_scores() {
        // Chain t:a - c(a,0) - c(a,1); anchor c(a,0), L=2, b=1, scores rising
        // toward c(a,1).
        let g = toy_graph();
        let ranker = full_table(
            &g,
            &[
                (&NodeId::sentence("a", 1), 0.9),
                (&NodeId::topic("a"), 0.2),
                (&NodeId::sentence("a", 2), 0.1),
            ],
        );
        let config = PipelineConfig { max_path_len: 2, branch_width: 1, ..cfg() };
        let paths = expand_paths("q", &[NodeId::sentence("a", 0)], &g, &ranker, &config);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].nodes[..2], [NodeId::sentence("a", 0), NodeId::sentence("a", 1)]);
    }

    #[test]
    fn expansion_respects_node_budget() {
        let g = toy_graph();
        let ranker = full_table(&g, &[]);
        let config = PipelineConfig { max_path_len: 3, branch_width: 3, node_budget: 2, ..cfg() };
        let paths = expand_paths("q", &[NodeId::topic("a")], &g, &ranker, &config);
        let mut distinct: BTreeSet<&NodeId> = BTreeSet::new();
        for p in &paths {
            for n in &p.nodes[1..] {
                distinct.insert(n);
            }
        }
        assert!(distinct.len() <= 2);
    }

    #[test]
    fn paths_are_graph_adjacent_and_acyclic() {
        let g = toy_graph();
        let ranker = full_table(&g, &[(&NodeId::sentence("a", 1), 0.6), (&NodeId::topic("b"), 0.5)]);
        let config = PipelineConfig { max_path_len: 3, branch_width: 2, ..cfg() };
        for anchor in [NodeId::topic("a"), NodeId::sentence("a", 0)] {
            for path in expand_paths("q", &[anchor], &g, &ranker, &config) {
                for pair in path.nodes.windows(2) {
                    let neighbors = g.neighbors(&pair[0], None).unwrap();
                    assert!(neighbors.iter().any(|(n, _)| n == &pair[1]));
                }
                let unique: BTreeSet<&NodeId> = path.nodes.iter().collect();
                assert_eq!(unique.len(), path.nodes.len());
                assert!(path.hops() <= config.max_path_len);
            }
        }
    }

    #[test]
    fn evidence_excludes_topics_and_dedupes() {
        let g = toy_graph();
        let paths = vec![
            Path { nodes: vec![NodeId::topic("a"), NodeId::sentence("a", 0)] },
            Path { nodes: vec![NodeId::sentence("a", 1), NodeId::sentence("a", 0)] },
        ];
        let scores = BTreeMap::from([(NodeId::topic("a"), 0.9), (NodeId::sentence("a", 1), 0.5)]);
        let evidence = assemble_evidence(&paths, &scores, &g, 12);
        let ids: Vec<&str> = evidence.iter().map(|e| e.node_id.as_str()).collect();
        assert_eq!(ids, ["s:a:0", "s:a:1"], "no topic, no duplicate, document order");
        assert_eq!(evidence[0].doc_label, "Topic A");
    }

    #[test]
    fn evidence_truncation_keeps_best_provenance() {
        // Build one doc with 15 sentence nodes, reached from two anchors of
        // different scores; cap 12 must evict the 3 weakest-provenance nodes.
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("d", "Doc".into(), vec![])).unwrap();
        for i in 0..15 {
            g.add_node(GraphNode::sentence("d", i, format!("Sentence {i}."), Layer::Core)).unwrap();
            g.add_edge(GraphEdge::tc(NodeId::topic("d"), NodeId::sentence("d", i))).unwrap();
        }
        g.freeze();
        // Strong anchor covers sentences 0..10, weak anchor covers 10..15.
        let strong: Vec<NodeId> = (0..10).map(|i| NodeId::sentence("d", i)).collect();
        let weak: Vec<NodeId> = (10..15).map(|i| NodeId::sentence("d", i)).collect();
        let paths = vec![
            Path { nodes: strong.clone() },
            Path { nodes: weak.clone() },
        ];
        let scores = BTreeMap::from([(strong[0].clone(), 0.9), (weak[0].clone(), 0.2)]);
        let evidence = assemble_evidence(&paths, &scores, &g, 12);
        assert_eq!(evidence.len(), 12);
        // All ten strong nodes survive; only two of the five weak ones fit.
        for id in &strong {
            assert!(evidence.iter().any(|e| &e.node_id == id));
        }
        let weak_kept = evidence.iter().filter(|e| weak.contains(&e.node_id)).count();
        assert_eq!(weak_kept, 2);
        // Final order is by document position.
        let indices: Vec<usize> =
            evidence.iter().map(|e| e.node_id.as_str().rsplit(':').next().unwrap().parse().unwrap()).collect();
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        assert_eq!(indices, sorted);
    }

    #[test]
    fn generate_answer_round_trip_and_usage() {
        let g = toy_graph();
        let evidence = assemble_evidence(
            &[Path { nodes: vec![NodeId::sentence("a", 0)] }],
            &BTreeMap::new(),
            &g,
            12,
        );
        let prompt = render_answer_prompt("What is it?", &evidence);
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", &prompt, "  the answer  ");
        let mut usage = UsageLedger::default();
        let text = generate_answer("What is it?", &evidence, &provider, &cfg(), &mut usage).unwrap();
        assert_eq!(text, "the answer");
        assert_eq!(usage.calls, 1);
        assert!(usage.prompt_tokens > 0);
        assert_eq!(usage.completion_tokens, 2);
    }

    #[test]
    fn empty_evidence_prompt_still_contains_question() {
        let prompt = render_answer_prompt("Where is the cat?", &[]);
        assert!(prompt.contains("Where is the cat?"));
        assert!(prompt.contains("(none)"));
    }

    #[test]
    fn generation_failure_is_surfaced() {
        let provider = ScriptedProvider::new();
        let mut usage = UsageLedger::default();
        let err = generate_answer("q", &[], &provider, &cfg(), &mut usage).unwrap_err();
        assert!(matches!(err, PipelineError::Llm(_)));
    }

    fn scripted_sufficient_setup(g: &SentenceGraph) -> (ScriptedProvider, PipelineConfig, String) {
        let config = PipelineConfig { k_anchors: 3, ..cfg() };
        let query = "what is core zero";
        let ranker_anchor_texts: Vec<String> = {
            let ranker = full_table(g, &[(&NodeId::sentence("a", 0), 1.0), (&NodeId::sentence("a", 1), 0.9), (&NodeId::topic("a"), 0.8)]);
            select_anchors(query, g, &ranker, config.k_anchors)
                .iter()
                .map(|a| g.node(&a.node_id).unwrap().text.clone())
                .collect()
        };
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", &render_refine_prompt(query, &ranker_anchor_texts), "KEEP: 0\nVERDICT: SUFFICIENT");
        let evidence = vec![EvidenceItem {
            node_id: NodeId::sentence("a", 0),
            doc_id: "a".into(),
            doc_label: "Topic A".into(),
            text: "A core zero.".into(),
        }];
        provider.add_user("m", &render_answer_prompt(query, &evidence), "core zero");
        (provider, config, query.to_string())
    }

    #[test]
    fn sufficient_verdict_short_circuits_expansion() {
        let g = toy_graph();
        let (provider, config, query) = scripted_sufficient_setup(&g);
        let provider = CountingProvider::new(provider);
        let ranker = full_table(
            &g,
            &[(&NodeId::sentence("a", 0), 1.0), (&NodeId::sentence("a", 1), 0.9), (&NodeId::topic("a"), 0.8)],
        );
        let answer = answer_query(&query, &g, &ranker, &provider, &config).unwrap();
        assert_eq!(answer.text, "core zero");
        assert!(answer.trace.paths.is_empty(), "no expansion ran");
        assert_eq!(provider.calls(), 2, "refine + generate only");
        assert_eq!(answer.evidence.len(), 1);
    }

    #[test]
    fn sufficient_topic_anchor_contributes_tc_children() {
        let g = toy_graph();
        let config = PipelineConfig { k_anchors: 1, ..cfg() };
        let query = "topic question";
        let ranker = full_table(&g, &[(&NodeId::topic("a"), 1.0)]);
        let anchor_texts = vec![g.node(&NodeId::topic("a")).unwrap().text.clone()];
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", &render_refine_prompt(query, &anchor_texts), "KEEP: 0\nVERDICT: SUFFICIENT");
        let evidence: Vec<EvidenceItem> = ["A core zero.", "A core one."]
            .iter()
            .enumerate()
            .map(|(i, t)| EvidenceItem {
                node_id: NodeId::sentence("a", i),
                doc_id: "a".into(),
                doc_label: "Topic A".into(),
                text: t.to_string(),
            })
            .collect();
        provider.add_user("m", &render_answer_prompt(query, &evidence), "both cores");
        let answer = answer_query(query, &g, &ranker, &provider, &config).unwrap();
        assert_eq!(answer.text, "both cores");
        let ids: Vec<&str> = answer.evidence.iter().map(|e| e.node_id.as_str()).collect();
        assert_eq!(ids, ["s:a:0", "s:a:1"], "topic text itself is not evidence");
    }

    #[test]
    fn answer_query_is_deterministic_including_trace() {
        let g = toy_graph();
        let (provider, config, query) = scripted_sufficient_setup(&g);
        let ranker = full_table(
            &g,
            &[(&NodeId::sentence("a", 0), 1.0), (&NodeId::sentence("a", 1), 0.9), (&NodeId::topic("a"), 0.8)],
        );
        let a = answer_query(&query, &g, &ranker, &provider, &config).unwrap();
        let b = answer_query(&query, &g, &ranker, &provider, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(answer_json(&a, true), answer_json(&b, true));
    }

    #[test]
    fn unfrozen_graph_is_rejected() {
        let g = SentenceGraph::new(GraphMeta::default());
        let ranker = TableRanker::new(vec![]);
        let provider = ScriptedProvider::new();
        let err = answer_query("q", &g, &ranker, &provider, &cfg()).unwrap_err();
        assert!(matches!(err, PipelineError::GraphNotFrozen));
    }

    #[test]
    fn rankers_with_identical_tables_are_interchangeable() {
        struct ClosureRanker {
            ids: Vec<NodeId>,
            table: BTreeMap<NodeId, f64>,
        }
        impl Ranker for ClosureRanker {
            fn score(&self, _q: &str, id: &NodeId) -> Result<f64, crate::retrieval::RetrievalError> {
                self.table
                    .get(id)
                    .copied()
                    .ok_or_else(|| crate::retrieval::RetrievalError::UnknownNode(id.clone()))
            }
            fn node_ids(&self) -> &[NodeId] {
                &self.ids
            }
        }

        let g = toy_graph();
        let entries: Vec<(NodeId, f64)> = g
            .nodes()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), (i as f64) * 0.13 % 0.7))
            .collect();
        let table_ranker = TableRanker::new(entries.clone());
        let mut ids: Vec<NodeId> = entries.iter().map(|(id, _)| id.clone()).collect();
        ids.sort();
        let closure_ranker = ClosureRanker {
            ids,
            table: entries.into_iter().collect(),
        };
        let config = PipelineConfig { max_path_len: 2, branch_width: 2, ..cfg() };
        let anchors = vec![NodeId::topic("a")];
        let a = expand_paths("q", &anchors, &g, &table_ranker, &config);
        let b = expand_paths("q", &anchors, &g, &closure_ranker, &config);
        assert_eq!(a, b);
    }
}
