//! The hierarchical sentence logic graph: three node layers (topic, core,
//! supplementary), four edge kinds (tt, tc, cc, cs), structural validation,
//! neighbor queries, and byte-deterministic JSON persistence.
//!
//! A graph is mutable while being assembled and frozen afterwards; the online
//! stage only ever sees frozen graphs and may share them across threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::relations::{NNRelation, NSRelation};
use crate::FORMAT_VERSION;

/// Stable node identifier: `t:<doc_id>` for topics, `s:<doc_id>:<index>` for
/// sentence nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn topic(doc_id: &str) -> NodeId {
        NodeId(format!("t:{doc_id}"))
    }

    pub fn sentence(doc_id: &str, index: usize) -> NodeId {
        NodeId(format!("s:{doc_id}:{index}"))
    }

    pub fn from_string(raw: String) -> NodeId {
        NodeId(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Topic,
    Core,
    Supplementary,
}

impl Layer {
    pub fn is_sentence(self) -> bool {
        matches!(self, Layer::Core | Layer::Supplementary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Tt,
    Tc,
    Cc,
    Cs,
}

/// The label carried by an edge: a nucleus-nucleus relation on cc edges, a
/// nucleus-satellite relation on cs edges, a free-text commonsense bridge on
/// tt edges. tc edges carry no label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EdgeRelation {
    Nn(NNRelation),
    Ns(NSRelation),
    Bridge(String),
}

impl EdgeRelation {
    pub fn as_text(&self) -> &str {
        match self {
            EdgeRelation::Nn(r) => r.as_str(),
            EdgeRelation::Ns(r) => r.as_str(),
            EdgeRelation::Bridge(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub id: NodeId,
    pub layer: Layer,
    pub doc_id: String,
    /// Topic summary for topic nodes, sentence text otherwise.
    pub text: String,
    /// Present exactly when the node is a sentence node.
    pub sent_index: Option<usize>,
    /// Nonempty only on topic nodes.
    pub entities: Vec<String>,
}

impl GraphNode {
    pub fn topic(doc_id: &str, text: String, entities: Vec<String>) -> GraphNode {
        GraphNode {
            id: NodeId::topic(doc_id),
            layer: Layer::Topic,
            doc_id: doc_id.to_string(),
            text,
            sent_index: None,
            entities,
        }
    }

    pub fn sentence(doc_id: &str, index: usize, text: String, layer: Layer) -> GraphNode {
        GraphNode {
            id: NodeId::sentence(doc_id, index),
            layer,
            doc_id: doc_id.to_string(),
            text,
            sent_index: Some(index),
            entities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    pub relation: Option<EdgeRelation>,
    pub symmetric: bool,
}

impl GraphEdge {
    /// Cross-document topic bridge; canonical direction is the smaller id.
    pub fn tt(a: NodeId, b: NodeId, bridge: String) -> GraphEdge {
        let (src, dst) = if a <= b { (a, b) } else { (b, a) };
        GraphEdge {
            src,
            dst,
            kind: EdgeKind::Tt,
            relation: Some(EdgeRelation::Bridge(bridge)),
            symmetric: true,
        }
    }

    pub fn tc(topic: NodeId, core: NodeId) -> GraphEdge {
        GraphEdge {
            src: topic,
            dst: core,
            kind: EdgeKind::Tc,
            relation: None,
            symmetric: false,
        }
    }

    /// Core-core edge; symmetric relations canonicalize to `src < dst`.
    pub fn cc(a: NodeId, b: NodeId, relation: NNRelation) -> GraphEdge {
        let (src, dst) = if relation.is_symmetric() && a > b { (b, a) } else { (a, b) };
        GraphEdge {
            src,
            dst,
            kind: EdgeKind::Cc,
            relation: Some(EdgeRelation::Nn(relation)),
            symmetric: relation.is_symmetric(),
        }
    }

    pub fn cs(core: NodeId, satellite: NodeId, relation: NSRelation) -> GraphEdge {
        GraphEdge {
            src: core,
            dst: satellite,
            kind: EdgeKind::Cs,
            relation: Some(EdgeRelation::Ns(relation)),
            symmetric: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub config_fingerprint: String,
    pub created_unix: u64,
}

impl Default for GraphMeta {
    fn default() -> Self {
        GraphMeta {
            config_fingerprint: String::new(),
            created_unix: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("node `{0}` already exists")]
    DuplicateNode(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("graph is frozen")]
    Frozen,
    #[error("invalid node `{id}`: {message}")]
    InvalidNode { id: NodeId, message: String },
    #[error("layer violation on {kind:?} edge {src} -> {dst}: {message}")]
    LayerViolation {
        kind: EdgeKind,
        src: NodeId,
        dst: NodeId,
        message: String,
    },
    #[error("relation family mismatch on {kind:?} edge {src} -> {dst}")]
    RelationFamilyMismatch {
        kind: EdgeKind,
        src: NodeId,
        dst: NodeId,
    },
    #[error("graph fails validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("graph file version `{found}` does not match supported version `{expected}`")]
    VersionMismatch { found: String, expected: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed graph file {path}: {message}")]
    BadFile { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// A core node must have exactly one incoming tc edge.
    CoreParents { node: NodeId, count: usize },
    /// A supplementary node must have exactly one incoming cs edge.
    SupplementaryParents { node: NodeId, count: usize },
    /// Each document must contribute exactly one topic node.
    TopicCount { doc_id: String, count: usize },
    /// An edge breaks a layer or relation-family rule.
    EdgeRule { src: NodeId, dst: NodeId, message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CoreParents { node, count } => {
                write!(f, "core node {node} has {count} incoming tc edges (want 1)")
            }
            Violation::SupplementaryParents { node, count } => {
                write!(f, "supplementary node {node} has {count} incoming cs edges (want 1)")
            }
            Violation::TopicCount { doc_id, count } => {
                write!(f, "document {doc_id} has {count} topic nodes (want 1)")
            }
            Violation::EdgeRule { src, dst, message } => {
                write!(f, "edge {src} -> {dst}: {message}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("no violations");
        }
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}

/// Per-layer / per-kind counts, used by the build command and the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub topic_nodes: usize,
    pub core_nodes: usize,
    pub supplementary_nodes: usize,
    pub tt_edges: usize,
    pub tc_edges: usize,
    pub cc_edges: usize,
    pub cs_edges: usize,
}

#[derive(Debug)]
pub struct SentenceGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    edges: Vec<GraphEdge>,
    adjacency: HashMap<NodeId, Vec<usize>>,
    meta: GraphMeta,
    frozen: bool,
}

impl SentenceGraph {
    pub fn new(meta: GraphMeta) -> SentenceGraph {
        SentenceGraph {
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            adjacency: HashMap::new(),
            meta,
            frozen: false,
        }
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Make the graph immutable; mutating calls fail afterwards.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn node(&self, id: &NodeId) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn stats(&self) -> GraphStats {
        let mut s = GraphStats {
            topic_nodes: 0,
            core_nodes: 0,
            supplementary_nodes: 0,
            tt_edges: 0,
            tc_edges: 0,
            cc_edges: 0,
            cs_edges: 0,
        };
        for n in self.nodes.values() {
            match n.layer {
                Layer::Topic => s.topic_nodes += 1,
                Layer::Core => s.core_nodes += 1,
                Layer::Supplementary => s.supplementary_nodes += 1,
            }
        }
        for e in &self.edges {
            match e.kind {
                EdgeKind::Tt => s.tt_edges += 1,
                EdgeKind::Tc => s.tc_edges += 1,
                EdgeKind::Cc => s.cc_edges += 1,
                EdgeKind::Cs => s.cs_edges += 1,
            }
        }
        s
    }

    pub fn add_node(&mut self, node: GraphNode) -> Result<(), GraphError> {
        if self.frozen {
            return Err(GraphError::Frozen);
        }
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateNode(node.id));
        }
        if node.text.is_empty() {
            return Err(GraphError::InvalidNode {
                id: node.id,
                message: "text must be nonempty".into(),
            });
        }
        let topic = node.layer == Layer::Topic;
        if topic != node.sent_index.is_none() {
            return Err(GraphError::InvalidNode {
                id: node.id,
                message: "sent_index must be absent exactly on topic nodes".into(),
            });
        }
        if !topic && !node.entities.is_empty() {
            return Err(GraphError::InvalidNode {
                id: node.id,
                message: "entities are only allowed on topic nodes".into(),
            });
        }
        self.adjacency.insert(node.id.clone(), Vec::new());
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), GraphError> {
        if self.frozen {
            return Err(GraphError::Frozen);
        }
        let src = self
            .nodes
            .get(&edge.src)
            .ok_or_else(|| GraphError::UnknownNode(edge.src.clone()))?;
        let dst = self
            .nodes
            .get(&edge.dst)
            .ok_or_else(|| GraphError::UnknownNode(edge.dst.clone()))?;
        if edge_family_mismatch(&edge).is_some() {
            return Err(GraphError::RelationFamilyMismatch {
                kind: edge.kind,
                src: edge.src,
                dst: edge.dst,
            });
        }
        if let Some(message) = edge_layer_violation(&edge, src, dst) {
            return Err(GraphError::LayerViolation {
                kind: edge.kind,
                src: edge.src,
                dst: edge.dst,
                message,
            });
        }
        let idx = self.edges.len();
        self.adjacency.get_mut(&edge.src).expect("src exists").push(idx);
        self.adjacency.get_mut(&edge.dst).expect("dst exists").push(idx);
        self.edges.push(edge);
        Ok(())
    }

    /// Neighbors of `id` in edge insertion order, optionally restricted to
    /// the given edge kinds. Directed edges are traversable from both
    /// endpoints; the edge record keeps the stored direction.
    pub fn neighbors(
        &self,
        id: &NodeId,
        kinds: Option<&[EdgeKind]>,
    ) -> Result<Vec<(NodeId, &GraphEdge)>, GraphError> {
        let indices = self
            .adjacency
            .get(id)
            .ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let edge = &self.edges[i];
            if let Some(filter) = kinds {
                if !filter.contains(&edge.kind) {
                    continue;
                }
            }
            let other = if &edge.src == id { edge.dst.clone() } else { edge.src.clone() };
            out.push((other, edge));
        }
        Ok(out)
    }

    /// Structural validation. Violations are report entries, never errors.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();

        let mut topic_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for node in self.nodes.values() {
            if node.layer == Layer::Topic {
                *topic_counts.entry(node.doc_id.as_str()).or_insert(0) += 1;
            }
        }
        let all_docs: BTreeMap<&str, ()> =
            self.nodes.values().map(|n| (n.doc_id.as_str(), ())).collect();
        for (doc_id, ()) in &all_docs {
            let count = topic_counts.get(doc_id).copied().unwrap_or(0);
            if count != 1 {
                violations.push(Violation::TopicCount {
                    doc_id: doc_id.to_string(),
                    count,
                });
            }
        }

        let mut tc_in: HashMap<&NodeId, usize> = HashMap::new();
        let mut cs_in: HashMap<&NodeId, usize> = HashMap::new();
        for edge in &self.edges {
            match edge.kind {
                EdgeKind::Tc => *tc_in.entry(&edge.dst).or_insert(0) += 1,
                EdgeKind::Cs => *cs_in.entry(&edge.dst).or_insert(0) += 1,
                _ => {}
            }
            let (Some(src), Some(dst)) = (self.nodes.get(&edge.src), self.nodes.get(&edge.dst))
            else {
                violations.push(Violation::EdgeRule {
                    src: edge.src.clone(),
                    dst: edge.dst.clone(),
                    message: "edge endpoint missing from node set".into(),
                });
                continue;
            };
            if let Some(message) = edge_family_mismatch(edge) {
                violations.push(Violation::EdgeRule {
                    src: edge.src.clone(),
                    dst: edge.dst.clone(),
                    message,
                });
            } else if let Some(message) = edge_layer_violation(edge, src, dst) {
                violations.push(Violation::EdgeRule {
                    src: edge.src.clone(),
                    dst: edge.dst.clone(),
                    message,
                });
            }
        }

        for node in self.nodes.values() {
            match node.layer {
                Layer::Core => {
                    let count = tc_in.get(&node.id).copied().unwrap_or(0);
                    if count != 1 {
                        violations.push(Violation::CoreParents {
                            node: node.id.clone(),
                            count,
                        });
                    }
                }
                Layer::Supplementary => {
                    let count = cs_in.get(&node.id).copied().unwrap_or(0);
                    if count != 1 {
                        violations.push(Violation::SupplementaryParents {
                            node: node.id.clone(),
                            count,
                        });
                    }
                }
                Layer::Topic => {}
            }
        }

        ValidationReport { violations }
    }

    /// Serialize to the version-1 JSON format: nodes sorted by id, edges
    /// sorted by (kind, src, dst). Identical graphs produce identical bytes.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>, GraphError> {
        let report = self.validate();
        if !report.is_clean() {
            return Err(GraphError::Invalid(report));
        }
        let mut edges: Vec<&GraphEdge> = self.edges.iter().collect();
        edges.sort_by(|a, b| {
            (a.kind, &a.src, &a.dst, a.relation.as_ref().map(|r| r.as_text().to_string()))
                .cmp(&(b.kind, &b.src, &b.dst, b.relation.as_ref().map(|r| r.as_text().to_string())))
        });
        let file = GraphFile {
            version: FORMAT_VERSION.to_string(),
            meta: self.meta.clone(),
            nodes: self.nodes.values().map(SavedNode::from).collect(),
            edges: edges.into_iter().map(SavedEdge::from).collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("graph serialization");
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        let bytes = self.to_json_bytes()?;
        fs::write(path, bytes).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a version-1 graph file. The result is validated and frozen.
    pub fn load(path: impl AsRef<Path>) -> Result<SentenceGraph, GraphError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let bytes = fs::read(path).map_err(|source| GraphError::Io {
            path: shown.clone(),
            source,
        })?;
        let file: GraphFile = serde_json::from_slice(&bytes).map_err(|e| GraphError::BadFile {
            path: shown.clone(),
            message: e.to_string(),
        })?;
        if file.version != FORMAT_VERSION {
            return Err(GraphError::VersionMismatch {
                found: file.version,
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let mut graph = SentenceGraph::new(file.meta);
        for saved in file.nodes {
            graph.add_node(saved.into_node()).map_err(|e| GraphError::BadFile {
                path: shown.clone(),
                message: e.to_string(),
            })?;
        }
        for saved in file.edges {
            let edge = saved.into_edge().map_err(|message| GraphError::BadFile {
                path: shown.clone(),
                message,
            })?;
            graph.add_edge(edge).map_err(|e| GraphError::BadFile {
                path: shown.clone(),
                message: e.to_string(),
            })?;
        }
        let report = graph.validate();
        if !report.is_clean() {
            return Err(GraphError::Invalid(report));
        }
        graph.freeze();
        Ok(graph)
    }
}

/// Structural equality: same nodes, same edge multiset, same meta. The
/// frozen latch and adjacency layout are not part of graph identity.
impl PartialEq for SentenceGraph {
    fn eq(&self, other: &Self) -> bool {
        let key = |e: &GraphEdge| {
            (
                e.kind,
                e.src.clone(),
                e.dst.clone(),
                e.relation.as_ref().map(|r| r.as_text().to_string()),
                e.symmetric,
            )
        };
        let mut a: Vec<_> = self.edges.iter().map(key).collect();
        let mut b: Vec<_> = other.edges.iter().map(key).collect();
        a.sort();
        b.sort();
        self.nodes == other.nodes && a == b && self.meta == other.meta
    }
}

fn edge_family_mismatch(edge: &GraphEdge) -> Option<String> {
    let ok = match (edge.kind, &edge.relation) {
        (EdgeKind::Tt, Some(EdgeRelation::Bridge(_))) => true,
        (EdgeKind::Tc, None) => true,
        (EdgeKind::Cc, Some(EdgeRelation::Nn(_))) => true,
        (EdgeKind::Cs, Some(EdgeRelation::Ns(_))) => true,
        _ => false,
    };
    if ok {
        None
    } else {
        Some(format!(
            "relation {:?} does not belong to edge kind {:?}",
            edge.relation.as_ref().map(|r| r.as_text()),
            edge.kind
        ))
    }
}

fn edge_layer_violation(edge: &GraphEdge, src: &GraphNode, dst: &GraphNode) -> Option<String> {
    if edge.src == edge.dst {
        return Some("self-loop".into());
    }
    let want = |cond: bool, msg: &str| if cond { None } else { Some(msg.to_string()) };
    match edge.kind {
        EdgeKind::Tt => want(
            src.layer == Layer::Topic && dst.layer == Layer::Topic,
            "tt edge must connect two topic nodes",
        )
        .or_else(|| want(src.doc_id != dst.doc_id, "tt edge must cross documents"))
        .or_else(|| want(edge.symmetric, "tt edge must be symmetric")),
        EdgeKind::Tc => want(
            src.layer == Layer::Topic && dst.layer == Layer::Core,
            "tc edge must run topic -> core",
        )
        .or_else(|| want(src.doc_id == dst.doc_id, "tc edge must stay inside one document"))
        .or_else(|| want(!edge.symmetric, "tc edge is directed")),
        EdgeKind::Cc => want(
            src.layer == Layer::Core && dst.layer == Layer::Core,
            "cc edge must connect two core nodes",
        )
        .or_else(|| want(src.doc_id == dst.doc_id, "cc edge must stay inside one document"))
        .or_else(|| {
            let sym = matches!(&edge.relation, Some(EdgeRelation::Nn(r)) if r.is_symmetric());
            want(edge.symmetric == sym, "cc edge symmetry must match its relation")
        }),
        EdgeKind::Cs => want(
            src.layer == Layer::Core && dst.layer == Layer::Supplementary,
            "cs edge must run core -> supplementary",
        )
        .or_else(|| want(src.doc_id == dst.doc_id, "cs edge must stay inside one document"))
        .or_else(|| want(!edge.symmetric, "cs edge is directed")),
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: String,
    meta: GraphMeta,
    nodes: Vec<SavedNode>,
    edges: Vec<SavedEdge>,
}

#[derive(Serialize, Deserialize)]
struct SavedNode {
    id: NodeId,
    layer: Layer,
    doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sent_index: Option<usize>,
    text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entities: Vec<String>,
}

impl From<&GraphNode> for SavedNode {
    fn from(n: &GraphNode) -> SavedNode {
        SavedNode {
            id: n.id.clone(),
            layer: n.layer,
            doc_id: n.doc_id.clone(),
            sent_index: n.sent_index,
            text: n.text.clone(),
            entities: n.entities.clone(),
        }
    }
}

impl SavedNode {
    fn into_node(self) -> GraphNode {
        GraphNode {
            id: self.id,
            layer: self.layer,
            doc_id: self.doc_id,
            text: self.text,
            sent_index: self.sent_index,
            entities: self.entities,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SavedEdge {
    src: NodeId,
    dst: NodeId,
    kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation: Option<String>,
    symmetric: bool,
}

impl From<&GraphEdge> for SavedEdge {
    fn from(e: &GraphEdge) -> SavedEdge {
        SavedEdge {
            src: e.src.clone(),
            dst: e.dst.clone(),
            kind: e.kind,
            relation: e.relation.as_ref().map(|r| r.as_text().to_string()),
            symmetric: e.symmetric,
        }
    }
}

impl SavedEdge {
    fn into_edge(self) -> Result<GraphEdge, String> {
        let relation = match (self.kind, self.relation) {
            (EdgeKind::Tc, None) => None,
            (EdgeKind::Tt, Some(text)) => Some(EdgeRelation::Bridge(text)),
            (EdgeKind::Cc, Some(text)) => Some(EdgeRelation::Nn(
                text.parse().map_err(|e: crate::relations::UnknownLabel| e.to_string())?,
            )),
            (EdgeKind::Cs, Some(text)) => Some(EdgeRelation::Ns(
                text.parse().map_err(|e: crate::relations::UnknownLabel| e.to_string())?,
            )),
            (kind, relation) => {
                return Err(format!("edge kind {kind:?} cannot carry relation {relation:?}"))
            }
        };
        Ok(GraphEdge {
            src: self.src,
            dst: self.dst,
            kind: self.kind,
            relation,
            symmetric: self.symmetric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> SentenceGraph {
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("a", "Doc A".into(), vec!["alpha".into()])).unwrap();
        g.add_node(GraphNode::sentence("a", 0, "A core fact.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 1, "More core.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 2, "A detail.".into(), Layer::Supplementary)).unwrap();
        g.add_node(GraphNode::topic("b", "Doc B".into(), vec!["beta".into()])).unwrap();
        g.add_node(GraphNode::sentence("b", 0, "B core fact.".into(), Layer::Core)).unwrap();

        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 0))).unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 1))).unwrap();
        g.add_edge(GraphEdge::cc(
            NodeId::sentence("a", 1),
            NodeId::sentence("a", 0),
            NNRelation::Contrast,
        ))
        .unwrap();
        g.add_edge(GraphEdge::cs(
            NodeId::sentence("a", 0),
            NodeId::sentence("a", 2),
            NSRelation::Elaboration,
        ))
        .unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("b"), NodeId::sentence("b", 0))).unwrap();
        g.add_edge(GraphEdge::tt(NodeId::topic("b"), NodeId::topic("a"), "relates to".into()))
            .unwrap();
        g
    }

    #[test]
    fn toy_graph_validates_clean() {
        assert!(toy_graph().validate().is_clean());
    }

    #[test]
    fn add_node_rejects_duplicates_and_frozen() {
        let mut g = toy_graph();
        let err = g.add_node(GraphNode::topic("a", "again".into(), vec![])).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateNode(_)));
        g.freeze();
        let err = g.add_node(GraphNode::topic("c", "new".into(), vec![])).unwrap_err();
        assert!(matches!(err, GraphError::Frozen));
    }

    #[test]
    fn cc_across_documents_is_layer_violation() {
        let mut g = toy_graph();
        let err = g
            .add_edge(GraphEdge::cc(
                NodeId::sentence("a", 0),
                NodeId::sentence("b", 0),
                NNRelation::Conjunction,
            ))
            .unwrap_err();
        assert!(matches!(err, GraphError::LayerViolation { .. }));
    }

    #[test]
    fn cs_with_nn_label_is_family_mismatch() {
        let mut g = toy_graph();
        let err = g
            .add_edge(GraphEdge {
                src: NodeId::sentence("a", 0),
                dst: NodeId::sentence("a", 2),
                kind: EdgeKind::Cs,
                relation: Some(EdgeRelation::Nn(NNRelation::Conjunction)),
                symmetric: false,
            })
            .unwrap_err();
        assert!(matches!(err, GraphError::RelationFamilyMismatch { .. }));
    }

    #[test]
    fn missing_endpoint_is_rejected() {
        let mut g = toy_graph();
        let err = g
            .add_edge(GraphEdge::tc(NodeId::topic("zzz"), NodeId::sentence("a", 0)))
            .unwrap_err();
        assert!(matches!(err, GraphError::UnknownNode(_)));
    }

    #[test]
    fn neighbors_sees_symmetric_and_reverse_directed_edges() {
        let g = toy_graph();
        let ta = NodeId::topic("a");
        let tb = NodeId::topic("b");
        // tt edge visible from both endpoints.
        assert!(g.neighbors(&ta, Some(&[EdgeKind::Tt])).unwrap().iter().any(|(n, _)| n == &tb));
        assert!(g.neighbors(&tb, Some(&[EdgeKind::Tt])).unwrap().iter().any(|(n, _)| n == &ta));
        // directed tc edge traversable upwards from the core node.
        let up = g.neighbors(&NodeId::sentence("a", 0), Some(&[EdgeKind::Tc])).unwrap();
        assert!(up.iter().any(|(n, _)| n == &ta));
        // filter works.
        assert_eq!(g.neighbors(&ta, Some(&[EdgeKind::Tc])).unwrap().len(), 2);
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("x", "Lonely".into(), vec![])).unwrap();
        assert!(g.neighbors(&NodeId::topic("x"), None).unwrap().is_empty());
        assert!(g.neighbors(&NodeId::topic("nope"), None).is_err());
    }

    #[test]
    fn validate_reports_missing_tc_parent() {
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("a", "Doc".into(), vec![])).unwrap();
        g.add_node(GraphNode::sentence("a", 0, "Orphan core.".into(), Layer::Core)).unwrap();
        let report = g.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::CoreParents { count: 0, .. }));
    }

    #[test]
    fn validate_reports_double_cs_parent() {
        let mut g = SentenceGraph::new(GraphMeta::default());
        g.add_node(GraphNode::topic("a", "Doc".into(), vec![])).unwrap();
        g.add_node(GraphNode::sentence("a", 0, "Core one.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 1, "Core two.".into(), Layer::Core)).unwrap();
        g.add_node(GraphNode::sentence("a", 2, "Shared sat.".into(), Layer::Supplementary))
            .unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 0))).unwrap();
        g.add_edge(GraphEdge::tc(NodeId::topic("a"), NodeId::sentence("a", 1))).unwrap();
        g.add_edge(GraphEdge::cs(NodeId::sentence("a", 0), NodeId::sentence("a", 2), NSRelation::Cause))
            .unwrap();
        g.add_edge(GraphEdge::cs(NodeId::sentence("a", 1), NodeId::sentence("a", 2), NSRelation::Result))
            .unwrap();
        let report = g.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::SupplementaryParents { count: 2, .. })));
    }

    #[test]
    fn save_load_round_trip_and_byte_determinism() {
        let g = toy_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        g.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        g.save(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);

        let loaded = SentenceGraph::load(&path).unwrap();
        assert_eq!(loaded, g);
        assert!(loaded.is_frozen());
    }

    #[test]
    fn load_rejects_future_version() {
        let g = toy_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let mut bytes = g.to_json_bytes().unwrap();
        let text = String::from_utf8(std::mem::take(&mut bytes)).unwrap();
        std::fs::write(&path, text.replace("\"version\": \"1\"", "\"version\": \"99\"")).unwrap();
        let err = SentenceGraph::load(&path).unwrap_err();
        assert!(matches!(err, GraphError::VersionMismatch { .. }));
    }

    #[test]
    fn node_id_string_form_round_trips() {
        let id = NodeId::sentence("doc-7", 12);
        assert_eq!(id.as_str(), "s:doc-7:12");
        assert_eq!(NodeId::from_string(id.to_string()), id);
        assert_eq!(NodeId::topic("doc-7").as_str(), "t:doc-7");
    }

    #[test]
    fn layer_partition_counts() {
        let g = toy_graph();
        let stats = g.stats();
        assert_eq!(
            stats.topic_nodes + stats.core_nodes + stats.supplementary_nodes,
            g.node_count()
        );
        assert_eq!(stats.topic_nodes, 2);
        assert_eq!(stats.core_nodes, 3);
        assert_eq!(stats.supplementary_nodes, 1);
    }
}
