//! Query-node relevance scoring: an Okapi BM25 inverted index, cosine
//! similarity over pluggable embeddings, and top-k ranking over graph nodes.
//!
//! Both the lexical and the dense ranker sit behind [`Ranker`], so the online
//! pipeline is indifferent to which one produced the scores. Sentence nodes
//! are scored on their text; topic nodes on their summary plus entities.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{Layer, NodeId, SentenceGraph};

/// A node paired with its query-relevance score (higher is more relevant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNode {
    pub node_id: NodeId,
    pub score: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("node `{0}` is not in the index")]
    UnknownNode(NodeId),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding provider failure: {0}")]
    Embed(String),
}

/// Lowercase tokens split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Smoothed inverse document frequency: ln(1 + (N - df + 0.5) / (df + 0.5)).
/// Strictly positive for every df <= N.
pub fn idf(df: u64, n: u64) -> f64 {
    (1.0 + (n as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

/// Inverted index over node texts with the statistics BM25 needs.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    params: Bm25Params,
    ids: Vec<NodeId>,
    position: HashMap<NodeId, usize>,
    term_freqs: Vec<HashMap<String, u64>>,
    lengths: Vec<u64>,
    df: HashMap<String, u64>,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn build(items: &[(NodeId, String)], params: Bm25Params) -> LexicalIndex {
        let mut ids = Vec::with_capacity(items.len());
        let mut position = HashMap::new();
        let mut term_freqs = Vec::with_capacity(items.len());
        let mut lengths = Vec::with_capacity(items.len());
        let mut df: HashMap<String, u64> = HashMap::new();
        for (id, text) in items {
            let tokens = tokenize(text);
            lengths.push(tokens.len() as u64);
            let mut tf: HashMap<String, u64> = HashMap::new();
            for token in tokens {
                *tf.entry(token).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
            position.insert(id.clone(), term_freqs.len());
            term_freqs.push(tf);
            ids.push(id.clone());
        }
        let total: u64 = lengths.iter().sum();
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            total as f64 / lengths.len() as f64
        };
        LexicalIndex {
            params,
            ids,
            position,
            term_freqs,
            lengths,
            df,
            avg_len,
        }
    }

    pub fn node_count(&self) -> u64 {
        self.ids.len() as u64
    }

    pub fn doc_freq(&self, term: &str) -> u64 {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// Okapi BM25 score of `node_id` for `query`: per query-token occurrence,
    /// idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg_len)).
    pub fn score(&self, query: &str, node_id: &NodeId) -> Result<f64, RetrievalError> {
        let &pos = self
            .position
            .get(node_id)
            .ok_or_else(|| RetrievalError::UnknownNode(node_id.clone()))?;
        let tf_map = &self.term_freqs[pos];
        let len = self.lengths[pos] as f64;
        let n = self.node_count();
        let Bm25Params { k1, b } = self.params;
        let mut score = 0.0;
        for token in tokenize(query) {
            let tf = tf_map.get(&token).copied().unwrap_or(0);
            if tf == 0 {
                continue;
            }
            let tf = tf as f64;
            let norm = k1 * (1.0 - b + b * len / self.avg_len);
            score += idf(self.doc_freq(&token), n) * tf * (k1 + 1.0) / (tf + norm);
        }
        Ok(score)
    }
}

/// Build the lexical index over every graph node's scoring text.
pub fn build_lexical_index(graph: &SentenceGraph, params: Bm25Params) -> LexicalIndex {
    LexicalIndex::build(&scoring_items(graph), params)
}

/// (id, text) pairs used for scoring: sentence text for sentence nodes,
/// summary plus entities for topic nodes.
pub fn scoring_items(graph: &SentenceGraph) -> Vec<(NodeId, String)> {
    graph
        .nodes()
        .map(|n| {
            let text = if n.layer == Layer::Topic && !n.entities.is_empty() {
                format!("{} {}", n.text, n.entities.join(" "))
            } else {
                n.text.clone()
            };
            (n.id.clone(), text)
        })
        .collect()
}

/// The ranking contract shared by lexical and dense scorers.
pub trait Ranker: Send + Sync {
    fn score(&self, query: &str, node_id: &NodeId) -> Result<f64, RetrievalError>;

    /// All indexed node ids, in id order.
    fn node_ids(&self) -> &[NodeId];

    /// Top-k nodes for the query, descending score, ties broken by id.
    fn rank(&self, query: &str, k: usize) -> Vec<ScoredNode> {
        let mut scored: Vec<ScoredNode> = self
            .node_ids()
            .iter()
            .filter_map(|id| {
                self.score(query, id).ok().map(|score| ScoredNode {
                    node_id: id.clone(),
                    score,
                })
            })
            .collect();
        sort_and_truncate(&mut scored, k);
        scored
    }
}

fn sort_and_truncate(scored: &mut Vec<ScoredNode>, k: usize) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    scored.truncate(k);
}

/// Rank graph nodes for a query, optionally restricted to one layer.
/// Returns at most `k` results; nodes the ranker does not know are skipped.
pub fn rank_nodes(
    ranker: &dyn Ranker,
    query: &str,
    graph: &SentenceGraph,
    k: usize,
    layer_filter: Option<Layer>,
) -> Vec<ScoredNode> {
    let mut scored: Vec<ScoredNode> = graph
        .nodes()
        .filter(|n| layer_filter.map_or(true, |l| n.layer == l))
        .filter_map(|n| {
            ranker.score(query, &n.id).ok().map(|score| ScoredNode {
                node_id: n.id.clone(),
                score,
            })
        })
        .collect();
    sort_and_truncate(&mut scored, k);
    scored
}

impl Ranker for LexicalIndex {
    fn score(&self, query: &str, node_id: &NodeId) -> Result<f64, RetrievalError> {
        LexicalIndex::score(self, query, node_id)
    }

    fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Fixed per-node scores independent of the query. Used in tests and for
/// replaying recorded score tables.
#[derive(Debug, Clone, Default)]
pub struct TableRanker {
    ids: Vec<NodeId>,
    scores: HashMap<NodeId, f64>,
}

impl TableRanker {
    pub fn new(entries: Vec<(NodeId, f64)>) -> TableRanker {
        let mut ids: Vec<NodeId> = entries.iter().map(|(id, _)| id.clone()).collect();
        ids.sort();
        TableRanker {
            ids,
            scores: entries.into_iter().collect(),
        }
    }
}

impl Ranker for TableRanker {
    fn score(&self, _query: &str, node_id: &NodeId) -> Result<f64, RetrievalError> {
        self.scores
            .get(node_id)
            .copied()
            .ok_or_else(|| RetrievalError::UnknownNode(node_id.clone()))
    }

    fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Cosine similarity in [-1, 1]. Errors on dimension mismatch or a zero
/// vector.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of the two texts' term-frequency vectors, in [0, 1].
/// Zero when either side has no tokens. This is the lexical pairwise
/// similarity used by the offline stage.
pub fn lexical_cosine(a: &str, b: &str) -> f64 {
    let mut ta: HashMap<String, f64> = HashMap::new();
    for t in tokenize(a) {
        *ta.entry(t).or_insert(0.0) += 1.0;
    }
    let mut tb: HashMap<String, f64> = HashMap::new();
    for t in tokenize(b) {
        *tb.entry(t).or_insert(0.0) += 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ta
        .iter()
        .filter_map(|(t, x)| tb.get(t).map(|y| x * y))
        .sum();
    let na: f64 = ta.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = tb.values().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Batch text embedding. All vectors share one dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
    fn id(&self) -> &str;
}

/// Deterministic embedder backed by a text -> vector map, for tests.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEmbedder {
    vectors: HashMap<String, Vec<f64>>,
}

impl ScriptedEmbedder {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> ScriptedEmbedder {
        ScriptedEmbedder { vectors }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.vectors.insert(text.into(), vector);
    }
}

impl EmbeddingProvider for ScriptedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| RetrievalError::Embed(format!("no scripted vector for `{t}`")))
            })
            .collect()
    }

    fn id(&self) -> &str {
        "scripted-embedder"
    }
}

/// Live OpenAI-compatible embeddings client.
pub struct HttpEmbeddingProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    provider_id: String,
}

impl HttpEmbeddingProvider {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: std::time::Duration,
    ) -> Result<HttpEmbeddingProvider, RetrievalError> {
        let base_url = base_url.into();
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::Embed(e.to_string()))?;
        let provider_id = format!("http:{base_url}:{model}");
        Ok(HttpEmbeddingProvider {
            client,
            base_url,
            model,
            api_key,
            provider_id,
        })
    }
}

#[derive(Serialize)]
struct EmbedWireRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    data: Vec<EmbedWireItem>,
}

#[derive(Deserialize)]
struct EmbedWireItem {
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&EmbedWireRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| RetrievalError::Embed(e.to_string()))?;
        if !response.status().is_success() {
            return Err(RetrievalError::Embed(format!("status {}", response.status())));
        }
        let wire: EmbedWireResponse = response
            .json()
            .map_err(|e| RetrievalError::Embed(format!("malformed body: {e}")))?;
        let mut items = wire.data;
        items.sort_by_key(|i| i.index);
        if items.len() != texts.len() {
            return Err(RetrievalError::Embed(format!(
                "expected {} vectors, got {}",
                texts.len(),
                items.len()
            )));
        }
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }

    fn id(&self) -> &str {
        &self.provider_id
    }
}

fn text_sha256(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    provider: String,
    text_sha256: String,
    dim: usize,
    vector: Vec<f64>,
}

/// File-backed embedding cache: one JSONL record per (provider, text hash).
/// Hits never touch the provider, so reruns are cheap and tests hermetic.
pub struct CachedEmbedder<P> {
    inner: P,
    path: PathBuf,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn open(inner: P, path: impl AsRef<Path>) -> Result<CachedEmbedder<P>, RetrievalError> {
        let path = path.as_ref().to_path_buf();
        let mut cache = HashMap::new();
        if path.exists() {
            let content = fs::read_to_string(&path)
                .map_err(|e| RetrievalError::Embed(format!("cannot read cache: {e}")))?;
            for line in content.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(line)
                    .map_err(|e| RetrievalError::Embed(format!("malformed cache line: {e}")))?;
                if record.provider == inner.id() {
                    cache.insert(record.text_sha256, record.vector);
                }
            }
        }
        Ok(CachedEmbedder {
            inner,
            path,
            cache: Mutex::new(cache),
        })
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache poisoned");
            for (i, text) in texts.iter().enumerate() {
                match cache.get(&text_sha256(text)) {
                    Some(v) => out[i] = Some(v.clone()),
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let wanted: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fetched = self.inner.embed(&wanted)?;
            let mut cache = self.cache.lock().expect("cache poisoned");
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| RetrievalError::Embed(format!("cannot open cache: {e}")))?;
            for (&i, vector) in missing.iter().zip(fetched) {
                let sha = text_sha256(&texts[i]);
                let record = CacheRecord {
                    provider: self.inner.id().to_string(),
                    text_sha256: sha.clone(),
                    dim: vector.len(),
                    vector: vector.clone(),
                };
                let line = serde_json::to_string(&record)
                    .map_err(|e| RetrievalError::Embed(e.to_string()))?;
                writeln!(file, "{line}")
                    .map_err(|e| RetrievalError::Embed(format!("cannot write cache: {e}")))?;
                cache.insert(sha, vector.clone());
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Dense ranker: node vectors are embedded once at construction, query
/// vectors on demand (memoized per query string).
pub struct DenseRanker {
    ids: Vec<NodeId>,
    vectors: HashMap<NodeId, Vec<f64>>,
    embedder: Box<dyn EmbeddingProvider>,
    query_cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl DenseRanker {
    pub fn build(
        items: &[(NodeId, String)],
        embedder: Box<dyn EmbeddingProvider>,
    ) -> Result<DenseRanker, RetrievalError> {
        let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        let mut ids: Vec<NodeId> = items.iter().map(|(id, _)| id.clone()).collect();
        let map: HashMap<NodeId, Vec<f64>> = items
            .iter()
            .map(|(id, _)| id.clone())
            .zip(vectors)
            .collect();
        ids.sort();
        Ok(DenseRanker {
            ids,
            vectors: map,
            embedder,
            query_cache: Mutex::new(HashMap::new()),
        })
    }

    fn query_vector(&self, query: &str) -> Result<Vec<f64>, RetrievalError> {
        if let Some(v) = self.query_cache.lock().expect("cache poisoned").get(query) {
            return Ok(v.clone());
        }
        let v = self
            .embedder
            .embed(&[query.to_string()])?
            .into_iter()
            .next()
            .ok_or_else(|| RetrievalError::Embed("empty embedding batch".into()))?;
        self.query_cache
            .lock()
            .expect("cache poisoned")
            .insert(query.to_string(), v.clone());
        Ok(v)
    }
}

impl Ranker for DenseRanker {
    fn score(&self, query: &str, node_id: &NodeId) -> Result<f64, RetrievalError> {
        let node_vec = self
            .vectors
            .get(node_id)
            .ok_or_else(|| RetrievalError::UnknownNode(node_id.clone()))?;
        let query_vec = self.query_vector(query)?;
        match cosine(&query_vec, node_vec) {
            Ok(s) => Ok(s),
            Err(RetrievalError::ZeroVector) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }
}
