//! Document and QA-dataset ingestion plus sentence segmentation.
//!
//! Corpus and QA files are UTF-8 JSON Lines. Segmentation is a deterministic
//! rule-based splitter: a sentence ends at terminal punctuation (`.` `!` `?`,
//! optionally followed by closing quotes/brackets) when the next
//! non-whitespace character is an uppercase letter, a digit, or an opening
//! quote, unless the token ending in `.` is a known abbreviation. Fragments
//! shorter than three characters are merged into their neighbour so the
//! graph never receives degenerate nodes.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One ingested document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

/// One sentence unit inside a document. `index` is the 0-based position;
/// `text` carries no leading or trailing whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: String,
    pub doc_id: String,
    pub index: usize,
    pub text: String,
}

/// One question with its accepted gold answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub question_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate doc_id `{doc_id}`")]
    DuplicateDocId {
        path: String,
        line: usize,
        doc_id: String,
    },
}

/// Tokens that end in `.` without ending a sentence.
const ABBREVIATIONS: [&str; 11] = [
    "Dr.", "Mr.", "Mrs.", "Ms.", "St.", "vs.", "e.g.", "i.e.", "etc.", "U.S.", "No.",
];

/// Minimum sentence length in characters; shorter fragments are merged.
const MIN_SENTENCE_CHARS: usize = 3;

/// Read a JSONL corpus file: one object per line with `doc_id` (required),
/// `title` (optional) and `text` (required). Documents come back in file
/// order; ids must be nonempty and unique.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?;

    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                path: shown.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if doc.doc_id.is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: shown.clone(),
                line: lineno + 1,
                message: "doc_id must be nonempty".into(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId {
                path: shown,
                line: lineno + 1,
                doc_id: doc.doc_id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Read a JSONL QA file and optionally draw a seeded uniform sample without
/// replacement. When `sample_n` covers the whole file the items come back in
/// file order; otherwise the selected items keep their relative file order.
/// The PRNG is SplitMix64, so the same seed reproduces the same sample on
/// any platform.
pub fn load_qa_dataset(
    path: impl AsRef<Path>,
    sample_n: Option<usize>,
    seed: u64,
) -> Result<Vec<QAItem>, CorpusError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: shown.clone(),
        source,
    })?;

    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QAItem =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                path: shown.clone(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if item.gold_answers.is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: shown.clone(),
                line: lineno + 1,
                message: "gold_answers must be nonempty".into(),
            });
        }
        items.push(item);
    }

    match sample_n {
        Some(n) if n < items.len() => Ok(sample_without_replacement(items, n, seed)),
        _ => Ok(items),
    }
}

fn sample_without_replacement(items: Vec<QAItem>, n: usize, seed: u64) -> Vec<QAItem> {
    let mut rng = SplitMix64::new(seed);
    let mut indices: Vec<usize> = (0..items.len()).collect();
    // Partial Fisher-Yates: after i steps the first i slots hold the sample.
    for i in 0..n {
        let j = i + rng.next_below((indices.len() - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..n].to_vec();
    chosen.sort_unstable();
    let mut items: Vec<Option<QAItem>> = items.into_iter().map(Some).collect();
    chosen
        .into_iter()
        .map(|i| items[i].take().expect("index chosen once"))
        .collect()
}

/// SplitMix64: the 64-bit mixing generator from Steele et al., used for all
/// reproducible sampling. Documented here so other implementations can
/// reproduce the exact sample for a given seed.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..bound` via rejection sampling (no modulo bias).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Split a document into sentence units. Deterministic; empty text yields an
/// empty list. Joining the returned texts with single spaces preserves every
/// non-whitespace character of the input in order.
pub fn segment_sentences(doc: &Document) -> Vec<Sentence> {
    segments_of(&doc.text)
        .into_iter()
        .enumerate()
        .map(|(index, seg)| Sentence {
            sent_id: format!("s:{}:{}", doc.doc_id, index),
            doc_id: doc.doc_id.clone(),
            index,
            text: seg.text,
        })
        .collect()
}

/// Indices of the sentences that open each paragraph (paragraphs are
/// separated by blank lines). Always contains 0 when the document has any
/// sentence. Used as the core-selection fallback when the LLM response is
/// unusable.
pub fn paragraph_first_indices(doc: &Document) -> Vec<usize> {
    let segments = segments_of(&doc.text);
    if segments.is_empty() {
        return Vec::new();
    }
    let para_starts = paragraph_start_offsets(&doc.text);
    let mut firsts = Vec::new();
    let mut last_para = usize::MAX;
    for (i, seg) in segments.iter().enumerate() {
        // Paragraph index = number of paragraph starts at or before this offset.
        let para = para_starts.partition_point(|&p| p <= seg.start);
        if para != last_para {
            firsts.push(i);
            last_para = para;
        }
    }
    firsts
}

struct Segment {
    start: usize,
    text: String,
}

fn segments_of(text: &str) -> Vec<Segment> {
    let raw = raw_split(text);
    merge_short(raw)
}

/// Byte offsets where a new paragraph begins: the first non-whitespace
/// character, and each non-whitespace character following a whitespace run
/// that contains at least two newlines.
fn paragraph_start_offsets(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut newlines = 0usize;
    let mut in_ws = true;
    for (off, c) in text.char_indices() {
        if c.is_whitespace() {
            if !in_ws {
                in_ws = true;
                newlines = 0;
            }
            if c == '\n' {
                newlines += 1;
            }
        } else {
            if in_ws && (starts.is_empty() || newlines >= 2) {
                starts.push(off);
            }
            in_ws = false;
        }
    }
    starts
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201d}' | '\u{2019}' | ')' | ']')
}

fn is_sentence_start(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

fn is_abbreviation(chars: &[(usize, char)], dot: usize) -> bool {
    let mut s = dot;
    while s > 0 && !chars[s - 1].1.is_whitespace() {
        s -= 1;
    }
    let token: String = chars[s..=dot].iter().map(|&(_, c)| c).collect();
    let token = token.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.contains(&token)
}

fn raw_split(text: &str) -> Vec<Segment> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut cuts = Vec::new(); // indices into `chars` where a new sentence starts
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        // Swallow the whole punctuation cluster (terminals plus closers).
        let mut j = i + 1;
        let mut cluster_has_bang = c != '.';
        while j < chars.len() && (is_terminal(chars[j].1) || is_closer(chars[j].1)) {
            cluster_has_bang |= is_terminal(chars[j].1) && chars[j].1 != '.';
            j += 1;
        }
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let splits = k > j
            && k < chars.len()
            && is_sentence_start(chars[k].1)
            && (cluster_has_bang || !is_abbreviation(&chars, i));
        if splits {
            cuts.push(k);
            i = k;
        } else {
            i = j;
        }
    }

    let mut segments = Vec::new();
    let mut begin = 0usize; // index into `chars`
    for &cut in cuts.iter().chain(std::iter::once(&chars.len())) {
        let slice_start = chars.get(begin).map(|&(b, _)| b).unwrap_or(text.len());
        let slice_end = chars.get(cut).map(|&(b, _)| b).unwrap_or(text.len());
        let piece = &text[slice_start..slice_end];
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            let lead = piece.len() - piece.trim_start().len();
            segments.push(Segment {
                start: slice_start + lead,
                text: trimmed.to_string(),
            });
        }
        begin = cut;
    }
    segments
}

fn merge_short(raw: Vec<Segment>) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut pending: Option<Segment> = None; // short fragment with no predecessor
    for seg in raw {
        let seg = match pending.take() {
            Some(p) => Segment {
                start: p.start,
                text: format!("{} {}", p.text, seg.text),
            },
            None => seg,
        };
        if seg.text.chars().count() < MIN_SENTENCE_CHARS {
            match out.last_mut() {
                Some(prev) => {
                    prev.text.push(' ');
                    prev.text.push_str(&seg.text);
                }
                None => pending = Some(seg),
            }
        } else {
            out.push(seg);
        }
    }
    if let Some(p) = pending {
        out.push(p);
    }
    out
}
