//! Text-corpus knowledge base and the three retrieval tools.
//!
//! A [`KnowledgeBase`] is immutable after [`KnowledgeBase::ingest`]; every
//! retrieval call borrows it and is deterministic for a fixed scorer.
//!
//! * `search_doc` scores every passage, keeps the best passage of each
//!   document as that document's snippet, ranks the snippets and returns the
//!   top one together with a [`DocSession`] holding up to `max_docs` snippets.
//! * `next_doc` walks the rest of the session.
//! * `search_psg` ranks the passages of one document and keeps the top `k`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_DOCS: usize = 10;
pub const DEFAULT_TOP_PSG: usize = 3;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("duplicate doc_id {0:?}")]
    DuplicateDoc(String),
    #[error("record {line} (doc_id {doc_id:?}) has no passages")]
    EmptyPassages { line: usize, doc_id: String },
    #[error("record {line} (doc_id {doc_id:?}) has an empty passage at position {index}")]
    EmptyPassageText {
        line: usize,
        doc_id: String,
        index: usize,
    },
    #[error("malformed record on line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("knowledge base has no documents")]
    Empty,
    #[error("unknown doc_id {0:?}")]
    UnknownDoc(String),
    #[error("unknown passage {0}")]
    UnknownPassage(PassageRef),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Identity of a passage: `(doc_id, index)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PassageRef {
    pub doc_id: String,
    pub index: usize,
}

impl PassageRef {
    pub fn new(doc_id: impl Into<String>, index: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            index,
        }
    }
}

impl fmt::Display for PassageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub index: usize,
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn reference(&self) -> PassageRef {
        PassageRef::new(self.doc_id.clone(), self.index)
    }

    pub fn is(&self, r: &PassageRef) -> bool {
        self.doc_id == r.doc_id && self.index == r.index
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub passages: Vec<Passage>,
}

/// One ingestion record: one document per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: String,
    pub title: String,
    pub passages: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    documents: BTreeMap<String, Document>,
    pub metadata: BTreeMap<String, String>,
}

impl KnowledgeBase {
    /// Reads line-delimited `{"doc_id", "title", "passages": [..]}` records.
    /// Blank lines are skipped.
    pub fn ingest<R: BufRead>(reader: R) -> Result<Self, KbError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocRecord =
                serde_json::from_str(&line).map_err(|source| KbError::Malformed {
                    line: i + 1,
                    source,
                })?;
            records.push((i + 1, rec));
        }
        Self::from_numbered_records(records)
    }

    pub fn from_records(records: impl IntoIterator<Item = DocRecord>) -> Result<Self, KbError> {
        Self::from_numbered_records(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)))
    }

    fn from_numbered_records(
        records: impl IntoIterator<Item = (usize, DocRecord)>,
    ) -> Result<Self, KbError> {
        let mut documents = BTreeMap::new();
        for (line, rec) in records {
            if documents.contains_key(&rec.doc_id) {
                return Err(KbError::DuplicateDoc(rec.doc_id));
            }
            if rec.passages.is_empty() {
                return Err(KbError::EmptyPassages {
                    line,
                    doc_id: rec.doc_id,
                });
            }
            let mut passages = Vec::with_capacity(rec.passages.len());
            for (index, text) in rec.passages.into_iter().enumerate() {
                if text.trim().is_empty() {
                    return Err(KbError::EmptyPassageText {
                        line,
                        doc_id: rec.doc_id,
                        index,
                    });
                }
                passages.push(Passage {
                    doc_id: rec.doc_id.clone(),
                    index,
                    title: rec.title.clone(),
                    text,
                });
            }
            documents.insert(
                rec.doc_id.clone(),
                Document {
                    doc_id: rec.doc_id,
                    title: rec.title,
                    passages,
                },
            );
        }
        if documents.is_empty() {
            return Err(KbError::Empty);
        }
        Ok(Self {
            documents,
            metadata: BTreeMap::new(),
        })
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn passage(&self, r: &PassageRef) -> Option<&Passage> {
        self.documents.get(&r.doc_id)?.passages.get(r.index)
    }

    pub fn resolve(&self, r: &PassageRef) -> Result<&Passage, KbError> {
        self.passage(r)
            .ok_or_else(|| KbError::UnknownPassage(r.clone()))
    }

    pub fn passages(&self) -> impl Iterator<Item = &Passage> {
        self.documents.values().flat_map(|d| d.passages.iter())
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn num_passages(&self) -> usize {
        self.documents.values().map(|d| d.passages.len()).sum()
    }

    /// Back to ingestion records, in doc_id order.
    pub fn to_records(&self) -> Vec<DocRecord> {
        self.documents
            .values()
            .map(|d| DocRecord {
                doc_id: d.doc_id.clone(),
                title: d.title.clone(),
                passages: d.passages.iter().map(|p| p.text.clone()).collect(),
            })
            .collect()
    }
}

/// Relevance of a passage to a query. Must be deterministic and non-negative.
pub trait Scorer: Send + Sync {
    fn score(&self, query: &str, passage: &Passage) -> f64;
}

/// Case-folded, punctuation-stripped token sets.
pub fn token_set(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// `|query ∩ passage| / |query|` over normalized token sets; 0 for a query
/// without tokens. The passage title is not part of the scored text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl Scorer for LexicalScorer {
    fn score(&self, query: &str, passage: &Passage) -> f64 {
        let q = token_set(query);
        if q.is_empty() {
            return 0.0;
        }
        let p = token_set(&passage.text);
        q.intersection(&p).count() as f64 / q.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage: Passage,
    pub score: f64,
}

/// Higher score first, then smaller doc_id, then smaller passage index.
fn rank_order(a: &ScoredPassage, b: &ScoredPassage) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.passage.doc_id.cmp(&b.passage.doc_id))
        .then_with(|| a.passage.index.cmp(&b.passage.index))
}

/// Ranked snippets for one sub-query plus a consumed-count cursor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocSession {
    pub query: String,
    pub ranked: Vec<ScoredPassage>,
    pub cursor: usize,
}

impl DocSession {
    /// Returns `ranked[cursor]` and advances; `None` once exhausted.
    pub fn next_doc(&mut self) -> Option<Passage> {
        let p = self.ranked.get(self.cursor)?.passage.clone();
        self.cursor += 1;
        Some(p)
    }

    pub fn remaining(&self) -> usize {
        self.ranked.len() - self.cursor
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|s| s.passage.doc_id.as_str())
    }
}

/// The retrieval tools bound to a scorer and the configured budgets.
#[derive(Clone)]
pub struct Retriever {
    scorer: Arc<dyn Scorer>,
    pub max_docs: usize,
    pub top_psg: usize,
}

impl fmt::Debug for Retriever {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Retriever")
            .field("max_docs", &self.max_docs)
            .field("top_psg", &self.top_psg)
            .finish_non_exhaustive()
    }
}

impl Default for Retriever {
    fn default() -> Self {
        Self::lexical(DEFAULT_MAX_DOCS, DEFAULT_TOP_PSG)
    }
}

impl Retriever {
    pub fn new(scorer: Arc<dyn Scorer>, max_docs: usize, top_psg: usize) -> Self {
        Self {
            scorer,
            max_docs: max_docs.max(1),
            top_psg: top_psg.max(1),
        }
    }

    pub fn lexical(max_docs: usize, top_psg: usize) -> Self {
        Self::new(Arc::new(LexicalScorer), max_docs, top_psg)
    }

    pub fn score(&self, query: &str, passage: &Passage) -> f64 {
        self.scorer.score(query, passage)
    }

    /// Best passage per document, ranked, truncated to `max_docs`. The first
    /// snippet is returned and the session cursor starts at 1.
    pub fn search_doc(&self, kb: &KnowledgeBase, query: &str) -> (DocSession, Passage) {
        let mut best: Vec<ScoredPassage> = kb
            .documents()
            .map(|doc| {
                doc.passages
                    .iter()
                    .map(|p| ScoredPassage {
                        score: self.scorer.score(query, p),
                        passage: p.clone(),
                    })
                    .min_by(rank_order)
                    .expect("documents are non-empty")
            })
            .collect();
        best.sort_by(rank_order);
        best.truncate(self.max_docs);
        let top = best[0].passage.clone();
        (
            DocSession {
                query: query.to_string(),
                ranked: best,
                cursor: 1,
            },
            top,
        )
    }

    /// Top `top_psg` passages of one document, best first.
    pub fn search_psg(
        &self,
        kb: &KnowledgeBase,
        query: &str,
        doc_id: &str,
    ) -> Result<Vec<Passage>, KbError> {
        self.search_psg_k(kb, query, doc_id, self.top_psg)
    }

    pub fn search_psg_k(
        &self,
        kb: &KnowledgeBase,
        query: &str,
        doc_id: &str,
        k: usize,
    ) -> Result<Vec<Passage>, KbError> {
        let doc = kb
            .document(doc_id)
            .ok_or_else(|| KbError::UnknownDoc(doc_id.to_string()))?;
        let mut scored: Vec<ScoredPassage> = doc
            .passages
            .iter()
            .map(|p| ScoredPassage {
                score: self.scorer.score(query, p),
                passage: p.clone(),
            })
            .collect();
        scored.sort_by(rank_order);
        Ok(scored
            .into_iter()
            .take(k.max(1))
            .map(|s| s.passage)
            .collect())
    }
}
