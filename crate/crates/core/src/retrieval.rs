//! Retrieval contract, an in-memory lexical index and an HTTP client for
//! external search services.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::metrics::normalize_answer;

/// Default number of documents returned per query.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// 1-based position in the result list.
    pub rank: usize,
    pub source_query: String,
}

impl Document {
    /// `Doc {rank}: {title}. {text}`, as shown to the verifier.
    pub fn render(&self) -> String {
        format!("Doc {}: {}. {}", self.rank, self.title, self.text)
    }
}

/// The documents returned for one search turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEvent {
    pub turn: usize,
    pub query: String,
    pub documents: Vec<Document>,
}

/// One corpus entry, as stored in corpus JSONL files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("empty search query")]
    EmptyQuery,
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("retrieval service unreachable: {0}")]
    ServiceUnreachable(String),
    #[error("malformed retrieval response: {0}")]
    MalformedResponse(String),
    #[error("corpus line {line}: {message}")]
    CorpusSchema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>, RetrievalError>;
}

impl<T: Retriever + ?Sized> Retriever for &T {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>, RetrievalError> {
        (**self).retrieve(query, top_k)
    }
}

impl<T: Retriever + ?Sized> Retriever for Box<T> {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>, RetrievalError> {
        (**self).retrieve(query, top_k)
    }
}

fn terms(text: &str) -> HashSet<String> {
    normalize_answer(text).tokens.into_iter().collect()
}

/// Immutable lexical index. A document scores `sum ln(1 + N/df(t))` over the
/// distinct query terms `t` it contains; documents scoring zero are not
/// returned and ties go to the smaller doc id.
#[derive(Debug, Clone)]
pub struct InMemoryIndex {
    docs: Vec<CorpusDoc>,
    doc_terms: Vec<HashSet<String>>,
    df: HashMap<String, usize>,
}

impl InMemoryIndex {
    pub fn build(docs: Vec<CorpusDoc>) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.id.as_str()) {
                return Err(RetrievalError::DuplicateDocId(d.id.clone()));
            }
        }
        let doc_terms: Vec<HashSet<String>> = docs.iter().map(|d| terms(&format!("{} {}", d.title, d.text))).collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for set in &doc_terms {
            for t in set {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        Ok(Self { docs, doc_terms, df })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[CorpusDoc] {
        &self.docs
    }

    /// Score of document `index` for `query`.
    pub fn score(&self, query: &str, index: usize) -> f64 {
        let n = self.docs.len() as f64;
        let mut query_terms: Vec<String> = terms(query).into_iter().collect();
        query_terms.sort();
        query_terms
            .iter()
            .filter(|t| self.doc_terms[index].contains(*t))
            .map(|t| (1.0 + n / self.df[t] as f64).ln())
            .sum()
    }
}

/// Builds an [`InMemoryIndex`].
pub fn index_corpus(docs: Vec<CorpusDoc>) -> Result<InMemoryIndex, RetrievalError> {
    InMemoryIndex::build(docs)
}

impl Retriever for InMemoryIndex {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>, RetrievalError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut scored: Vec<(f64, usize)> = (0..self.docs.len())
            .map(|i| (self.score(query, i), i))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.docs[a.1].id.cmp(&self.docs[b.1].id))
        });
        Ok(scored
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, (_, idx))| {
                let d = &self.docs[idx];
                Document {
                    doc_id: d.id.clone(),
                    title: d.title.clone(),
                    text: d.text.clone(),
                    rank: i + 1,
                    source_query: query.to_string(),
                }
            })
            .collect())
    }
}

/// Reads a JSONL corpus with fields `id`, `title`, `text`. Blank lines are
/// skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusDoc>, RetrievalError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CorpusDoc = serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusSchema {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Client for search services exposing `POST /retrieve` with
/// `{query, top_k}` and answering `{documents: [{id, title, text}]}`.
#[derive(Debug)]
pub struct HttpRetriever {
    url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct RetrieveRequest<'a> {
    query: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct RetrieveResponse {
    documents: Vec<CorpusDoc>,
}

impl HttpRetriever {
    /// `base` is the service root; `/retrieve` is appended.
    pub fn new(base: &str, timeout_secs: u64) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| RetrievalError::ServiceUnreachable(e.to_string()))?;
        Ok(Self {
            url: format!("{}/retrieve", base.trim_end_matches('/')),
            client,
        })
    }
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Document>, RetrievalError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let response = self
            .client
            .post(&self.url)
            .json(&RetrieveRequest { query, top_k })
            .send()
            .map_err(|e| RetrievalError::ServiceUnreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(RetrievalError::ServiceUnreachable(format!("status {status}")));
        }
        let body: RetrieveResponse = response
            .json()
            .map_err(|e| RetrievalError::MalformedResponse(e.to_string()))?;
        Ok(body
            .documents
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, d)| Document {
                doc_id: d.id,
                title: d.title,
                text: d.text,
                rank: i + 1,
                source_query: query.to_string(),
            })
            .collect())
    }
}
