//! Trusted passage corpus, Okapi BM25 inverted index and the ranked pool the
//! pipeline consumes batch by batch.
//!
//! Indexing tokenizes `title + text` by lowercasing and splitting on runs of
//! non-alphanumeric characters; there is no stemming or stopword removal.
//! Term weights use the non-negative IDF variant
//! `ln(1 + (N - n + 0.5) / (n + 0.5))`, so a document containing a query term
//! never scores below one that does not. Repeated query terms contribute once
//! per occurrence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::text::words;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub pid: String,
    pub title: String,
    pub text: String,
}

/// Ordered passages with a pid lookup. Pids are unique and texts non-empty.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    lookup: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::Integrity(format!("passage `{}` has empty text", p.pid)));
            }
            if lookup.insert(p.pid.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate pid `{}`", p.pid)));
            }
        }
        Ok(Self { passages, lookup })
    }

    pub fn get(&self, pid: &str) -> Option<&Passage> {
        self.lookup.get(pid).map(|&i| &self.passages[i])
    }

    /// Like [`Corpus::get`] but a missing pid is an integrity error.
    pub fn resolve(&self, pid: &str) -> Result<&Passage> {
        self.get(pid)
            .ok_or_else(|| Error::Integrity(format!("pid `{pid}` not found in corpus")))
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// Loads a line-delimited corpus file of `{pid, title, text}` records.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let passages: Vec<Passage> = io::read_jsonl(path)?;
    Corpus::new(passages)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Immutable inverted index. Postings are keyed in a `BTreeMap` so the
/// serialized form is stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Index {
    params: Bm25Params,
    pids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

pub fn build_index(corpus: &Corpus, params: Bm25Params) -> Result<Index> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (doc, passage) in corpus.passages().iter().enumerate() {
        let mut tokens = words(&passage.title);
        tokens.extend(words(&passage.text));
        doc_lengths.push(tokens.len() as u32);

        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, tf) in tf {
            postings.entry(term).or_default().push(Posting {
                doc: doc as u32,
                tf,
            });
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    let avg_doc_length = total as f64 / doc_lengths.len() as f64;
    Ok(Index {
        params,
        pids: corpus.passages().iter().map(|p| p.pid.clone()).collect(),
        doc_lengths,
        avg_doc_length,
        postings,
    })
}

impl Index {
    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, pid: &str) -> Option<u32> {
        self.pids
            .iter()
            .position(|p| p == pid)
            .map(|i| self.doc_lengths[i])
    }

    /// Pids of the documents containing `term` (already lowercased).
    pub fn postings(&self, term: &str) -> Vec<&str> {
        self.postings
            .get(term)
            .map(|list| list.iter().map(|p| self.pids[p.doc as usize].as_str()).collect())
            .unwrap_or_default()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.pids.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// BM25 score of every document for the given query, in corpus order.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0; self.pids.len()];
        for term in words(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for posting in list {
                let tf = f64::from(posting.tf);
                let dl = f64::from(self.doc_lengths[posting.doc as usize]);
                let norm = k1 * (1.0 - b + b * dl / self.avg_doc_length);
                scores[posting.doc as usize] += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Top `n` documents by score, ties broken by pid ascending. A query with
    /// no tokens yields an empty pool.
    pub fn retrieve(&self, query_id: &str, query: &str, n: usize) -> Result<RankedPool> {
        if n == 0 {
            return Err(Error::Config("retrieval depth must be at least 1".into()));
        }
        if words(query).is_empty() {
            return Ok(RankedPool::from_sorted(query_id, Vec::new()));
        }
        let scores = self.score_all(query);
        let entries = self
            .pids
            .iter()
            .zip(scores)
            .map(|(pid, score)| PoolEntry {
                pid: pid.clone(),
                score,
            })
            .collect();
        let mut pool = RankedPool::new(query_id, entries);
        pool.entries.truncate(n);
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub pid: String,
    pub score: f64,
}

/// Ranked candidates for one query plus a cursor marking the next unserved
/// entry. Entries are sorted by score descending then pid ascending, and pids
/// are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPool {
    pub query_id: String,
    entries: Vec<PoolEntry>,
    cursor: usize,
}

impl RankedPool {
    /// Sorts the entries and keeps the best-scored occurrence of each pid.
    pub fn new(query_id: &str, mut entries: Vec<PoolEntry>) -> Self {
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.pid.cmp(&b.pid)));
        let mut seen = HashSet::new();
        entries.retain(|e| seen.insert(e.pid.clone()));
        Self::from_sorted(query_id, entries)
    }

    fn from_sorted(query_id: &str, entries: Vec<PoolEntry>) -> Self {
        Self {
            query_id: query_id.to_string(),
            entries,
            cursor: 0,
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.entries.len()
    }

    /// Serves up to `needed` pids at or after the cursor, skipping any in
    /// `exclude`. The cursor moves past every examined entry, served or
    /// excluded, so nothing is served twice. A short result means the pool
    /// ran out.
    pub fn next_batch(&mut self, needed: usize, exclude: &HashSet<String>) -> Vec<String> {
        let mut out = Vec::with_capacity(needed);
        while out.len() < needed && self.cursor < self.entries.len() {
            let entry = &self.entries[self.cursor];
            self.cursor += 1;
            if !exclude.contains(&entry.pid) {
                out.push(entry.pid.clone());
            }
        }
        out
    }
}

/// Anything that can produce a ranked pool for a query.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query_id: &str, query: &str, n: usize) -> Result<RankedPool>;
}

impl Retriever for Index {
    fn retrieve(&self, query_id: &str, query: &str, n: usize) -> Result<RankedPool> {
        Index::retrieve(self, query_id, query, n)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingRecord {
    pub qid: String,
    pub ranking: Vec<PoolEntry>,
}

/// Rankings computed elsewhere (for example by a dense retriever), looked up
/// by query id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedRankings {
    by_qid: HashMap<String, Vec<PoolEntry>>,
}

impl PrecomputedRankings {
    pub fn new(records: Vec<RankingRecord>) -> Result<Self> {
        let mut by_qid = HashMap::new();
        for r in records {
            if by_qid.insert(r.qid.clone(), r.ranking).is_some() {
                return Err(Error::Integrity(format!("duplicate ranking for query `{}`", r.qid)));
            }
        }
        Ok(Self { by_qid })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(io::read_jsonl(path)?)
    }
}

impl Retriever for PrecomputedRankings {
    fn retrieve(&self, query_id: &str, _query: &str, n: usize) -> Result<RankedPool> {
        if n == 0 {
            return Err(Error::Config("retrieval depth must be at least 1".into()));
        }
        let entries = self
            .by_qid
            .get(query_id)
            .ok_or_else(|| Error::Integrity(format!("no precomputed ranking for query `{query_id}`")))?;
        let mut pool = RankedPool::new(query_id, entries.clone());
        pool.entries.truncate(n);
        Ok(pool)
    }
}
