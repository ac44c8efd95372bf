//! Lexical retrieval: inverted index plus BM25 ranking.
//!
//! Every source gets its own index (specialist retrieval) and the union of
//! the active sources gets one more (unified retrieval). Indices are
//! immutable after build; retrieval is a pure function of
//! `(index, question, k)` and ties are broken by ascending passage id so
//! rankings are reproducible byte for byte.
//!
//! Scoring uses BM25 with `k1 = 1.2`, `b = 0.75` and
//! `idf = ln(1 + (N - df + 0.5) / (df + 0.5))` over the tokens of
//! [`crate::text::tokenize`]. Only passage bodies are indexed; each query
//! token occurrence contributes one term to the sum. Passages with zero
//! score are never returned, even if fewer than `k` results remain.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{Corpus, Passage, SourceId};
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const INDEX_FORMAT: &str = "verdict-index";
const INDEX_VERSION: u32 = 1;

/// Inverted index over one or more corpora.
#[derive(Debug, Clone)]
pub struct Index {
    /// Passages sorted by id; postings refer to positions in this vector.
    passages: Vec<Passage>,
    /// term -> [(passage position, term frequency)], positions ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    scope: BTreeSet<SourceId>,
}

/// Ranked retrieval output.
#[derive(Debug, Clone)]
pub struct RetrievedContext {
    /// Passages with BM25 scores, non-increasing.
    pub passages: Vec<(Passage, f64)>,
    /// Requested depth.
    pub k: u32,
    /// Sources the query ran over.
    pub scope: BTreeSet<SourceId>,
}

impl RetrievedContext {
    /// An empty context over the given scope.
    pub fn empty(k: u32, scope: BTreeSet<SourceId>) -> Self {
        RetrievedContext {
            passages: Vec::new(),
            k,
            scope,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage_ids(&self) -> Vec<String> {
        self.passages.iter().map(|(p, _)| p.id.clone()).collect()
    }

    /// Passage bodies in rank order, for language-model estimation.
    pub fn bodies(&self) -> impl Iterator<Item = &str> {
        self.passages.iter().map(|(p, _)| p.body.as_str())
    }
}

/// The set of sources a unified index must cover for a chain.
pub fn unified_scope(chain: &[SourceId]) -> BTreeSet<SourceId> {
    chain.iter().cloned().collect()
}

/// Build an index over the union of the given corpora.
///
/// Passage ids must be globally unique across the inputs. The result is
/// independent of the order the corpora are supplied in.
pub fn build_index<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Result<Index> {
    let mut passages: Vec<Passage> = Vec::new();
    let mut scope = BTreeSet::new();
    for corpus in corpora {
        scope.insert(corpus.source().clone());
        passages.extend(corpus.passages().iter().cloned());
    }
    if passages.is_empty() {
        return Err(Error::Config(
            "cannot build an index over zero passages".into(),
        ));
    }
    passages.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in passages.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::DuplicatePassage(pair[0].id.clone()));
        }
    }
    Ok(Index::from_sorted_passages(passages, scope))
}

impl Index {
    fn from_sorted_passages(passages: Vec<Passage>, scope: BTreeSet<SourceId>) -> Index {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (pos, passage) in passages.iter().enumerate() {
            let tokens = tokenize(&passage.body);
            doc_lengths.push(tokens.len() as u32);
            let mut freqs: BTreeMap<String, u32> = BTreeMap::new();
            for token in tokens {
                *freqs.entry(token).or_insert(0) += 1;
            }
            for (term, tf) in freqs {
                postings.entry(term).or_default().push((pos as u32, tf));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Index {
            passages,
            postings,
            doc_lengths,
            avg_doc_length,
            scope,
        }
    }

    pub fn scope(&self) -> &BTreeSet<SourceId> {
        &self.scope
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn doc_count(&self) -> usize {
        self.passages.len()
    }

    /// Look up a passage by id.
    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|pos| &self.passages[pos])
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map(|p| p.len()).unwrap_or(0) as f64;
        if df == 0.0 {
            return 0.0;
        }
        let n = self.passages.len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` passages by BM25 score. An empty question (after
    /// tokenization) yields an empty context, not an error.
    pub fn retrieve(&self, question: &str, k: u32) -> RetrievedContext {
        let query = tokenize(question);
        if query.is_empty() || k == 0 {
            return RetrievedContext::empty(k, self.scope.clone());
        }

        let mut candidates: HashSet<u32> = HashSet::new();
        for term in &query {
            if let Some(list) = self.postings.get(term) {
                candidates.extend(list.iter().map(|&(doc, _)| doc));
            }
        }

        let mut scored: Vec<(u32, f64)> = candidates
            .into_iter()
            .map(|doc| (doc, self.score(doc, &query)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        // Score descending, then ascending passage id (= ascending position,
        // since passages are sorted by id).
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k as usize);

        RetrievedContext {
            passages: scored
                .into_iter()
                .map(|(doc, s)| (self.passages[doc as usize].clone(), s))
                .collect(),
            k,
            scope: self.scope.clone(),
        }
    }

    fn score(&self, doc: u32, query: &[String]) -> f64 {
        let len = self.doc_lengths[doc as usize] as f64;
        let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len / self.avg_doc_length);
        let mut total = 0.0;
        for term in query {
            let tf = self
                .postings
                .get(term)
                .and_then(|list| {
                    list.binary_search_by_key(&doc, |&(d, _)| d)
                        .ok()
                        .map(|i| list[i].1)
                })
                .unwrap_or(0) as f64;
            if tf > 0.0 {
                total += self.idf(term) * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }
        total
    }

    /// Persist as a line-delimited file: a version header, then one passage
    /// record per line. Postings are rebuilt deterministically on load, so
    /// save → load → retrieve matches in-memory retrieval exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = IndexHeader {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            scope: self.scope.iter().cloned().collect(),
            passages: self.passages.len(),
        };
        serde_json::to_writer(&mut out, &header).map_err(io_like)?;
        out.write_all(b"\n")?;
        for passage in &self.passages {
            serde_json::to_writer(&mut out, passage).map_err(io_like)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Index> {
        let path = path.as_ref();
        let label = path.display().to_string();
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::IndexFormat(format!("{label}: empty file")))??;
        let header: IndexHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::IndexFormat(format!("{label}: bad header: {e}")))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(Error::IndexFormat(format!(
                "{label}: expected {INDEX_FORMAT} v{INDEX_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let mut passages = Vec::with_capacity(header.passages);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let passage: Passage = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: label.clone(),
                line: lineno + 2,
                message: e.to_string(),
            })?;
            passages.push(passage);
        }
        if passages.len() != header.passages {
            return Err(Error::IndexFormat(format!(
                "{label}: header promises {} passages, found {}",
                header.passages,
                passages.len()
            )));
        }
        passages.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Index::from_sorted_passages(
            passages,
            header.scope.into_iter().collect(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    scope: Vec<SourceId>,
    passages: usize,
}

fn io_like(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Convenience for callers that only hold passage ids (e.g. the coordinator
/// reconstructing a specialist context from a wire response).
pub fn context_from_ids(
    ids: &[String],
    lookup: &HashMap<String, &Passage>,
    k: u32,
    scope: BTreeSet<SourceId>,
) -> Result<RetrievedContext> {
    if ids.len() > k as usize {
        return Err(Error::Service(format!(
            "{} context passages exceed the requested depth {k}",
            ids.len()
        )));
    }
    let mut passages = Vec::with_capacity(ids.len());
    for id in ids {
        let passage = lookup
            .get(id)
            .ok_or_else(|| Error::Service(format!("unknown passage id `{id}` in response")))?;
        if !scope.contains(&passage.source) {
            return Err(Error::Service(format!(
                "passage `{id}` belongs to `{}`, outside the context scope",
                passage.source
            )));
        }
        passages.push(((*passage).clone(), 0.0));
    }
    Ok(RetrievedContext { passages, k, scope })
}
