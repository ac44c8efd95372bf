//! Candidate collection from per-source specialists.
//!
//! Each active source receives a beam size proportional to its reader's
//! dev-set exact match, rounded up against the total budget. Specialists
//! then answer independently: retrieve a source-scoped context, run the
//! reader, and emit ranked candidates. A failing source contributes zero
//! candidates and a trace entry; it never aborts the pool.
//!
//! Two reader implementations ship with the crate: [`FixtureReader`]
//! replays ranked candidate lists from a file (exact, controllable tests),
//! [`ExtractiveReader`] scores spans of the retrieved context under the
//! reference model (an end-to-end pipeline with no fixtures).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::SourceId;
use crate::par;
use crate::retrieval::{Index, RetrievedContext};
use crate::scoring::{sequence_probability, BigramModel, ScoringConfig};
use crate::text::{normalize_answer, tokenize};

/// Per-source dev-set performance used for budget allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistProfile {
    pub source: SourceId,
    pub dev_em: f64,
}

impl SpecialistProfile {
    pub fn new(source: SourceId, dev_em: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&dev_em) {
            return Err(Error::Config(format!(
                "dev EM for `{source}` must lie in [0, 1], got {dev_em}"
            )));
        }
        Ok(SpecialistProfile { source, dev_em })
    }
}

/// Beam sizes per source under a total budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub total_budget: u32,
    pub per_source: BTreeMap<SourceId, u32>,
}

impl BudgetAllocation {
    pub fn beam_for(&self, source: &SourceId) -> Option<u32> {
        self.per_source.get(source).copied()
    }

    /// Keep only the entries for `chain`, e.g. to reuse a full-chain
    /// allocation on a sub-chain (fixed-beam evaluation).
    pub fn restricted_to(&self, chain: &[SourceId]) -> BudgetAllocation {
        BudgetAllocation {
            total_budget: self.total_budget,
            per_source: self
                .per_source
                .iter()
                .filter(|(s, _)| chain.contains(s))
                .map(|(s, b)| (s.clone(), *b))
                .collect(),
        }
    }
}

/// Split a total candidate budget across sources, proportional to dev EM.
///
/// Each share is `ceil(dev_em_k / sum(dev_em) * budget)`, clamped to a
/// minimum of 1 so every active source can contribute. The shares may sum
/// to more than `budget`; the ceiling overshoot is accepted.
pub fn allocate_budget(profiles: &[SpecialistProfile], budget: u32) -> Result<BudgetAllocation> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    if profiles.is_empty() {
        return Err(Error::Config("no specialist profiles supplied".into()));
    }
    let mut seen = BTreeSet::new();
    for p in profiles {
        if !seen.insert(&p.source) {
            return Err(Error::Config(format!(
                "duplicate profile for source `{}`",
                p.source
            )));
        }
    }
    let total_em: f64 = profiles.iter().map(|p| p.dev_em).sum();
    if total_em <= 0.0 {
        return Err(Error::NoInformativeProfiles);
    }
    let per_source = profiles
        .iter()
        .map(|p| {
            let proportion = p.dev_em / total_em;
            let beam = (proportion * budget as f64).ceil().max(1.0) as u32;
            (p.source.clone(), beam)
        })
        .collect();
    Ok(BudgetAllocation {
        total_budget: budget,
        per_source,
    })
}

/// One ranked answer from a reader, score in `[0, 1]` and non-increasing
/// with rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderCandidate {
    pub answer: String,
    pub score: f64,
}

/// What a specialist reader sees for one request.
pub struct ReaderRequest<'a> {
    pub question_id: &'a str,
    pub question: &'a str,
    pub source: &'a SourceId,
    pub context: &'a RetrievedContext,
    pub beam: u32,
}

/// A reader produces at most `beam` ranked candidates for a request.
/// Implementations must be deterministic and free of shared mutable state.
pub trait SpecialistReader: Send + Sync {
    fn candidates(&self, request: &ReaderRequest<'_>) -> Result<Vec<ReaderCandidate>>;
}

/// An answer candidate in the shared pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub answer: String,
    /// Source whose specialist produced it (after dedup: the earliest one in
    /// chain order).
    pub origin: SourceId,
    /// 1-based rank within the origin's beam.
    pub beam_rank: u32,
    /// Specialist-reported sequence probability, kept for diagnostics.
    pub reader_score: f64,
    /// Every (source, rank) that produced this answer, populated by dedup.
    pub merged_origins: BTreeSet<(SourceId, u32)>,
}

impl CandidateAnswer {
    pub fn new(answer: String, origin: SourceId, beam_rank: u32, reader_score: f64) -> Self {
        let merged_origins = BTreeSet::from([(origin.clone(), beam_rank)]);
        CandidateAnswer {
            answer,
            origin,
            beam_rank,
            reader_score,
            merged_origins,
        }
    }

    /// Distinct sources this candidate is backed by.
    pub fn origin_sources(&self) -> BTreeSet<&SourceId> {
        self.merged_origins.iter().map(|(s, _)| s).collect()
    }
}

/// A source that failed during collection, with the stage that failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source: SourceId,
    pub stage: String,
    pub message: String,
}

/// Output of the collection step.
#[derive(Debug, Clone)]
pub struct CollectedCandidates {
    /// Candidates ordered by (position of source in chain, beam rank).
    pub pool: Vec<CandidateAnswer>,
    /// The specialist context each source retrieved.
    pub contexts: BTreeMap<SourceId, RetrievedContext>,
    pub failures: Vec<SourceFailure>,
}

/// Collect candidates from every source in the chain.
///
/// Sources run independently (in parallel when enabled); the output order
/// is canonical regardless of completion order. `beam_cap`, when set,
/// bounds each source's beam after allocation.
#[allow(clippy::too_many_arguments)]
pub fn collect_candidates(
    question_id: &str,
    question: &str,
    chain: &[SourceId],
    allocation: &BudgetAllocation,
    readers: &BTreeMap<SourceId, Arc<dyn SpecialistReader>>,
    indices: &BTreeMap<SourceId, Index>,
    specialist_k: &BTreeMap<SourceId, u32>,
    beam_cap: Option<u32>,
) -> Result<CollectedCandidates> {
    for source in chain {
        if !readers.contains_key(source)
            || !indices.contains_key(source)
            || allocation.beam_for(source).is_none()
        {
            return Err(Error::Config(format!(
                "source `{source}` is missing a reader, index, or budget entry"
            )));
        }
    }

    struct SourceOutcome {
        source: SourceId,
        context: RetrievedContext,
        candidates: std::result::Result<Vec<ReaderCandidate>, String>,
    }

    let outcomes: Vec<SourceOutcome> = par::map_vec(chain, |source| {
        let index = &indices[source];
        let k = specialist_k.get(source).copied().unwrap_or(10);
        let beam = allocation.beam_for(source).expect("validated above");
        let beam = beam_cap.map_or(beam, |cap| beam.min(cap.max(1)));
        let context = index.retrieve(question, k);
        let request = ReaderRequest {
            question_id,
            question,
            source,
            context: &context,
            beam,
        };
        let candidates = readers[source]
            .candidates(&request)
            .map(|mut list| {
                list.truncate(beam as usize);
                list
            })
            .map_err(|e| e.to_string());
        SourceOutcome {
            source: source.clone(),
            context,
            candidates,
        }
    });

    let mut pool = Vec::new();
    let mut contexts = BTreeMap::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        contexts.insert(outcome.source.clone(), outcome.context);
        match outcome.candidates {
            Ok(list) => {
                for (i, candidate) in list.into_iter().enumerate() {
                    if candidate.answer.trim().is_empty() {
                        continue;
                    }
                    pool.push(CandidateAnswer::new(
                        candidate.answer,
                        outcome.source.clone(),
                        (i + 1) as u32,
                        candidate.score,
                    ));
                }
            }
            Err(message) => failures.push(SourceFailure {
                source: outcome.source,
                stage: "reader".into(),
                message,
            }),
        }
    }
    Ok(CollectedCandidates {
        pool,
        contexts,
        failures,
    })
}

/// Merge candidates whose answers are equal after exact-match
/// normalization.
///
/// The survivor keeps the earliest (chain order, rank) origin and answer
/// text, the maximum reader score over the group, and all origins in
/// `merged_origins`. Idempotent.
pub fn dedupe(pool: &[CandidateAnswer]) -> Vec<CandidateAnswer> {
    let mut merged: Vec<CandidateAnswer> = Vec::new();
    let mut by_key: BTreeMap<String, usize> = BTreeMap::new();
    for candidate in pool {
        let key = normalize_answer(&candidate.answer);
        match by_key.get(&key) {
            Some(&slot) => {
                let survivor = &mut merged[slot];
                survivor.reader_score = survivor.reader_score.max(candidate.reader_score);
                survivor
                    .merged_origins
                    .extend(candidate.merged_origins.iter().cloned());
            }
            None => {
                by_key.insert(key, merged.len());
                merged.push(candidate.clone());
            }
        }
    }
    merged
}

/// Replays ranked candidates from a line-delimited fixture file keyed by
/// `(question_id, source)`:
///
/// ```text
/// {"question_id":"q1","source":"text","candidates":[{"answer":"...","score":0.9}]}
/// ```
///
/// Unknown keys yield zero candidates. One instance can serve every source
/// (shared-reader deployments) since the key carries the source.
#[derive(Debug, Clone, Default)]
pub struct FixtureReader {
    entries: BTreeMap<(String, String), Vec<ReaderCandidate>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct FixtureRecord {
    pub question_id: String,
    pub source: SourceId,
    pub candidates: Vec<ReaderCandidate>,
}

impl FixtureReader {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    pub fn from_reader<R: Read>(reader: BufReader<R>, label: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: label.to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            Self::validate(&record).map_err(|message| Error::Ingest {
                path: label.to_string(),
                line: lineno + 1,
                message,
            })?;
            entries.insert(
                (record.question_id, record.source.as_str().to_string()),
                record.candidates,
            );
        }
        Ok(FixtureReader { entries })
    }

    /// Build directly from records (used by synthetic fixtures).
    pub fn from_records(records: Vec<FixtureRecord>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for record in records {
            Self::validate(&record).map_err(Error::Config)?;
            entries.insert(
                (record.question_id, record.source.as_str().to_string()),
                record.candidates,
            );
        }
        Ok(FixtureReader { entries })
    }

    fn validate(record: &FixtureRecord) -> std::result::Result<(), String> {
        let mut prev = f64::INFINITY;
        for c in &record.candidates {
            if c.answer.trim().is_empty() {
                return Err(format!(
                    "empty candidate answer for `{}`",
                    record.question_id
                ));
            }
            if !(0.0..=1.0).contains(&c.score) {
                return Err(format!("score {} outside [0, 1]", c.score));
            }
            if c.score > prev {
                return Err(format!(
                    "scores must be non-increasing for `{}`/{}",
                    record.question_id, record.source
                ));
            }
            prev = c.score;
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.entries
            .iter()
            .map(|((qid, source), candidates)| FixtureRecord {
                question_id: qid.clone(),
                source: SourceId::new(source.clone()).expect("source ids validated on insert"),
                candidates: candidates.clone(),
            })
            .collect()
    }
}

impl SpecialistReader for FixtureReader {
    fn candidates(&self, request: &ReaderRequest<'_>) -> Result<Vec<ReaderCandidate>> {
        let key = (
            request.question_id.to_string(),
            request.source.as_str().to_string(),
        );
        Ok(self
            .entries
            .get(&key)
            .map(|list| list.iter().take(request.beam as usize).cloned().collect())
            .unwrap_or_default())
    }
}

/// Extracts candidate spans from the retrieved context and ranks them by
/// their sequence probability under the reference model fitted to the same
/// (question, context) pair. No fixtures, no training.
#[derive(Debug, Clone)]
pub struct ExtractiveReader {
    pub max_span_tokens: usize,
    pub scoring: ScoringConfig,
}

impl Default for ExtractiveReader {
    fn default() -> Self {
        ExtractiveReader {
            max_span_tokens: 3,
            scoring: ScoringConfig::default(),
        }
    }
}

impl SpecialistReader for ExtractiveReader {
    fn candidates(&self, request: &ReaderRequest<'_>) -> Result<Vec<ReaderCandidate>> {
        if request.context.is_empty() || request.beam == 0 {
            return Ok(Vec::new());
        }
        let model = BigramModel::fit(request.question, request.context, &self.scoring);

        // Enumerate distinct spans in first-occurrence order.
        let mut spans: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for body in request.context.bodies() {
            let tokens = tokenize(body);
            for start in 0..tokens.len() {
                for len in 1..=self.max_span_tokens.min(tokens.len() - start) {
                    let span = tokens[start..start + len].join(" ");
                    if seen.insert(span.clone()) {
                        spans.push(span);
                    }
                }
            }
        }

        let mut scored: Vec<(String, f64)> = spans
            .into_iter()
            .map(|span| {
                let score = sequence_probability(&span, &model)
                    .expect("span tokens are non-empty by construction")
                    .value;
                (span, score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(request.beam as usize);
        Ok(scored
            .into_iter()
            .map(|(answer, score)| ReaderCandidate { answer, score })
            .collect())
    }
}
