//! End-to-end pipeline assembly.
//!
//! A [`Deployment`] owns the loaded corpora, readers, and profiles for
//! every configured source. An [`Engine`] is the deployment instantiated
//! for one active chain: per-source indices, one unified index scoped to
//! exactly the chain, and the configuration needed to go from a question
//! to a [`SelectionResult`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{judge_pool, SelectionMode, SelectionResult, Trace};
use crate::knowledge::{Corpus, SourceId};
use crate::retrieval::{build_index, Index, RetrievedContext};
use crate::scoring::{BigramModel, ScoringConfig, TokenProbabilityModel};
use crate::specialist::{
    allocate_budget, collect_candidates, dedupe, BudgetAllocation, CollectedCandidates,
    SpecialistProfile, SpecialistReader,
};

/// Default total candidate budget.
pub const DEFAULT_BUDGET: u32 = 9;
/// Default retrieval depth for both unified and specialist retrieval.
pub const DEFAULT_RETRIEVAL_K: u32 = 10;

/// Tunables for one engine instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Total candidate budget B.
    pub budget: u32,
    pub mode: SelectionMode,
    /// Retrieval depth for the unified context.
    pub unified_k: u32,
    /// Retrieval depth per specialist; sources absent from the map use
    /// `unified_k`.
    #[serde(default)]
    pub specialist_k: BTreeMap<SourceId, u32>,
    pub scoring: ScoringConfig,
    /// Merge normalization-equal answers before judging.
    pub dedupe: bool,
    /// Optional upper bound on any single source's beam.
    #[serde(default)]
    pub beam_cap: Option<u32>,
    /// Fixed per-source beams; bypasses proportional allocation when set
    /// (used by fixed-beam evaluation).
    #[serde(default)]
    pub allocation_override: Option<BudgetAllocation>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            budget: DEFAULT_BUDGET,
            mode: SelectionMode::Average,
            unified_k: DEFAULT_RETRIEVAL_K,
            specialist_k: BTreeMap::new(),
            scoring: ScoringConfig::default(),
            dedupe: true,
            beam_cap: None,
            allocation_override: None,
        }
    }
}

/// Everything a deployment knows about its sources, before a chain is
/// chosen.
pub struct Deployment {
    pub corpora: BTreeMap<SourceId, Corpus>,
    pub readers: BTreeMap<SourceId, Arc<dyn SpecialistReader>>,
    pub profiles: BTreeMap<SourceId, SpecialistProfile>,
    pub config: EngineConfig,
}

impl std::fmt::Debug for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deployment")
            .field("sources", &self.corpora.keys().collect::<Vec<_>>())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Deployment {
    /// Instantiate an engine for `chain`. Builds the per-source indices and
    /// a unified index over exactly the chain's sources.
    pub fn engine_for_chain(&self, chain: &[SourceId]) -> Result<Engine> {
        self.engine_with_config(chain, self.config.clone())
    }

    /// Same, with a per-run configuration (e.g. an allocation override).
    pub fn engine_with_config(&self, chain: &[SourceId], config: EngineConfig) -> Result<Engine> {
        if chain.is_empty() {
            return Err(Error::Config(
                "chain must contain at least one source".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for source in chain {
            if !seen.insert(source) {
                return Err(Error::Config(format!(
                    "source `{source}` appears twice in the chain"
                )));
            }
            if !self.corpora.contains_key(source) {
                return Err(Error::Config(format!(
                    "chain references unknown source `{source}`"
                )));
            }
            if !self.readers.contains_key(source) {
                return Err(Error::Config(format!("source `{source}` has no reader")));
            }
            if !self.profiles.contains_key(source) {
                return Err(Error::Config(format!("source `{source}` has no profile")));
            }
        }

        let mut specialist_indices = BTreeMap::new();
        for source in chain {
            specialist_indices.insert(source.clone(), build_index([&self.corpora[source]])?);
        }
        let unified_index = build_index(chain.iter().map(|s| &self.corpora[s]))?;

        Ok(Engine {
            chain: chain.to_vec(),
            specialist_indices,
            unified_index,
            readers: chain
                .iter()
                .map(|s| (s.clone(), Arc::clone(&self.readers[s])))
                .collect(),
            profiles: chain.iter().map(|s| self.profiles[s].clone()).collect(),
            config,
        })
    }
}

/// The pipeline for one active source chain.
pub struct Engine {
    // Readers are trait objects, so Debug is implemented by hand below.
    chain: Vec<SourceId>,
    specialist_indices: BTreeMap<SourceId, Index>,
    unified_index: Index,
    readers: BTreeMap<SourceId, Arc<dyn SpecialistReader>>,
    profiles: Vec<SpecialistProfile>,
    config: EngineConfig,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("chain", &self.chain)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn chain(&self) -> &[SourceId] {
        &self.chain
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn unified_index(&self) -> &Index {
        &self.unified_index
    }

    pub fn specialist_index(&self, source: &SourceId) -> Option<&Index> {
        self.specialist_indices.get(source)
    }

    /// The beam allocation this engine runs with: the override when fixed,
    /// otherwise proportional allocation over the chain's profiles.
    pub fn allocation(&self) -> Result<BudgetAllocation> {
        match &self.config.allocation_override {
            Some(alloc) => {
                let restricted = alloc.restricted_to(&self.chain);
                for source in &self.chain {
                    if restricted.beam_for(source).is_none() {
                        return Err(Error::Config(format!(
                            "allocation override misses source `{source}`"
                        )));
                    }
                }
                Ok(restricted)
            }
            None => allocate_budget(&self.profiles, self.config.budget),
        }
    }

    /// Retrieve the unified context for a question.
    pub fn unified_retrieve(&self, question: &str) -> RetrievedContext {
        self.unified_index.retrieve(question, self.config.unified_k)
    }

    fn specialist_k(&self) -> BTreeMap<SourceId, u32> {
        self.chain
            .iter()
            .map(|s| {
                let k = self
                    .config
                    .specialist_k
                    .get(s)
                    .copied()
                    .unwrap_or(self.config.unified_k);
                (s.clone(), k)
            })
            .collect()
    }

    /// Run the collection stage: allocate, retrieve per source, read, and
    /// optionally dedup. Exposed for the eval harness (oracle judging needs
    /// the raw pool).
    pub fn collect(&self, question_id: &str, question: &str) -> Result<CollectedCandidates> {
        let allocation = self.allocation()?;
        let mut collected = collect_candidates(
            question_id,
            question,
            &self.chain,
            &allocation,
            &self.readers,
            &self.specialist_indices,
            &self.specialist_k(),
            self.config.beam_cap,
        )?;
        if collected.failures.len() == self.chain.len() {
            let causes = collected
                .failures
                .iter()
                .map(|f| format!("{}: {}", f.source, f.message))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::AllSourcesFailed(causes));
        }
        if self.config.dedupe {
            collected.pool = dedupe(&collected.pool);
        }
        Ok(collected)
    }

    /// Full pipeline: allocate, collect, dedup, judge.
    pub fn answer(&self, question_id: &str, question: &str) -> Result<SelectionResult> {
        let allocation = self.allocation()?;
        let collected = self.collect(question_id, question)?;
        let unified_context = self.unified_retrieve(question);

        let trace = Trace {
            allocation: Some(allocation),
            failures: collected.failures.clone(),
            ..Trace::default()
        };

        let scoring = self.config.scoring.clone();
        let question_owned = question.to_string();
        let factory = move |ctx: &RetrievedContext| -> Box<dyn TokenProbabilityModel> {
            Box::new(BigramModel::fit(&question_owned, ctx, &scoring))
        };

        judge_pool(
            &collected.pool,
            &self.chain,
            &unified_context,
            &collected.contexts,
            &factory,
            self.config.mode,
            trace,
        )
    }
}
