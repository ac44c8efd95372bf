//! Candidate aggregation and final-answer selection.
//!
//! Every candidate is scored twice: `p_j` under the unified context
//! (the judge's view over all active sources) and `p_s` under the
//! candidate's own specialist context. The selection mode decides how the
//! two combine; the default averages them. Ranking is a total order —
//! combined score, then `p_j`, then the origin's position in the chain,
//! then the normalized answer — so results are reproducible across runs
//! and platforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::SourceId;
use crate::par;
use crate::retrieval::RetrievedContext;
use crate::scoring::{sequence_probability, TokenProbabilityModel};
use crate::specialist::{BudgetAllocation, CandidateAnswer, SourceFailure};
use crate::text::normalize_answer;

/// How the two candidate scores combine into the ranking key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Rank by the specialist-context score alone.
    #[serde(rename = "p_s")]
    SpecialistOnly,
    /// Rank by the unified-context score alone.
    #[serde(rename = "p_j")]
    JudgeOnly,
    /// Rank by the simple average of both scores.
    #[serde(rename = "p_js")]
    Average,
    /// Evaluation-only: candidates matching a gold answer score 1, others
    /// 0. Requires gold answers, so it is usable only inside the eval
    /// harness.
    #[serde(rename = "oracle")]
    Oracle,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::SpecialistOnly => "p_s",
            SelectionMode::JudgeOnly => "p_j",
            SelectionMode::Average => "p_js",
            SelectionMode::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_s" | "ps" => Ok(SelectionMode::SpecialistOnly),
            "p_j" | "pj" => Ok(SelectionMode::JudgeOnly),
            "p_js" | "pjs" => Ok(SelectionMode::Average),
            "oracle" => Ok(SelectionMode::Oracle),
            other => Err(Error::Config(format!(
                "unknown selection mode `{other}` (expected p_s, p_j, p_js, or oracle)"
            ))),
        }
    }
}

/// A candidate with both context scores attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedCandidate {
    pub candidate: CandidateAnswer,
    /// Sequence probability under the unified context.
    pub p_j: f64,
    /// Sequence probability under the candidate's specialist context
    /// (maximum over merged origins).
    pub p_s: f64,
    /// Ranking key for the active mode.
    pub combined: f64,
}

/// A candidate dropped during judging, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub answer: String,
    pub origin: SourceId,
    pub reason: String,
}

/// Per-stage diagnostic record carried on every selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    /// Beam allocation used for collection, when the pipeline ran it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<BudgetAllocation>,
    /// Passage ids of the unified context.
    #[serde(default)]
    pub unified_context: Vec<String>,
    /// Passage ids of each specialist context.
    #[serde(default)]
    pub specialist_contexts: BTreeMap<SourceId, Vec<String>>,
    /// Sources that failed to contribute.
    #[serde(default)]
    pub failures: Vec<SourceFailure>,
    /// Candidates dropped as unscorable.
    #[serde(default)]
    pub dropped: Vec<DroppedCandidate>,
}

/// Final answer plus the full ranked pool and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub final_answer: String,
    /// Judged pool sorted by the ranking order, best first.
    pub ranked: Vec<JudgedCandidate>,
    pub mode: SelectionMode,
    pub trace: Trace,
}

/// Builds a scoring model for a given retrieved context.
pub type ModelFactory<'a> = dyn Fn(&RetrievedContext) -> Box<dyn TokenProbabilityModel> + Sync + 'a;

/// Score the pool under the unified and specialist contexts and select the
/// final answer.
///
/// `chain` fixes the tie-break order of origins. Candidates that tokenize
/// to nothing are dropped with a trace entry; an empty or fully dropped
/// pool is an error.
#[allow(clippy::too_many_arguments)]
pub fn judge_pool(
    pool: &[CandidateAnswer],
    chain: &[SourceId],
    unified_context: &RetrievedContext,
    specialist_contexts: &BTreeMap<SourceId, RetrievedContext>,
    model_factory: &ModelFactory<'_>,
    mode: SelectionMode,
    mut trace: Trace,
) -> Result<SelectionResult> {
    if mode == SelectionMode::Oracle {
        return Err(Error::Config(
            "oracle mode needs gold answers; use oracle_select from the eval harness".into(),
        ));
    }
    if pool.is_empty() {
        return Err(Error::NoCandidates("empty pool".into()));
    }
    for candidate in pool {
        for (source, _) in &candidate.merged_origins {
            if !specialist_contexts.contains_key(source) {
                return Err(Error::Config(format!(
                    "candidate `{}` originates from `{source}` which has no specialist context",
                    candidate.answer
                )));
            }
        }
    }

    let judge_model = model_factory(unified_context);
    let specialist_models: BTreeMap<&SourceId, Box<dyn TokenProbabilityModel>> =
        specialist_contexts
            .iter()
            .map(|(s, ctx)| (s, model_factory(ctx)))
            .collect();

    trace.unified_context = unified_context.passage_ids();
    for (source, ctx) in specialist_contexts {
        trace
            .specialist_contexts
            .insert(source.clone(), ctx.passage_ids());
    }

    let scored: Vec<std::result::Result<JudgedCandidate, DroppedCandidate>> =
        par::map_vec(pool, |candidate| {
            let p_j = match sequence_probability(&candidate.answer, judge_model.as_ref()) {
                Ok(score) => score.value,
                Err(e) => {
                    return Err(DroppedCandidate {
                        answer: candidate.answer.clone(),
                        origin: candidate.origin.clone(),
                        reason: e.to_string(),
                    })
                }
            };
            // Max over the contexts of every origin the candidate merged
            // from: dedup must never lower a candidate's evidence.
            let p_s = candidate
                .origin_sources()
                .into_iter()
                .map(|source| {
                    sequence_probability(&candidate.answer, specialist_models[source].as_ref())
                        .map(|s| s.value)
                        .unwrap_or(0.0)
                })
                .fold(0.0f64, f64::max);
            let combined = match mode {
                SelectionMode::SpecialistOnly => p_s,
                SelectionMode::JudgeOnly => p_j,
                SelectionMode::Average => (p_j + p_s) / 2.0,
                SelectionMode::Oracle => unreachable!("rejected above"),
            };
            Ok(JudgedCandidate {
                candidate: candidate.clone(),
                p_j,
                p_s,
                combined,
            })
        });

    let mut ranked = Vec::with_capacity(pool.len());
    for outcome in scored {
        match outcome {
            Ok(judged) => ranked.push(judged),
            Err(dropped) => trace.dropped.push(dropped),
        }
    }
    if ranked.is_empty() {
        return Err(Error::NoCandidates("every candidate was unscorable".into()));
    }

    rank(&mut ranked, chain);
    Ok(SelectionResult {
        final_answer: ranked[0].candidate.answer.clone(),
        ranked,
        mode,
        trace,
    })
}

/// Evaluation-only judge: a candidate scores 1 iff it exact-matches a gold
/// answer. Selection and tie-breaking follow the same total order as the
/// model judge.
pub fn oracle_select(
    pool: &[CandidateAnswer],
    chain: &[SourceId],
    golds: &[String],
    mut trace: Trace,
) -> Result<SelectionResult> {
    if pool.is_empty() {
        return Err(Error::NoCandidates("empty pool".into()));
    }
    let normalized_golds: Vec<String> = golds.iter().map(|g| normalize_answer(g)).collect();
    let mut ranked: Vec<JudgedCandidate> = pool
        .iter()
        .map(|candidate| {
            let hit = normalized_golds
                .iter()
                .any(|g| !g.is_empty() && *g == normalize_answer(&candidate.answer));
            let value = if hit { 1.0 } else { 0.0 };
            JudgedCandidate {
                candidate: candidate.clone(),
                p_j: value,
                p_s: value,
                combined: value,
            }
        })
        .collect();
    if ranked.is_empty() {
        return Err(Error::NoCandidates("empty pool".into()));
    }
    rank(&mut ranked, chain);
    trace.unified_context.clear();
    Ok(SelectionResult {
        final_answer: ranked[0].candidate.answer.clone(),
        ranked,
        mode: SelectionMode::Oracle,
        trace,
    })
}

/// Total ranking order: combined desc, p_j desc, chain position asc,
/// normalized answer asc.
fn rank(pool: &mut [JudgedCandidate], chain: &[SourceId]) {
    let position = |source: &SourceId| -> usize {
        chain.iter().position(|s| s == source).unwrap_or(usize::MAX)
    };
    pool.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then(b.p_j.total_cmp(&a.p_j))
            .then(position(&a.candidate.origin).cmp(&position(&b.candidate.origin)))
            .then(normalize_answer(&a.candidate.answer).cmp(&normalize_answer(&b.candidate.answer)))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::SourceId;
    use crate::retrieval::RetrievedContext;
    use crate::specialist::CandidateAnswer;
    use std::collections::BTreeSet;

    fn src(name: &str) -> SourceId {
        SourceId::new(name).unwrap()
    }

    fn empty_ctx() -> RetrievedContext {
        RetrievedContext::empty(5, BTreeSet::new())
    }

    /// Scripted model keyed by the first answer token. Used to pin (p_j,
    /// p_s) pairs exactly.
    struct TableModel(BTreeMap<String, f64>);

    impl TokenProbabilityModel for TableModel {
        fn token_probability(&self, _prefix: &[String], token: &str) -> f64 {
            self.0.get(token).copied().unwrap_or(0.5)
        }
    }

    /// Factory tagging contexts by scope: the unified call sees an empty
    /// scope, specialist calls a single source.
    fn factory_with(
        judge: BTreeMap<String, f64>,
        specialist: BTreeMap<String, BTreeMap<String, f64>>,
    ) -> impl Fn(&RetrievedContext) -> Box<dyn TokenProbabilityModel> {
        move |ctx: &RetrievedContext| -> Box<dyn TokenProbabilityModel> {
            if ctx.scope.is_empty() {
                Box::new(TableModel(judge.clone()))
            } else {
                let source = ctx.scope.iter().next().unwrap().as_str();
                Box::new(TableModel(
                    specialist.get(source).cloned().unwrap_or_default(),
                ))
            }
        }
    }

    fn specialist_ctx(source: &str) -> RetrievedContext {
        RetrievedContext::empty(5, BTreeSet::from([src(source)]))
    }

    fn pool_of(entries: &[(&str, &str, u32)]) -> Vec<CandidateAnswer> {
        entries
            .iter()
            .map(|(answer, origin, rank)| {
                CandidateAnswer::new(answer.to_string(), src(origin), *rank, 0.5)
            })
            .collect()
    }

    #[test]
    fn singleton_pool_wins_in_every_mode() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("alpha", "text", 1)]);
        let ctxs = BTreeMap::from([(src("text"), specialist_ctx("text"))]);
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        for mode in [
            SelectionMode::SpecialistOnly,
            SelectionMode::JudgeOnly,
            SelectionMode::Average,
        ] {
            let result = judge_pool(
                &pool,
                &chain,
                &empty_ctx(),
                &ctxs,
                &factory,
                mode,
                Trace::default(),
            )
            .unwrap();
            assert_eq!(result.final_answer, "alpha");
            assert_eq!(result.ranked.len(), 1);
        }
    }

    #[test]
    fn averaging_vs_judge_only_worked_example() {
        // Candidate "alpha": (p_j, p_s) = (0.8, 0.6); "beta": (0.9, 0.4).
        // Averages 0.7 vs 0.65 so alpha wins; judge-only prefers beta.
        let chain = vec![src("text"), src("table")];
        let pool = pool_of(&[("alpha", "text", 1), ("beta", "table", 1)]);
        let ctxs = BTreeMap::from([
            (src("text"), specialist_ctx("text")),
            (src("table"), specialist_ctx("table")),
        ]);
        let judge = BTreeMap::from([("alpha".to_string(), 0.8), ("beta".to_string(), 0.9)]);
        let specialist = BTreeMap::from([
            (
                "text".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.6)]),
            ),
            (
                "table".to_string(),
                BTreeMap::from([("beta".to_string(), 0.4)]),
            ),
        ]);
        let factory = factory_with(judge, specialist);

        let averaged = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(averaged.final_answer, "alpha");
        assert!((averaged.ranked[0].combined - 0.7).abs() < 1e-12);
        assert!((averaged.ranked[1].combined - 0.65).abs() < 1e-12);

        let judge_only = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::JudgeOnly,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(judge_only.final_answer, "beta");

        let specialist_only = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::SpecialistOnly,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(specialist_only.final_answer, "alpha");
    }

    #[test]
    fn exact_tie_breaks_by_chain_order() {
        // Same combined, same p_j: the candidate from the earlier source in
        // the chain wins.
        let chain = vec![src("text"), src("table")];
        let pool = pool_of(&[("beta", "table", 1), ("alpha", "text", 1)]);
        let ctxs = BTreeMap::from([
            (src("text"), specialist_ctx("text")),
            (src("table"), specialist_ctx("table")),
        ]);
        let judge = BTreeMap::from([("alpha".to_string(), 0.6), ("beta".to_string(), 0.6)]);
        let specialist = BTreeMap::from([
            (
                "text".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.4)]),
            ),
            (
                "table".to_string(),
                BTreeMap::from([("beta".to_string(), 0.4)]),
            ),
        ]);
        let factory = factory_with(judge, specialist);
        let result = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(result.final_answer, "alpha");
    }

    #[test]
    fn full_tie_breaks_by_normalized_answer() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("Zulu", "text", 1), ("Alpha", "text", 2)]);
        let ctxs = BTreeMap::from([(src("text"), specialist_ctx("text"))]);
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        let result = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(result.final_answer, "Alpha");
    }

    #[test]
    fn merged_candidate_takes_max_specialist_score() {
        let chain = vec![src("text"), src("table")];
        let mut candidate = CandidateAnswer::new("alpha".into(), src("text"), 1, 0.5);
        candidate.merged_origins.insert((src("table"), 1));
        let ctxs = BTreeMap::from([
            (src("text"), specialist_ctx("text")),
            (src("table"), specialist_ctx("table")),
        ]);
        let specialist = BTreeMap::from([
            (
                "text".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.2)]),
            ),
            (
                "table".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.9)]),
            ),
        ]);
        let factory = factory_with(BTreeMap::new(), specialist);
        let result = judge_pool(
            &[candidate],
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::SpecialistOnly,
            Trace::default(),
        )
        .unwrap();
        assert!((result.ranked[0].p_s - 0.9).abs() < 1e-15);
    }

    #[test]
    fn unscorable_candidates_drop_with_trace_never_silently() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("?!", "text", 1), ("alpha", "text", 2)]);
        let ctxs = BTreeMap::from([(src("text"), specialist_ctx("text"))]);
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        let result = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap();
        assert_eq!(result.final_answer, "alpha");
        assert_eq!(result.trace.dropped.len(), 1);
        assert_eq!(result.trace.dropped[0].answer, "?!");
    }

    #[test]
    fn empty_pool_is_an_error() {
        let chain = vec![src("text")];
        let ctxs = BTreeMap::new();
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        let err = judge_pool(
            &[],
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoCandidates(_)));
    }

    #[test]
    fn missing_specialist_context_is_a_config_error() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("alpha", "text", 1)]);
        let ctxs = BTreeMap::new();
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        let err = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Average,
            Trace::default(),
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn argmax_is_invariant_under_common_scaling() {
        let chain = vec![src("text"), src("table")];
        let pool = pool_of(&[("alpha", "text", 1), ("beta", "table", 1)]);
        let ctxs = BTreeMap::from([
            (src("text"), specialist_ctx("text")),
            (src("table"), specialist_ctx("table")),
        ]);
        let base_judge = BTreeMap::from([("alpha".to_string(), 0.8), ("beta".to_string(), 0.9)]);
        let base_spec = BTreeMap::from([
            (
                "text".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.6)]),
            ),
            (
                "table".to_string(),
                BTreeMap::from([("beta".to_string(), 0.4)]),
            ),
        ]);

        let order_at = |c: f64| -> Vec<String> {
            let judge: BTreeMap<String, f64> =
                base_judge.iter().map(|(k, v)| (k.clone(), v * c)).collect();
            let spec: BTreeMap<String, BTreeMap<String, f64>> = base_spec
                .iter()
                .map(|(s, m)| {
                    (
                        s.clone(),
                        m.iter().map(|(k, v)| (k.clone(), v * c)).collect(),
                    )
                })
                .collect();
            let factory = factory_with(judge, spec);
            judge_pool(
                &pool,
                &chain,
                &empty_ctx(),
                &ctxs,
                &factory,
                SelectionMode::Average,
                Trace::default(),
            )
            .unwrap()
            .ranked
            .iter()
            .map(|j| j.candidate.answer.clone())
            .collect()
        };

        let baseline = order_at(1.0);
        for c in [0.5, 0.25, 0.01] {
            assert_eq!(order_at(c), baseline, "scaling by {c} changed the ranking");
        }
    }

    #[test]
    fn candidate_maximal_under_both_scores_wins_averaged_mode() {
        let chain = vec![src("text"), src("table")];
        let pool = pool_of(&[("alpha", "text", 1), ("beta", "table", 1)]);
        let ctxs = BTreeMap::from([
            (src("text"), specialist_ctx("text")),
            (src("table"), specialist_ctx("table")),
        ]);
        let judge = BTreeMap::from([("alpha".to_string(), 0.9), ("beta".to_string(), 0.7)]);
        let specialist = BTreeMap::from([
            (
                "text".to_string(),
                BTreeMap::from([("alpha".to_string(), 0.8)]),
            ),
            (
                "table".to_string(),
                BTreeMap::from([("beta".to_string(), 0.3)]),
            ),
        ]);
        let factory = factory_with(judge, specialist);
        for mode in [
            SelectionMode::SpecialistOnly,
            SelectionMode::JudgeOnly,
            SelectionMode::Average,
        ] {
            let result = judge_pool(
                &pool,
                &chain,
                &empty_ctx(),
                &ctxs,
                &factory,
                mode,
                Trace::default(),
            )
            .unwrap();
            assert_eq!(result.final_answer, "alpha", "mode {mode}");
        }
    }

    #[test]
    fn oracle_select_prefers_gold_matches() {
        let chain = vec![src("text"), src("kb")];
        let pool = pool_of(&[("wrong answer", "text", 1), ("James Cameron", "kb", 1)]);
        let golds = vec!["james cameron.".to_string()];
        let result = oracle_select(&pool, &chain, &golds, Trace::default()).unwrap();
        assert_eq!(result.final_answer, "James Cameron");
        assert!((result.ranked[0].combined - 1.0).abs() < 1e-15);
        assert!((result.ranked[1].combined - 0.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_select_without_match_still_selects_deterministically() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("beta", "text", 1), ("alpha", "text", 2)]);
        let golds = vec!["gamma".to_string()];
        let result = oracle_select(&pool, &chain, &golds, Trace::default()).unwrap();
        assert_eq!(result.final_answer, "alpha");
    }

    #[test]
    fn judge_pool_rejects_oracle_mode() {
        let chain = vec![src("text")];
        let pool = pool_of(&[("alpha", "text", 1)]);
        let ctxs = BTreeMap::from([(src("text"), specialist_ctx("text"))]);
        let factory = factory_with(BTreeMap::new(), BTreeMap::new());
        let err = judge_pool(
            &pool,
            &chain,
            &empty_ctx(),
            &ctxs,
            &factory,
            SelectionMode::Oracle,
            Trace::default(),
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn selection_mode_round_trips_serde_and_fromstr() {
        for (mode, text) in [
            (SelectionMode::SpecialistOnly, "\"p_s\""),
            (SelectionMode::JudgeOnly, "\"p_j\""),
            (SelectionMode::Average, "\"p_js\""),
        ] {
            assert_eq!(serde_json::to_string(&mode).unwrap(), text);
            assert_eq!(serde_json::from_str::<SelectionMode>(text).unwrap(), mode);
            assert_eq!(mode.as_str().parse::<SelectionMode>().unwrap(), mode);
        }
    }
}
