//! Length-normalized sequence probability over a pluggable token model.
//!
//! A candidate answer with tokens `a_1..a_n` is scored as the geometric
//! mean of per-token conditional probabilities, computed in log space:
//! `exp((1/n) * sum(ln p_t))`. The probabilities come from a
//! [`TokenProbabilityModel`], which captures the question and retrieved
//! context it was estimated from.
//!
//! The reference model is an add-alpha smoothed bigram estimated from the
//! concatenation of the question and the context passage bodies in rank
//! order. Smoothing keeps every in-vocabulary (and unknown) token strictly
//! positive, which the geometric mean requires.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RetrievedContext;
use crate::text::tokenize;

/// Default smoothing constant.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Class count assumed when a model has no training text at all; every
/// token then scores uniformly at `1 / UNIFORM_FALLBACK_CLASSES`.
pub const UNIFORM_FALLBACK_CLASSES: usize = 1000;

/// Token-level conditional probability `P(token | prefix)` for a fixed
/// question and context baked into the model instance.
///
/// Contract: probabilities lie in `(0, 1]`, the distribution over the
/// model's vocabulary (plus its unknown class) sums to at most `1 + 1e-9`
/// at every step, and calls are pure.
pub trait TokenProbabilityModel: Send + Sync {
    fn token_probability(&self, prefix: &[String], token: &str) -> f64;
}

/// Configuration for the reference model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Add-alpha smoothing constant.
    pub alpha: f64,
    /// Keep only the most frequent `cap` tokens in the vocabulary; the rest
    /// fold into the unknown class. `None` keeps everything.
    #[serde(default)]
    pub vocab_cap: Option<usize>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            alpha: DEFAULT_ALPHA,
            vocab_cap: None,
        }
    }
}

/// Geometric-mean sequence score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceScore {
    /// `exp((1/n) * sum(ln p_t))`, in `(0, 1]`.
    pub value: f64,
    pub token_count: usize,
    pub per_token: Vec<f64>,
}

/// Score `answer` under `model`: tokenize, then take the geometric mean of
/// the per-token conditional probabilities.
///
/// Errors when the answer has no tokens under the scoring tokenizer.
pub fn sequence_probability(
    answer: &str,
    model: &dyn TokenProbabilityModel,
) -> Result<SequenceScore> {
    let tokens = tokenize(answer);
    if tokens.is_empty() {
        return Err(Error::Unscorable(answer.to_string()));
    }
    let mut log_sum = 0.0;
    let mut per_token = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let p = model.token_probability(&tokens[..t], &tokens[t]);
        debug_assert!(
            p > 0.0 && p <= 1.0,
            "model returned {p} for `{}`",
            tokens[t]
        );
        per_token.push(p);
        log_sum += p.ln();
    }
    let value = (log_sum / tokens.len() as f64).exp();
    Ok(SequenceScore {
        value,
        token_count: tokens.len(),
        per_token,
    })
}

/// Add-alpha smoothed bigram model.
///
/// The first token of a sequence is scored by the smoothed unigram
/// distribution; later tokens by the smoothed bigram distribution
/// conditioned on their predecessor. Out-of-vocabulary tokens map to a
/// single unknown class.
#[derive(Debug, Clone)]
pub struct BigramModel {
    alpha: f64,
    /// token -> vocabulary id; the unknown class is implicit.
    vocab: HashMap<String, u32>,
    /// Unigram counts per vocabulary id (unknown class holds counts folded
    /// in by the vocabulary cap).
    unigram: Vec<u64>,
    unknown_count: u64,
    total_tokens: u64,
    /// (prev id, next id) -> count, with `u32::MAX` as the unknown id.
    bigram: HashMap<(u32, u32), u64>,
    /// Total outgoing bigram count per vocabulary id.
    outgoing: Vec<u64>,
    outgoing_unknown: u64,
}

const UNK: u32 = u32::MAX;

impl BigramModel {
    /// Estimate the reference model from a question and its retrieved
    /// context. With no training tokens at all the model degrades to a
    /// uniform distribution over [`UNIFORM_FALLBACK_CLASSES`] classes.
    pub fn fit(question: &str, context: &RetrievedContext, config: &ScoringConfig) -> BigramModel {
        let mut stream = tokenize(question);
        for body in context.bodies() {
            stream.extend(tokenize(body));
        }
        Self::fit_stream(&stream, config)
    }

    /// Estimate from a raw token stream. Exposed for reuse by readers that
    /// score spans under the same model family.
    pub fn fit_stream(stream: &[String], config: &ScoringConfig) -> BigramModel {
        // Count raw frequencies first so the cap can keep the most frequent
        // tokens (ties broken by token text for determinism).
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for token in stream {
            *counts.entry(token).or_insert(0) += 1;
        }
        let kept: Vec<&str> = match config.vocab_cap {
            Some(cap) => {
                let mut by_freq: Vec<(&str, u64)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
                by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                by_freq.truncate(cap);
                by_freq.into_iter().map(|(t, _)| t).collect()
            }
            None => {
                let mut all: Vec<&str> = counts.keys().copied().collect();
                all.sort_unstable();
                all
            }
        };

        let mut vocab: HashMap<String, u32> = HashMap::with_capacity(kept.len());
        for token in kept {
            let id = vocab.len() as u32;
            vocab.insert(token.to_string(), id);
        }

        let mut unigram = vec![0u64; vocab.len()];
        let mut unknown_count = 0u64;
        let mut bigram: HashMap<(u32, u32), u64> = HashMap::new();
        let mut outgoing = vec![0u64; vocab.len()];
        let mut outgoing_unknown = 0u64;

        let id_of = |token: &String| vocab.get(token).copied().unwrap_or(UNK);
        let ids: Vec<u32> = stream.iter().map(id_of).collect();
        for &id in &ids {
            if id == UNK {
                unknown_count += 1;
            } else {
                unigram[id as usize] += 1;
            }
        }
        for pair in ids.windows(2) {
            *bigram.entry((pair[0], pair[1])).or_insert(0) += 1;
            if pair[0] == UNK {
                outgoing_unknown += 1;
            } else {
                outgoing[pair[0] as usize] += 1;
            }
        }

        BigramModel {
            alpha: config.alpha,
            vocab,
            unigram,
            unknown_count,
            total_tokens: stream.len() as u64,
            bigram,
            outgoing,
            outgoing_unknown,
        }
    }

    /// Number of probability classes: vocabulary plus the unknown class.
    fn classes(&self) -> f64 {
        (self.vocab.len() + 1) as f64
    }

    fn id_of(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(UNK)
    }

    fn first_token_probability(&self, token: &str) -> f64 {
        if self.total_tokens == 0 {
            return 1.0 / UNIFORM_FALLBACK_CLASSES as f64;
        }
        let count = match self.id_of(token) {
            UNK => self.unknown_count,
            id => self.unigram[id as usize],
        };
        (count as f64 + self.alpha) / (self.total_tokens as f64 + self.alpha * self.classes())
    }

    fn transition_probability(&self, prev: &str, next: &str) -> f64 {
        if self.total_tokens == 0 {
            return 1.0 / UNIFORM_FALLBACK_CLASSES as f64;
        }
        let prev_id = self.id_of(prev);
        let next_id = self.id_of(next);
        let pair = self.bigram.get(&(prev_id, next_id)).copied().unwrap_or(0);
        let out = match prev_id {
            UNK => self.outgoing_unknown,
            id => self.outgoing[id as usize],
        };
        (pair as f64 + self.alpha) / (out as f64 + self.alpha * self.classes())
    }
}

impl TokenProbabilityModel for BigramModel {
    fn token_probability(&self, prefix: &[String], token: &str) -> f64 {
        match prefix.last() {
            None => self.first_token_probability(token),
            Some(prev) => self.transition_probability(prev, token),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::SourceId;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Model with scripted probabilities by position, for arithmetic tests.
    pub(crate) struct ScriptedModel(pub Vec<f64>);

    impl TokenProbabilityModel for ScriptedModel {
        fn token_probability(&self, prefix: &[String], _token: &str) -> f64 {
            self.0[prefix.len()]
        }
    }

    fn ctx_from(bodies: &[&str]) -> RetrievedContext {
        let source = SourceId::new("text").unwrap();
        RetrievedContext {
            passages: bodies
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    (
                        crate::knowledge::Passage {
                            id: format!("p{i}"),
                            source: source.clone(),
                            title: String::new(),
                            body: b.to_string(),
                            provenance: None,
                        },
                        (bodies.len() - i) as f64,
                    )
                })
                .collect(),
            k: bodies.len() as u32,
            scope: BTreeSet::from([source]),
        }
    }

    #[test]
    fn single_token_geometric_mean_is_identity() {
        let score = sequence_probability("token", &ScriptedModel(vec![0.25])).unwrap();
        assert!((score.value - 0.25).abs() < 1e-15);
        assert_eq!(score.token_count, 1);
    }

    #[test]
    fn two_token_geometric_mean() {
        // sqrt(0.9 * 0.1) = 0.3
        let score = sequence_probability("two tokens", &ScriptedModel(vec![0.9, 0.1])).unwrap();
        assert!((score.value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_sequence_keeps_its_probability() {
        let score =
            sequence_probability("three token run", &ScriptedModel(vec![0.5, 0.5, 0.5])).unwrap();
        assert!((score.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_answer_is_unscorable() {
        let err = sequence_probability("?!", &ScriptedModel(vec![])).unwrap_err();
        assert!(matches!(err, Error::Unscorable(_)));
    }

    /// Independent oracle for the reference model: recounts unigrams and
    /// bigrams with plain loops over the same definition and takes the
    /// direct product form of the geometric mean.
    pub(crate) fn bigram_oracle(stream: &[&str], answer_tokens: &[&str], alpha: f64) -> f64 {
        let vocab: BTreeSet<&str> = stream.iter().copied().collect();
        let classes = (vocab.len() + 1) as f64;
        let count_of = |tok: &str| stream.iter().filter(|t| **t == tok).count() as f64;
        let pair_count =
            |a: &str, b: &str| stream.windows(2).filter(|w| w[0] == a && w[1] == b).count() as f64;
        let outgoing = |a: &str| stream.windows(2).filter(|w| w[0] == a).count() as f64;
        let known = |t: &str| vocab.contains(t);

        let mut product = 1.0;
        for (i, tok) in answer_tokens.iter().enumerate() {
            let p = if i == 0 {
                let c = if known(tok) { count_of(tok) } else { 0.0 };
                (c + alpha) / (stream.len() as f64 + alpha * classes)
            } else {
                let prev = answer_tokens[i - 1];
                let pc = if known(prev) && known(tok) {
                    pair_count(prev, tok)
                } else {
                    0.0
                };
                let out = if known(prev) { outgoing(prev) } else { 0.0 };
                (pc + alpha) / (out + alpha * classes)
            };
            product *= p;
        }
        product.powf(1.0 / answer_tokens.len() as f64)
    }

    #[test]
    fn reference_model_matches_independent_oracle_on_toy_corpus() {
        let question = "who directed avatar";
        let bodies = [
            "avatar is a film directed by james cameron",
            "james cameron directed avatar",
            "the director of avatar is james cameron",
            "titanic was directed by james cameron",
            "avatar released in 2009",
        ];
        let ctx = ctx_from(&bodies);
        let config = ScoringConfig::default();
        let model = BigramModel::fit(question, &ctx, &config);

        let mut stream: Vec<&str> = question.split(' ').collect();
        for b in &bodies {
            stream.extend(b.split(' '));
        }

        for answer in [
            "james cameron",
            "avatar",
            "steven spielberg",
            "directed by james",
        ] {
            let got = sequence_probability(answer, &model).unwrap().value;
            let tokens: Vec<&str> = answer.split(' ').collect();
            let want = bigram_oracle(&stream, &tokens, config.alpha);
            let rel = (got - want).abs() / want;
            assert!(rel < 1e-12, "answer `{answer}`: got {got}, oracle {want}");
        }

        // Frozen oracle value for one pinned case, so a regression in BOTH
        // paths cannot slip through: first run recorded
        // P("james cameron") on this fixture.
        let pinned = sequence_probability("james cameron", &model).unwrap().value;
        assert!(
            (pinned - 0.29282726404842796).abs() < 1e-12,
            "pinned value drifted: {pinned}"
        );
    }

    #[test]
    fn distributions_sum_to_one_within_epsilon() {
        let ctx = ctx_from(&["cat sat on the mat", "cat cat dog"]);
        let model = BigramModel::fit("where is the cat", &ctx, &ScoringConfig::default());

        let mut vocab: Vec<String> = model.vocab.keys().cloned().collect();
        vocab.push("___unknown___".to_string());

        // First-token distribution.
        let total: f64 = vocab.iter().map(|t| model.first_token_probability(t)).sum();
        assert!((total - 1.0).abs() <= 1e-9, "unigram sums to {total}");

        // Transition distribution from several previous tokens.
        for prev in ["cat", "the", "___unknown___"] {
            let total: f64 = vocab
                .iter()
                .map(|t| model.transition_probability(prev, t))
                .sum();
            assert!(
                (total - 1.0).abs() <= 1e-9,
                "bigram from `{prev}` sums to {total}"
            );
        }
    }

    #[test]
    fn bigram_model_is_order_sensitive() {
        let ctx = ctx_from(&["james cameron directed avatar"]);
        let model = BigramModel::fit("who directed avatar", &ctx, &ScoringConfig::default());
        let forward = sequence_probability("james cameron", &model).unwrap().value;
        let backward = sequence_probability("cameron james", &model).unwrap().value;
        assert!(forward > backward);
    }

    #[test]
    fn empty_context_and_question_fall_back_to_uniform() {
        let ctx = RetrievedContext::empty(5, BTreeSet::new());
        let model = BigramModel::fit("", &ctx, &ScoringConfig::default());
        let score = sequence_probability("anything at all", &model).unwrap();
        let uniform = 1.0 / UNIFORM_FALLBACK_CLASSES as f64;
        assert!((score.value - uniform).abs() < 1e-15);
    }

    #[test]
    fn vocab_cap_folds_rare_tokens_into_unknown() {
        let ctx = ctx_from(&["alpha alpha alpha beta beta gamma"]);
        let capped = BigramModel::fit(
            "",
            &ctx,
            &ScoringConfig {
                alpha: 0.1,
                vocab_cap: Some(2),
            },
        );
        assert_eq!(capped.vocab.len(), 2);
        assert!(capped.vocab.contains_key("alpha"));
        assert!(capped.vocab.contains_key("beta"));
        // gamma now scores as the unknown class.
        let p_gamma = capped.first_token_probability("gamma");
        let p_unk = capped.first_token_probability("never seen");
        assert_eq!(p_gamma.to_bits(), p_unk.to_bits());
    }

    #[test]
    fn determinism_bit_for_bit() {
        let ctx = ctx_from(&["cat sat on the mat", "a dog ran"]);
        let config = ScoringConfig::default();
        let a = BigramModel::fit("where is the cat", &ctx, &config);
        let b = BigramModel::fit("where is the cat", &ctx, &config);
        let sa = sequence_probability("the cat sat", &a).unwrap();
        let sb = sequence_probability("the cat sat", &b).unwrap();
        assert_eq!(sa.value.to_bits(), sb.value.to_bits());
    }

    proptest! {
        /// Log-space computation equals the direct product form.
        #[test]
        fn log_space_equals_direct_product(
            probs in prop::collection::vec(1e-6f64..=1.0, 1..=64)
        ) {
            let model = ScriptedModel(probs.clone());
            let answer = vec!["tok"; probs.len()].join(" ");
            let got = sequence_probability(&answer, &model).unwrap().value;
            let direct: f64 = probs.iter().product::<f64>().powf(1.0 / probs.len() as f64);
            let rel = (got - direct).abs() / direct;
            prop_assert!(rel < 1e-12, "got {got}, direct {direct}, rel {rel}");
        }

        /// Scaling every per-token probability by c scales the score by c.
        #[test]
        fn scale_equivariance(
            probs in prop::collection::vec(1e-5f64..=1.0, 1..=32),
            c in 1e-3f64..=1.0
        ) {
            let answer = vec!["tok"; probs.len()].join(" ");
            let base = sequence_probability(&answer, &ScriptedModel(probs.clone())).unwrap().value;
            let scaled_probs: Vec<f64> = probs.iter().map(|p| p * c).collect();
            let scaled = sequence_probability(&answer, &ScriptedModel(scaled_probs)).unwrap().value;
            let rel = (scaled - base * c).abs() / (base * c);
            prop_assert!(rel < 1e-12, "scaled {scaled}, expected {}", base * c);
        }
    }
}
