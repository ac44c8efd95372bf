//! Evaluation harness: exact match, retrieval diagnosis, monotonicity
//! studies over source chains, and seeded typo corruption.
//!
//! Dataset files are line-delimited JSON:
//!
//! ```text
//! {"id":"q1","question":"who directed avatar","answers":["James Cameron"]}
//! ```
//!
//! Reports carry, per chain: mean exact match, recall at the unified
//! retrieval depth (a gold answer appears, normalized, as a substring of a
//! normalized retrieved passage body), and exact match restricted to the
//! questions where retrieval hit. Per-question failures are recorded on
//! the record, never aborting a run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Deployment, Engine};
use crate::error::{Error, Result};
use crate::judge::{oracle_select, SelectionMode, SelectionResult, Trace};
use crate::knowledge::SourceId;
use crate::par;
use crate::specialist::allocate_budget;
use crate::text::normalize_answer;

/// A question with its gold answer set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "question")]
    pub text: String,
    pub answers: Vec<String>,
}

/// Load a line-delimited dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_dataset(BufReader::new(file), &path.display().to_string())
}

/// Parse a dataset from any reader; `label` names the origin in errors.
pub fn parse_dataset<R: Read>(reader: BufReader<R>, label: &str) -> Result<Vec<Question>> {
    let mut questions = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let question: Question = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: label.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if question.answers.is_empty() {
            return Err(Error::Ingest {
                path: label.to_string(),
                line: lineno,
                message: format!("question `{}` has no gold answers", question.id),
            });
        }
        if !seen.insert(question.id.clone()) {
            return Err(Error::Ingest {
                path: label.to_string(),
                line: lineno,
                message: format!("duplicate question id `{}`", question.id),
            });
        }
        questions.push(question);
    }
    Ok(questions)
}

/// 1 iff the normalized prediction equals some normalized gold answer.
/// No substring credit.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

/// One evaluated question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub chain: Vec<SourceId>,
    pub em: u8,
    /// Gold found in the unified top-k (normalized substring of a
    /// normalized passage body).
    pub retrieval_hit: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Aggregates for one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainReport {
    pub chain: Vec<SourceId>,
    pub questions: usize,
    /// Mean exact match over all questions.
    pub em: f64,
    /// Fraction of questions whose unified retrieval contained a gold.
    pub r_at_k: f64,
    /// Exact match restricted to the retrieval-hit subset.
    pub oracle_subset_em: f64,
    /// Size of that subset; `oracle_subset_em` is 0 when it is empty.
    pub oracle_subset_count: usize,
    pub failures: usize,
}

/// Full evaluation output for one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: ChainReport,
    pub records: Vec<EvalRecord>,
}

/// Typo noise channel: per character, with probability `rate`, apply one
/// uniformly chosen edit (substitute, delete, insert, swap-with-next).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Expected corruptions per character, in [0, 0.5].
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Typo,
}

impl NoiseSpec {
    pub fn typo(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&rate) {
            return Err(Error::Config(format!(
                "noise rate must lie in [0, 0.5], got {rate}"
            )));
        }
        Ok(NoiseSpec {
            kind: NoiseKind::Typo,
            rate,
            seed,
        })
    }
}

/// Apply seeded typo noise to a question. Rate 0 is the identity; a fixed
/// (input, spec) pair corrupts identically on every run and platform.
pub fn corrupt(question: &str, spec: &NoiseSpec) -> String {
    if spec.rate == 0.0 {
        return question.to_string();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chars: Vec<char> = question.chars().collect();
    let mut out = String::with_capacity(question.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if rng.gen_bool(spec.rate) {
            match rng.gen_range(0..4u8) {
                // substitute with a random lowercase letter
                0 => out.push(random_letter(&mut rng)),
                // delete
                1 => {}
                // insert a random letter before the original character
                2 => {
                    out.push(random_letter(&mut rng));
                    out.push(c);
                }
                // swap with the following character (identity at the end)
                _ => {
                    if i + 1 < chars.len() {
                        out.push(chars[i + 1]);
                        out.push(c);
                        i += 1;
                    } else {
                        out.push(c);
                    }
                }
            }
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

fn random_letter(rng: &mut ChaCha8Rng) -> char {
    (b'a' + rng.gen_range(0..26u8)) as char
}

/// Evaluate one question against an engine.
fn evaluate_one(engine: &Engine, question: &Question, noise: Option<&NoiseSpec>) -> EvalRecord {
    let text = match noise {
        Some(spec) => corrupt(&question.text, spec),
        None => question.text.clone(),
    };

    let unified = engine.unified_retrieve(&text);
    let normalized_golds: Vec<String> = question
        .answers
        .iter()
        .map(|g| normalize_answer(g))
        .collect();
    let retrieval_hit = unified.passages.iter().any(|(p, _)| {
        let body = normalize_answer(&p.body);
        normalized_golds
            .iter()
            .any(|g| !g.is_empty() && body.contains(g.as_str()))
    });

    let selection = if engine.config().mode == SelectionMode::Oracle {
        engine.collect(&question.id, &text).and_then(|collected| {
            let trace = Trace {
                failures: collected.failures.clone(),
                ..Trace::default()
            };
            oracle_select(&collected.pool, engine.chain(), &question.answers, trace)
        })
    } else {
        engine.answer(&question.id, &text)
    };

    match selection {
        Ok(result) => EvalRecord {
            question_id: question.id.clone(),
            chain: engine.chain().to_vec(),
            em: exact_match(&result.final_answer, &question.answers),
            retrieval_hit,
            selection: Some(result),
            failure: None,
        },
        Err(e) => EvalRecord {
            question_id: question.id.clone(),
            chain: engine.chain().to_vec(),
            em: 0,
            retrieval_hit,
            selection: None,
            failure: Some(e.to_string()),
        },
    }
}

/// Evaluate a dataset against one engine. Per-question work runs in
/// parallel; aggregation is a deterministic fold in dataset order.
pub fn run_eval(questions: &[Question], engine: &Engine, noise: Option<&NoiseSpec>) -> EvalOutcome {
    let records = par::map_vec(questions, |q| evaluate_one(engine, q, noise));

    let n = records.len();
    let em_sum: u64 = records.iter().map(|r| r.em as u64).sum();
    let hits: Vec<&EvalRecord> = records.iter().filter(|r| r.retrieval_hit).collect();
    let oracle_em_sum: u64 = hits.iter().map(|r| r.em as u64).sum();
    let failures = records.iter().filter(|r| r.failure.is_some()).count();

    let ratio = |num: u64, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let report = ChainReport {
        chain: engine.chain().to_vec(),
        questions: n,
        em: ratio(em_sum, n),
        r_at_k: ratio(hits.len() as u64, n),
        oracle_subset_em: ratio(oracle_em_sum, hits.len()),
        oracle_subset_count: hits.len(),
        failures,
    };
    EvalOutcome { report, records }
}

/// Monotonicity study across an inclusion sequence of chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub chains: Vec<ChainReport>,
    /// EM non-decreasing along the chain sequence.
    pub monotone: bool,
    pub mode: SelectionMode,
    pub fixed_beams: bool,
}

/// Validate that each chain's source set is contained in the next one's.
pub fn validate_inclusion_sequence(chains: &[Vec<SourceId>]) -> Result<()> {
    if chains.is_empty() {
        return Err(Error::Config(
            "monotonicity study needs at least one chain".into(),
        ));
    }
    for window in chains.windows(2) {
        let prev: BTreeSet<&SourceId> = window[0].iter().collect();
        let next: BTreeSet<&SourceId> = window[1].iter().collect();
        if !prev.is_subset(&next) {
            return Err(Error::Config(format!(
                "chains must form an inclusion sequence: [{}] is not a subset of [{}]",
                window[0]
                    .iter()
                    .map(SourceId::as_str)
                    .collect::<Vec<_>>()
                    .join(", "),
                window[1]
                    .iter()
                    .map(SourceId::as_str)
                    .collect::<Vec<_>>()
                    .join(", "),
            )));
        }
    }
    Ok(())
}

/// Run the evaluation once per chain and check that EM never decreases.
///
/// With `fixed_beams`, the proportional allocation is computed once over
/// the final (largest) chain and every sub-chain reuses its entries, so a
/// sub-chain's candidate pool is a sub-multiset of its successors'. Without
/// it, each chain re-normalizes the budget over its own sources.
pub fn monotonicity_harness(
    questions: &[Question],
    deployment: &Deployment,
    chains: &[Vec<SourceId>],
    fixed_beams: bool,
    noise: Option<&NoiseSpec>,
) -> Result<MonotonicityReport> {
    validate_inclusion_sequence(chains)?;

    let override_alloc = if fixed_beams {
        let last = chains.last().expect("validated non-empty");
        let profiles: Vec<_> = last
            .iter()
            .map(|s| {
                deployment
                    .profiles
                    .get(s)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("source `{s}` has no profile")))
            })
            .collect::<Result<_>>()?;
        Some(allocate_budget(&profiles, deployment.config.budget)?)
    } else {
        None
    };

    let mut reports = Vec::with_capacity(chains.len());
    for chain in chains {
        let mut config = deployment.config.clone();
        config.allocation_override = override_alloc.clone();
        let engine = deployment.engine_with_config(chain, config)?;
        reports.push(run_eval(questions, &engine, noise).report);
    }

    let monotone = reports.windows(2).all(|w| w[0].em <= w[1].em);
    Ok(MonotonicityReport {
        chains: reports,
        monotone,
        mode: deployment.config.mode,
        fixed_beams,
    })
}

fn chain_label(chain: &[SourceId]) -> String {
    chain
        .iter()
        .map(SourceId::as_str)
        .collect::<Vec<_>>()
        .join("+")
}

/// Plain-text table with one column per chain and one row per metric.
pub fn render_chain_table(chains: &[ChainReport]) -> String {
    let mut out = String::new();
    let labels: Vec<String> = chains.iter().map(|c| chain_label(&c.chain)).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(4).max(8);

    let _ = write!(out, "{:<18}", "metric");
    for label in &labels {
        let _ = write!(out, " {label:>width$}");
    }
    out.push('\n');

    let rows: Vec<(&str, Vec<f64>)> = vec![
        ("total_em", chains.iter().map(|c| c.em).collect()),
        ("r_at_k", chains.iter().map(|c| c.r_at_k).collect()),
        (
            "oracle_ret_em",
            chains.iter().map(|c| c.oracle_subset_em).collect(),
        ),
    ];
    for (name, values) in rows {
        let _ = write!(out, "{name:<18}");
        for v in values {
            let _ = write!(out, " {v:>width$.3}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<18}", "questions");
    for c in chains {
        let _ = write!(out, " {:>width$}", c.questions);
    }
    out.push('\n');
    out
}

/// The chain table plus the monotonicity verdict line.
pub fn render_text_table(report: &MonotonicityReport) -> String {
    let mut out = render_chain_table(&report.chains);
    let _ = writeln!(out, "monotone: {}", report.monotone);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    #[test]
    fn exact_match_worked_examples() {
        assert_eq!(exact_match("James Cameron", &["james cameron.".into()]), 1);
        assert_eq!(
            exact_match("the James Cameron", &["James Cameron".into()]),
            1
        );
        assert_eq!(exact_match("Cameron", &["James Cameron".into()]), 0);
    }

    #[test]
    fn exact_match_is_symmetric_under_normalization() {
        assert_eq!(exact_match("a dog", &["dog".into()]), 1);
        assert_eq!(exact_match("dog", &["the dog!".into()]), 1);
    }

    #[test]
    fn dataset_parsing_and_validation() {
        let good = "{\"id\":\"q1\",\"question\":\"who?\",\"answers\":[\"x\"]}\n";
        let questions = parse_dataset(BufReader::new(good.as_bytes()), "mem").unwrap();
        assert_eq!(questions.len(), 1);
        assert_eq!(questions[0].text, "who?");

        let no_answers = "{\"id\":\"q1\",\"question\":\"who?\",\"answers\":[]}\n";
        assert!(parse_dataset(BufReader::new(no_answers.as_bytes()), "mem").is_err());

        let dup = "{\"id\":\"q1\",\"question\":\"a\",\"answers\":[\"x\"]}\n{\"id\":\"q1\",\"question\":\"b\",\"answers\":[\"y\"]}\n";
        let err = parse_dataset(BufReader::new(dup.as_bytes()), "mem").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn corrupt_rate_zero_is_identity() {
        let spec = NoiseSpec::typo(0.0, 7).unwrap();
        let q = "who directed avatar";
        assert_eq!(corrupt(q, &spec), q);
    }

    #[test]
    fn corrupt_is_deterministic_for_fixed_seed() {
        let spec = NoiseSpec::typo(0.3, 42).unwrap();
        let q = "who directed the film avatar";
        assert_eq!(corrupt(q, &spec), corrupt(q, &spec));
        let other_seed = NoiseSpec::typo(0.3, 43).unwrap();
        // Different seeds should (for this input) differ.
        assert_ne!(corrupt(q, &spec), corrupt(q, &other_seed));
    }

    #[test]
    fn corrupt_golden_fixture() {
        // Recorded from the first run and frozen; any change to the edit
        // procedure or RNG stream shows up here. Seed 42 happens to draw no
        // edits on this string at rate 0.1, so two editing seeds are pinned
        // alongside it.
        for (seed, expected) in [
            (42, "who directed avatar"),
            (7, "who diected avatah"),
            (13, "wo directed vatar"),
        ] {
            let spec = NoiseSpec::typo(0.1, seed).unwrap();
            assert_eq!(
                corrupt("who directed avatar", &spec),
                expected,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn corrupt_rate_bounds_validated() {
        assert!(NoiseSpec::typo(0.6, 1).is_err());
        assert!(NoiseSpec::typo(-0.1, 1).is_err());
    }

    #[test]
    fn corruption_length_stays_within_statistical_bounds() {
        // |corrupt(q)| within [floor(n(1-1.5r))-2, ceil(n(1+1.5r))+2] for at
        // least 99% of seeds, checked over 1000 seeds at rates <= 0.2.
        let q = "who directed the film avatar in 2009";
        let n = q.chars().count() as f64;
        for rate in [0.1, 0.2] {
            let lo = (n * (1.0 - rate * 1.5)).floor() - 2.0;
            let hi = (n * (1.0 + rate * 1.5)).ceil() + 2.0;
            let mut inside = 0u32;
            for seed in 0..1000 {
                let spec = NoiseSpec::typo(rate, seed).unwrap();
                let len = corrupt(q, &spec).chars().count() as f64;
                if (lo..=hi).contains(&len) {
                    inside += 1;
                }
            }
            assert!(
                inside >= 990,
                "rate {rate}: only {inside}/1000 inside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn inclusion_sequence_validation() {
        let t = SourceId::new("text").unwrap();
        let tb = SourceId::new("table").unwrap();
        let kb = SourceId::new("kb").unwrap();
        let good = vec![
            vec![t.clone()],
            vec![t.clone(), tb.clone()],
            vec![t.clone(), tb.clone(), kb.clone()],
        ];
        assert!(validate_inclusion_sequence(&good).is_ok());

        let bad = vec![vec![t.clone(), tb.clone()], vec![t.clone(), kb.clone()]];
        let err = validate_inclusion_sequence(&bad).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("inclusion"));

        assert!(validate_inclusion_sequence(&[]).is_err());

        // A single chain is trivially an inclusion sequence.
        assert!(validate_inclusion_sequence(&[vec![t]]).is_ok());
    }
}
