//! Deterministic synthetic fixtures for evaluation, tests, and benches.
//!
//! The fixtures construct small worlds where the pipeline's behavior is
//! fully analyzable: every question has a unique entity token, every
//! answer is a unique single token, and passage bodies control token
//! frequencies so the reference scorer ranks candidates the way each
//! scenario needs.
//!
//! [`standard`] builds a mixed workload over three sources (`text`,
//! `table`, `kb`) with four behavior groups:
//!
//! * groups 0–5: cleanly supported questions every mode answers correctly;
//! * groups 6–7: the kb specialist confidently proposes a wrong answer
//!   whose support never reaches the unified context, so ranking by the
//!   specialist score alone fails while the unified and averaged scores
//!   recover;
//! * group 8: a wrong answer with slightly stronger unified support but
//!   negligible specialist support, so ranking by the unified score alone
//!   fails while the specialist and averaged scores recover;
//! * group 9: questions only the kb source can answer, so coverage grows
//!   as sources are added.
//!
//! [`adversarial`] makes every question a groups-6/7 case: the added
//! source only ever contributes confident wrong answers.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::engine::{Deployment, EngineConfig};
use crate::eval::Question;
use crate::judge::SelectionMode;
use crate::knowledge::{Corpus, Passage, SourceId};
use crate::scoring::ScoringConfig;
use crate::specialist::{
    ExtractiveReader, FixtureReader, FixtureRecord, ReaderCandidate, SpecialistProfile,
    SpecialistReader,
};

const ATTRIBUTES: [&str; 5] = ["color", "size", "shape", "rank", "grade"];

/// A self-contained synthetic world: corpora, questions, scripted reader
/// outputs, profiles, and the engine configuration the scenarios were
/// calibrated for.
pub struct SyntheticFixture {
    pub questions: Vec<Question>,
    pub corpora: BTreeMap<SourceId, Corpus>,
    pub reader_records: Vec<FixtureRecord>,
    pub profiles: BTreeMap<SourceId, SpecialistProfile>,
    pub config: EngineConfig,
    /// The inclusion sequence text -> text+table -> text+table+kb.
    pub chains: Vec<Vec<SourceId>>,
}

impl SyntheticFixture {
    pub fn full_chain(&self) -> &[SourceId] {
        self.chains.last().expect("fixtures always carry chains")
    }

    /// Materialize the fixture as files (corpora, dataset, reader fixture,
    /// run config) and return the config path. The corpora are written as
    /// plain text records; bodies are already linearized.
    pub fn write_to_dir(&self, dir: &std::path::Path) -> crate::Result<std::path::PathBuf> {
        use std::io::Write;

        let mut source_configs = Vec::new();
        let readers_path = dir.join("readers.jsonl");
        let mut readers_file = std::fs::File::create(&readers_path)?;
        for record in &self.reader_records {
            serde_json::to_writer(&mut readers_file, record).map_err(to_io)?;
            readers_file.write_all(b"\n")?;
        }

        for (source, corpus) in &self.corpora {
            let corpus_path = dir.join(format!("corpus_{source}.jsonl"));
            let mut file = std::fs::File::create(&corpus_path)?;
            for passage in corpus.passages() {
                let record = serde_json::json!({
                    "kind": "text",
                    "id": passage.id,
                    "title": passage.title,
                    "body": passage.body,
                });
                serde_json::to_writer(&mut file, &record).map_err(to_io)?;
                file.write_all(b"\n")?;
            }
            source_configs.push(crate::config::SourceConfig {
                name: source.as_str().to_string(),
                corpus: corpus_path,
                dev_em: self.profiles[source].dev_em,
                k: self.config.specialist_k.get(source).copied(),
                reader: crate::config::ReaderSpec::Fixture {
                    path: readers_path.clone(),
                },
            });
        }

        let dataset_path = dir.join("dataset.jsonl");
        let mut dataset_file = std::fs::File::create(&dataset_path)?;
        for question in &self.questions {
            serde_json::to_writer(&mut dataset_file, question).map_err(to_io)?;
            dataset_file.write_all(b"\n")?;
        }

        let config = crate::config::RunConfig {
            sources: source_configs,
            chain: self
                .full_chain()
                .iter()
                .map(|s| s.as_str().to_string())
                .collect(),
            dataset: Some(dataset_path),
            budget: self.config.budget,
            mode: self.config.mode,
            retrieval_k: self.config.unified_k,
            alpha: self.config.scoring.alpha,
            vocab_cap: self.config.scoring.vocab_cap,
            dedupe: self.config.dedupe,
            fixed_beams: false,
            beam_cap: self.config.beam_cap,
            shared_reader: false,
            noise: None,
            output: None,
            index_dir: None,
        };
        let config_path = dir.join("config.json");
        std::fs::write(
            &config_path,
            serde_json::to_string_pretty(&config).map_err(to_io)?,
        )?;
        Ok(config_path)
    }

    /// Deployment with the scripted fixture readers.
    pub fn deployment(&self) -> Deployment {
        let reader: Arc<dyn SpecialistReader> = Arc::new(
            FixtureReader::from_records(self.reader_records.clone())
                .expect("fixture records are valid by construction"),
        );
        self.deployment_with_reader(|_| Arc::clone(&reader))
    }

    /// Deployment with extractive readers over the same corpora. Spans are
    /// capped at two tokens; answers in these fixtures are single tokens.
    pub fn extractive_deployment(&self) -> Deployment {
        let reader: Arc<dyn SpecialistReader> = Arc::new(ExtractiveReader {
            max_span_tokens: 2,
            scoring: self.config.scoring.clone(),
        });
        self.deployment_with_reader(|_| Arc::clone(&reader))
    }

    fn deployment_with_reader(
        &self,
        make: impl Fn(&SourceId) -> Arc<dyn SpecialistReader>,
    ) -> Deployment {
        Deployment {
            corpora: self.corpora.clone(),
            readers: self.corpora.keys().map(|s| (s.clone(), make(s))).collect(),
            profiles: self.profiles.clone(),
            config: self.config.clone(),
        }
    }
}

fn to_io(e: serde_json::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

fn src(name: &str) -> SourceId {
    SourceId::new(name).unwrap()
}

fn text_passage(id: String, source: &SourceId, body: String) -> Passage {
    Passage {
        id,
        source: source.clone(),
        title: String::new(),
        body,
        provenance: None,
    }
}

fn question_text(i: usize) -> String {
    format!(
        "what is the {} of entity{i:03}",
        ATTRIBUTES[i % ATTRIBUTES.len()]
    )
}

fn answer_token(i: usize) -> String {
    format!("trueval{i:03}")
}

fn wrong_token(i: usize) -> String {
    format!("wrongval{i:03}")
}

fn decoy_token(i: usize) -> String {
    format!("decoyval{i:03}")
}

/// Supporting passage: the answer token appears seven times, never
/// adjacent to itself, next to the question's attribute and entity terms.
/// Seven isolated repetitions keep the answer's unigram probability above
/// every two-token span of the passage, so extraction ranks it first.
fn support_body(i: usize) -> String {
    let attr = ATTRIBUTES[i % ATTRIBUTES.len()];
    let r = answer_token(i);
    format!(
        "{attr} of entity{i:03} is {r}. so {r} indeed {r} truly {r} also {r} more {r} still {r}"
    )
}

/// Off-support passage: ten isolated repetitions of the wrong answer,
/// sharing only the entity term with the question. Strong evidence inside
/// its own source, weak lexical match for the unified retriever.
fn garbage_body(i: usize) -> String {
    let w = wrong_token(i);
    format!(
        "entity{i:03} {w} also {w} again {w} more {w} plus {w} final {w} extra {w} over {w} under {w} beside {w}"
    )
}

/// Ambiguous passage: shares the attribute and entity terms (so the
/// unified retriever picks it up) and repeats the wrong answer eight
/// times, one more than the support passage repeats the right one.
fn ambiguous_body(i: usize) -> String {
    let attr = ATTRIBUTES[i % ATTRIBUTES.len()];
    let w = wrong_token(i);
    format!(
        "{attr} of entity{i:03} has {w} with {w} near {w} under {w} over {w} beside {w} minus {w} plus {w}"
    )
}

fn candidates(list: &[(&str, f64)]) -> Vec<ReaderCandidate> {
    list.iter()
        .map(|(a, s)| ReaderCandidate {
            answer: a.to_string(),
            score: *s,
        })
        .collect()
}

fn fixture_config() -> EngineConfig {
    let sources = [src("text"), src("table"), src("kb")];
    EngineConfig {
        budget: 9,
        mode: SelectionMode::Average,
        unified_k: 2,
        specialist_k: sources.iter().map(|s| (s.clone(), 1)).collect(),
        scoring: ScoringConfig::default(),
        dedupe: true,
        beam_cap: None,
        allocation_override: None,
    }
}

fn fixture_profiles() -> BTreeMap<SourceId, SpecialistProfile> {
    [("text", 0.5), ("table", 0.3), ("kb", 0.2)]
        .into_iter()
        .map(|(s, em)| (src(s), SpecialistProfile::new(src(s), em).unwrap()))
        .collect()
}

fn fixture_chains() -> Vec<Vec<SourceId>> {
    vec![
        vec![src("text")],
        vec![src("text"), src("table")],
        vec![src("text"), src("table"), src("kb")],
    ]
}

/// The standard mixed fixture; `n` should be a multiple of 10 so the
/// behavior groups split evenly (the canonical size is 200).
pub fn standard(n: usize) -> SyntheticFixture {
    let text = src("text");
    let table = src("table");
    let kb = src("kb");

    let mut questions = Vec::with_capacity(n);
    let mut text_passages = Vec::new();
    let mut table_passages = Vec::new();
    let mut kb_passages = Vec::new();
    let mut records = Vec::new();

    for i in 0..n {
        let qid = format!("q{i:03}");
        let r = answer_token(i);
        let w = wrong_token(i);
        let decoy = decoy_token(i);
        questions.push(Question {
            id: qid.clone(),
            text: question_text(i),
            answers: vec![r.clone()],
        });

        match i % 10 {
            // Clean coverage from text; table doubles up on even questions.
            0..=5 => {
                text_passages.push(text_passage(format!("t{i:03}"), &text, support_body(i)));
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: text.clone(),
                    candidates: candidates(&[(&r, 0.9), (&decoy, 0.3)]),
                });
                if i % 2 == 0 {
                    table_passages.push(text_passage(format!("tb{i:03}"), &table, support_body(i)));
                    records.push(FixtureRecord {
                        question_id: qid.clone(),
                        source: table.clone(),
                        candidates: candidates(&[(&r, 0.85)]),
                    });
                }
            }
            // Confident wrong answer from kb whose evidence stays out of
            // the unified context.
            6 | 7 => {
                text_passages.push(text_passage(format!("t{i:03}"), &text, support_body(i)));
                table_passages.push(text_passage(format!("tb{i:03}"), &table, support_body(i)));
                kb_passages.push(text_passage(format!("kbg{i:03}"), &kb, garbage_body(i)));
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: text.clone(),
                    candidates: candidates(&[(&r, 0.9), (&decoy, 0.3)]),
                });
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: table.clone(),
                    candidates: candidates(&[(&r, 0.85)]),
                });
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: kb.clone(),
                    candidates: candidates(&[(&w, 0.95)]),
                });
            }
            // Wrong answer with the stronger unified support but negligible
            // specialist support: it sneaks in as the table reader's
            // second-beam candidate while its evidence lives in kb.
            8 => {
                table_passages.push(text_passage(format!("tb{i:03}"), &table, support_body(i)));
                kb_passages.push(text_passage(format!("kba{i:03}"), &kb, ambiguous_body(i)));
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: table.clone(),
                    candidates: candidates(&[(&r, 0.85), (&w, 0.8)]),
                });
            }
            // Only kb can answer these.
            _ => {
                kb_passages.push(text_passage(format!("kb{i:03}"), &kb, support_body(i)));
                records.push(FixtureRecord {
                    question_id: qid.clone(),
                    source: kb.clone(),
                    candidates: candidates(&[(&r, 0.9)]),
                });
            }
        }
    }

    let corpora = [
        (text.clone(), Corpus::new(text, text_passages).unwrap()),
        (table.clone(), Corpus::new(table, table_passages).unwrap()),
        (kb.clone(), Corpus::new(kb, kb_passages).unwrap()),
    ]
    .into_iter()
    .collect();

    SyntheticFixture {
        questions,
        corpora,
        reader_records: records,
        profiles: fixture_profiles(),
        config: fixture_config(),
        chains: fixture_chains(),
    }
}

/// The adversarial fixture: text and table support every question's right
/// answer, while kb contributes only confident wrong answers backed by
/// passages the unified retriever ranks below the real support.
pub fn adversarial(n: usize) -> SyntheticFixture {
    let text = src("text");
    let table = src("table");
    let kb = src("kb");

    let mut questions = Vec::with_capacity(n);
    let mut text_passages = Vec::new();
    let mut table_passages = Vec::new();
    let mut kb_passages = Vec::new();
    let mut records = Vec::new();

    for i in 0..n {
        let qid = format!("q{i:03}");
        let r = answer_token(i);
        let w = wrong_token(i);
        questions.push(Question {
            id: qid.clone(),
            text: question_text(i),
            answers: vec![r.clone()],
        });
        text_passages.push(text_passage(format!("t{i:03}"), &text, support_body(i)));
        table_passages.push(text_passage(format!("tb{i:03}"), &table, support_body(i)));
        kb_passages.push(text_passage(format!("kbg{i:03}"), &kb, garbage_body(i)));
        records.push(FixtureRecord {
            question_id: qid.clone(),
            source: text.clone(),
            candidates: candidates(&[(&r, 0.9)]),
        });
        records.push(FixtureRecord {
            question_id: qid.clone(),
            source: table.clone(),
            candidates: candidates(&[(&r, 0.85)]),
        });
        records.push(FixtureRecord {
            question_id: qid,
            source: kb.clone(),
            candidates: candidates(&[(&w, 0.95)]),
        });
    }

    let corpora = [
        (text.clone(), Corpus::new(text, text_passages).unwrap()),
        (table.clone(), Corpus::new(table, table_passages).unwrap()),
        (kb.clone(), Corpus::new(kb, kb_passages).unwrap()),
    ]
    .into_iter()
    .collect();

    SyntheticFixture {
        questions,
        corpora,
        reader_records: records,
        profiles: fixture_profiles(),
        config: fixture_config(),
        chains: fixture_chains(),
    }
}
