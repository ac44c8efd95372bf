//! Run configuration: the JSON document the CLI and servers consume.
//!
//! A config names the sources (corpus path, dev EM, retrieval depth,
//! reader), the active chain, and the pipeline tunables. Validation runs
//! before any I/O so a bad config never partially writes outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Deployment, EngineConfig, DEFAULT_BUDGET, DEFAULT_RETRIEVAL_K};
use crate::error::{Error, Result};
use crate::eval::NoiseSpec;
use crate::judge::SelectionMode;
use crate::knowledge::{load_corpus, SourceId};
use crate::scoring::ScoringConfig;
use crate::specialist::{ExtractiveReader, FixtureReader, SpecialistProfile, SpecialistReader};

/// How a source's reader is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReaderSpec {
    /// Replay candidates from a fixture file.
    Fixture { path: PathBuf },
    /// Extract spans from the retrieved context.
    Extractive {
        #[serde(default = "default_max_span_tokens")]
        max_span_tokens: usize,
    },
}

fn default_max_span_tokens() -> usize {
    3
}

/// One knowledge source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    pub name: String,
    pub corpus: PathBuf,
    /// Dev-set exact match of this source's reader, for budget allocation.
    pub dev_em: f64,
    /// Specialist retrieval depth; defaults to `retrieval_k`.
    #[serde(default)]
    pub k: Option<u32>,
    pub reader: ReaderSpec,
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub sources: Vec<SourceConfig>,
    /// Active sources in order; must be a subset of `sources`.
    pub chain: Vec<String>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_budget")]
    pub budget: u32,
    #[serde(default = "default_mode")]
    pub mode: SelectionMode,
    /// Unified retrieval depth (and the default specialist depth).
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub vocab_cap: Option<usize>,
    #[serde(default = "default_true")]
    pub dedupe: bool,
    #[serde(default)]
    pub fixed_beams: bool,
    #[serde(default)]
    pub beam_cap: Option<u32>,
    /// Share one reader instance across every source instead of building
    /// one per source. The shared reader is built from the first source's
    /// spec; with fixture readers the file then carries entries for every
    /// source.
    #[serde(default)]
    pub shared_reader: bool,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Where `index` persists and the other commands look for indices.
    #[serde(default)]
    pub index_dir: Option<PathBuf>,
}

fn default_budget() -> u32 {
    DEFAULT_BUDGET
}

fn default_mode() -> SelectionMode {
    SelectionMode::Average
}

fn default_retrieval_k() -> u32 {
    DEFAULT_RETRIEVAL_K
}

fn default_alpha() -> f64 {
    crate::scoring::DEFAULT_ALPHA
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Check internal consistency without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for source in &self.sources {
            SourceId::new(&source.name)?;
            if !names.insert(source.name.as_str()) {
                return Err(Error::Config(format!("duplicate source `{}`", source.name)));
            }
            if !(0.0..=1.0).contains(&source.dev_em) {
                return Err(Error::Config(format!(
                    "dev_em for `{}` must lie in [0, 1]",
                    source.name
                )));
            }
        }
        if self.chain.is_empty() {
            return Err(Error::Config("chain must list at least one source".into()));
        }
        for name in &self.chain {
            if !names.contains(name.as_str()) {
                return Err(Error::Config(format!(
                    "chain references `{name}` which is not a configured source"
                )));
            }
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.retrieval_k == 0 {
            return Err(Error::Config("retrieval_k must be at least 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if let Some(noise) = &self.noise {
            NoiseSpec::typo(noise.rate, noise.seed)?;
        }
        Ok(())
    }

    pub fn chain_ids(&self) -> Result<Vec<SourceId>> {
        self.chain.iter().map(SourceId::new).collect()
    }

    /// The chains for a monotonicity study: prefixes of the configured
    /// chain (`[a]`, `[a, b]`, `[a, b, c]`, ...).
    pub fn prefix_chains(&self) -> Result<Vec<Vec<SourceId>>> {
        let chain = self.chain_ids()?;
        Ok((1..=chain.len()).map(|n| chain[..n].to_vec()).collect())
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let mut specialist_k = BTreeMap::new();
        for source in &self.sources {
            if let Some(k) = source.k {
                specialist_k.insert(SourceId::new(&source.name)?, k);
            }
        }
        Ok(EngineConfig {
            budget: self.budget,
            mode: self.mode,
            unified_k: self.retrieval_k,
            specialist_k,
            scoring: ScoringConfig {
                alpha: self.alpha,
                vocab_cap: self.vocab_cap,
            },
            dedupe: self.dedupe,
            beam_cap: self.beam_cap,
            allocation_override: None,
        })
    }

    fn build_reader(&self, spec: &ReaderSpec) -> Result<Arc<dyn SpecialistReader>> {
        Ok(match spec {
            ReaderSpec::Fixture { path } => Arc::new(FixtureReader::from_path(path)?),
            ReaderSpec::Extractive { max_span_tokens } => Arc::new(ExtractiveReader {
                max_span_tokens: (*max_span_tokens).max(1),
                scoring: ScoringConfig {
                    alpha: self.alpha,
                    vocab_cap: self.vocab_cap,
                },
            }),
        })
    }

    /// Load corpora and build readers and profiles.
    pub fn build_deployment(&self) -> Result<Deployment> {
        self.validate()?;
        let mut corpora = BTreeMap::new();
        let mut readers: BTreeMap<SourceId, Arc<dyn SpecialistReader>> = BTreeMap::new();
        let mut profiles = BTreeMap::new();

        let shared: Option<Arc<dyn SpecialistReader>> = if self.shared_reader {
            Some(self.build_reader(&self.sources[0].reader)?)
        } else {
            None
        };

        for source in &self.sources {
            let id = SourceId::new(&source.name)?;
            corpora.insert(id.clone(), load_corpus(&source.corpus, &id)?);
            let reader = match &shared {
                Some(reader) => Arc::clone(reader),
                None => self.build_reader(&source.reader)?,
            };
            readers.insert(id.clone(), reader);
            profiles.insert(
                id.clone(),
                SpecialistProfile::new(id.clone(), source.dev_em)?,
            );
        }

        Ok(Deployment {
            corpora,
            readers,
            profiles,
            config: self.engine_config()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn minimal_config(dir: &Path) -> RunConfig {
        let corpus = write_file(
            dir,
            "text.jsonl",
            "{\"kind\":\"text\",\"id\":\"t1\",\"body\":\"avatar directed by james cameron\"}\n",
        );
        let readers = write_file(
            dir,
            "readers.jsonl",
            "{\"question_id\":\"q1\",\"source\":\"text\",\"candidates\":[{\"answer\":\"james cameron\",\"score\":0.9}]}\n",
        );
        RunConfig {
            sources: vec![SourceConfig {
                name: "text".into(),
                corpus,
                dev_em: 0.5,
                k: Some(5),
                reader: ReaderSpec::Fixture { path: readers },
            }],
            chain: vec!["text".into()],
            dataset: None,
            budget: 9,
            mode: SelectionMode::Average,
            retrieval_k: 10,
            alpha: 0.1,
            vocab_cap: None,
            dedupe: true,
            fixed_beams: false,
            beam_cap: None,
            shared_reader: false,
            noise: None,
            output: None,
            index_dir: None,
        }
    }

    #[test]
    fn valid_config_builds_a_working_deployment() {
        let dir = tempfile::tempdir().unwrap();
        let config = minimal_config(dir.path());
        let deployment = config.build_deployment().unwrap();
        let engine = deployment
            .engine_for_chain(&config.chain_ids().unwrap())
            .unwrap();
        let result = engine.answer("q1", "who directed avatar").unwrap();
        assert_eq!(result.final_answer, "james cameron");
    }

    #[test]
    fn chain_with_unknown_source_is_rejected_before_io() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.chain = vec!["wiki".into()];
        // Delete the corpus file: validation must fail before reading it.
        std::fs::remove_file(&config.sources[0].corpus).unwrap();
        let err = config.build_deployment().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("wiki"));
    }

    #[test]
    fn parameter_ranges_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.budget = 0;
        assert!(config.validate().is_err());

        let mut config = minimal_config(dir.path());
        config.sources[0].dev_em = 1.5;
        assert!(config.validate().is_err());

        let mut config = minimal_config(dir.path());
        config.alpha = 0.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn prefix_chains_form_an_inclusion_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.chain = vec!["text".into()];
        let chains = config.prefix_chains().unwrap();
        assert_eq!(chains.len(), 1);
        crate::eval::validate_inclusion_sequence(&chains).unwrap();
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = minimal_config(dir.path());
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let loaded = RunConfig::from_path(&path).unwrap();
        assert_eq!(loaded.chain, config.chain);
        assert_eq!(loaded.budget, config.budget);
    }

    #[test]
    fn omitted_fields_take_documented_defaults() {
        let sparse = r#"{
            "sources": [{"name":"text","corpus":"x.jsonl","dev_em":0.5,
                         "reader":{"kind":"extractive"}}],
            "chain": ["text"]
        }"#;
        let config: RunConfig = serde_json::from_str(sparse).unwrap();
        assert_eq!(config.budget, 9);
        assert_eq!(config.retrieval_k, 10);
        assert_eq!(config.mode, SelectionMode::Average);
        assert!((config.alpha - 0.1).abs() < 1e-15);
        assert!(config.dedupe);
        assert!(!config.fixed_beams);
        assert!(config.beam_cap.is_none());
    }

    #[test]
    fn shared_reader_serves_every_source_from_one_instance() {
        let dir = tempfile::tempdir().unwrap();
        let text_corpus = write_file(
            dir.path(),
            "shared_text.jsonl",
            "{\"kind\":\"text\",\"id\":\"t1\",\"body\":\"avatar directed by james cameron\"}\n",
        );
        let table_corpus = write_file(
            dir.path(),
            "shared_table.jsonl",
            "{\"kind\":\"table_row\",\"id\":\"r1\",\"page_title\":\"Avatar\",\"headers\":[\"Director\"],\"cells\":[\"James Cameron\"]}\n",
        );
        // One fixture file with entries for both sources.
        let readers = write_file(
            dir.path(),
            "shared_readers.jsonl",
            concat!(
                "{\"question_id\":\"q1\",\"source\":\"text\",\"candidates\":[{\"answer\":\"james cameron\",\"score\":0.9}]}\n",
                "{\"question_id\":\"q1\",\"source\":\"table\",\"candidates\":[{\"answer\":\"james cameron\",\"score\":0.8}]}\n",
            ),
        );
        let mut config = minimal_config(dir.path());
        config.sources = vec![
            SourceConfig {
                name: "text".into(),
                corpus: text_corpus,
                dev_em: 0.5,
                k: None,
                reader: ReaderSpec::Fixture { path: readers },
            },
            SourceConfig {
                name: "table".into(),
                corpus: table_corpus,
                dev_em: 0.3,
                k: None,
                // Ignored in shared mode; the first source's spec wins.
                reader: ReaderSpec::Extractive { max_span_tokens: 2 },
            },
        ];
        config.chain = vec!["text".into(), "table".into()];
        config.shared_reader = true;
        let deployment = config.build_deployment().unwrap();
        let text = SourceId::new("text").unwrap();
        let table = SourceId::new("table").unwrap();
        assert!(Arc::ptr_eq(
            &deployment.readers[&text],
            &deployment.readers[&table]
        ));

        let engine = deployment
            .engine_for_chain(&config.chain_ids().unwrap())
            .unwrap();
        let result = engine.answer("q1", "who directed avatar").unwrap();
        assert_eq!(result.final_answer, "james cameron");
        // Both sources contributed through the shared instance.
        assert_eq!(result.ranked[0].candidate.merged_origins.len(), 2);
    }

    #[test]
    fn per_source_k_flows_into_engine_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = minimal_config(dir.path());
        let engine_config = config.engine_config().unwrap();
        assert_eq!(
            engine_config
                .specialist_k
                .get(&SourceId::new("text").unwrap()),
            Some(&5)
        );
    }
}
