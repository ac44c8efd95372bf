//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can
//! map them onto exit codes: configuration problems are detected before any
//! work starts, everything else is a pipeline failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown sources, malformed chains, bad
    /// parameter ranges. Raised before any I/O or computation.
    #[error("config error: {0}")]
    Config(String),

    /// A corpus, dataset, or fixture file could not be ingested.
    #[error("ingest error in {path}, line {line}: {message}")]
    Ingest {
        path: String,
        line: usize,
        message: String,
    },

    /// A structured record failed validation.
    #[error("invalid {kind}: empty field `{field}`")]
    EmptyField {
        kind: &'static str,
        field: &'static str,
    },

    /// Table row with mismatched header/cell counts.
    #[error("table row for `{page_title}`: {headers} headers but {cells} cells")]
    RowShape {
        page_title: String,
        headers: usize,
        cells: usize,
    },

    /// Passage ids must be unique across every corpus in a deployment.
    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),

    /// Budget allocation needs at least one specialist with dev EM > 0.
    #[error("no informative profiles: every dev EM is zero")]
    NoInformativeProfiles,

    /// The judge was handed an empty (or fully unscorable) candidate pool.
    #[error("no candidates to judge: {0}")]
    NoCandidates(String),

    /// An answer produced zero tokens under the scoring tokenizer.
    #[error("unscorable candidate: `{0}` tokenizes to nothing")]
    Unscorable(String),

    /// Every source in the chain failed to contribute candidates.
    #[error("all sources failed: {0}")]
    AllSourcesFailed(String),

    /// A persisted index has an unknown format or version.
    #[error("unsupported index file: {0}")]
    IndexFormat(String),

    /// Wire protocol or transport failure.
    #[error("service error: {0}")]
    Service(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that indicate a bad configuration rather than a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
