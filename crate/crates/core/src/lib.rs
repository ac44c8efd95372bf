//! Federated question answering over heterogeneous knowledge sources.
//!
//! Raw knowledge (free text, table rows, KB triples) is ingested into
//! per-source corpora; structured records are linearized into plain-text
//! passages on load. Each active source is served by a *specialist*: a
//! retriever scoped to that source plus a reader that proposes ranked
//! answer candidates under a beam budget split proportionally to the
//! specialist's dev-set accuracy. A *judge* then re-scores every candidate
//! with length-normalized sequence probabilities under two contexts — the
//! unified retrieval over all active sources and the candidate's own
//! specialist retrieval — and selects the answer with the highest averaged
//! score.
//!
//! The [`eval`] module ships the measurement harness: exact-match scoring,
//! retrieval diagnosis (recall at k, EM restricted to retrieval hits), a
//! monotonicity study over growing source chains, and seeded typo
//! corruption for robustness runs. The [`service`] module exposes the same
//! pipeline over a wire protocol so specialists can run as separate
//! processes.
//!
//! Batch paths (per-question evaluation, per-source collection,
//! per-candidate scoring) run data-parallel on rayon when the `parallel`
//! feature is enabled (the default) and fall back to sequential iteration
//! without it. Results are identical either way.

pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod judge;
pub mod knowledge;
pub mod par;
pub mod retrieval;
pub mod scoring;
pub mod service;
pub mod specialist;
pub mod text;

pub use error::{Error, Result};
