//! Wire message schemas.
//!
//! Plain JSON bodies with snake_case fields mirroring the domain types,
//! plus a protocol version so specialists written against other stacks can
//! negotiate. Scores ride along for diagnostics; the coordinator re-scores
//! candidates itself from the returned context passage ids.

use serde::{Deserialize, Serialize};

use crate::knowledge::SourceId;

pub const PROTOCOL_VERSION: u32 = 1;

/// Coordinator -> specialist.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRequest {
    pub protocol_version: u32,
    pub question_id: String,
    pub question: String,
    /// Beam size allocated to this source.
    pub beam: u32,
    /// Retrieval depth for the specialist context.
    pub retrieval_k: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireCandidate {
    pub answer: String,
    pub score: f64,
}

/// Specialist -> coordinator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub protocol_version: u32,
    pub source: SourceId,
    /// Ranked, scores non-increasing, at most `beam` entries.
    pub candidates: Vec<WireCandidate>,
    /// Ids of the passages the specialist retrieved, in rank order.
    pub context_passage_ids: Vec<String>,
}

/// Structured error body returned with a non-200 status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorBody {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error body serializes")
    }
}

/// Client -> coordinator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub question: String,
    #[serde(default)]
    pub question_id: Option<String>,
}
