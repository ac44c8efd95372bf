//! Scatter-gather service layer.
//!
//! Specialists run as independent stateless processes answering
//! `POST /v1/candidates`; a coordinator fans a question out to every
//! configured source, reconstructs each specialist context from the
//! returned passage ids (the coordinator holds the corpora), and judges
//! the pool exactly as the in-process pipeline does. A source that fails
//! or times out contributes zero candidates and a trace entry; the final
//! ranking never depends on response arrival order.
//!
//! Endpoints:
//!
//! * specialist: `POST /v1/candidates`, `GET /v1/health`
//! * coordinator: `POST /v1/answer`, `GET /v1/health`

pub mod http;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::{Deployment, EngineConfig};
use crate::error::{Error, Result};
use crate::judge::{judge_pool, SelectionMode, SelectionResult, Trace};
use crate::knowledge::{Corpus, Passage, SourceId};
use crate::retrieval::{build_index, context_from_ids, Index, RetrievedContext};
use crate::scoring::{BigramModel, TokenProbabilityModel};
use crate::specialist::{
    dedupe, BudgetAllocation, CandidateAnswer, ReaderRequest, SourceFailure, SpecialistProfile,
    SpecialistReader,
};

use http::{Handler, HttpRequest, HttpResponse, ServerHandle};
use wire::{AnswerRequest, CandidateRequest, CandidateResponse, ErrorBody, WireCandidate};

/// Network behavior of the coordinator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    /// Per-attempt timeout in milliseconds.
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Maximum concurrent in-flight requests.
    pub max_in_flight: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            timeout_ms: 5_000,
            retries: 1,
            max_in_flight: 8,
        }
    }
}

impl NetConfig {
    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// One specialist vertical behind the wire protocol: a source-scoped index
/// plus a reader. Stateless between requests.
pub struct SpecialistService {
    source: SourceId,
    index: Index,
    reader: Arc<dyn SpecialistReader>,
    retrieval_k_cap: u32,
}

impl SpecialistService {
    pub fn new(
        source: SourceId,
        corpus: &Corpus,
        reader: Arc<dyn SpecialistReader>,
    ) -> Result<Self> {
        let index = build_index([corpus])?;
        Ok(SpecialistService {
            source,
            index,
            reader,
            retrieval_k_cap: 1_000,
        })
    }

    pub fn source(&self) -> &SourceId {
        &self.source
    }

    /// Answer one candidate request. Pure and deterministic.
    pub fn handle(&self, request: &CandidateRequest) -> Result<CandidateResponse> {
        if request.protocol_version != wire::PROTOCOL_VERSION {
            return Err(Error::Service(format!(
                "unsupported protocol version {} (this specialist speaks {})",
                request.protocol_version,
                wire::PROTOCOL_VERSION
            )));
        }
        if request.beam == 0 {
            return Err(Error::Service("beam must be at least 1".into()));
        }
        let k = request.retrieval_k.min(self.retrieval_k_cap);
        let context = self.index.retrieve(&request.question, k);
        let reader_request = ReaderRequest {
            question_id: &request.question_id,
            question: &request.question,
            source: &self.source,
            context: &context,
            beam: request.beam,
        };
        let mut candidates = self.reader.candidates(&reader_request)?;
        candidates.truncate(request.beam as usize);
        Ok(CandidateResponse {
            protocol_version: wire::PROTOCOL_VERSION,
            source: self.source.clone(),
            candidates: candidates
                .into_iter()
                .map(|c| WireCandidate {
                    answer: c.answer,
                    score: c.score,
                })
                .collect(),
            context_passage_ids: context.passage_ids(),
        })
    }

    /// Serve on `addr` (port 0 for ephemeral) until the handle drops.
    pub fn serve(self, addr: &str) -> Result<ServerHandle> {
        let service = Arc::new(self);
        let handler: Handler =
            Arc::new(
                move |req: &HttpRequest| match (req.method.as_str(), req.path.as_str()) {
                    ("POST", "/v1/candidates") => {
                        match serde_json::from_str::<CandidateRequest>(&req.body) {
                            Ok(request) => match service.handle(&request) {
                                Ok(response) => HttpResponse::json(
                                    200,
                                    serde_json::to_string(&response).expect("response serializes"),
                                ),
                                Err(e @ Error::Service(_)) => HttpResponse::json(
                                    400,
                                    ErrorBody::new("bad_request", e.to_string()).to_json(),
                                ),
                                Err(e) => HttpResponse::json(
                                    500,
                                    ErrorBody::new("internal", e.to_string()).to_json(),
                                ),
                            },
                            Err(e) => HttpResponse::json(
                                400,
                                ErrorBody::new("malformed_request", e.to_string()).to_json(),
                            ),
                        }
                    }
                    ("GET", "/v1/health") => HttpResponse::json(
                        200,
                        format!(
                            "{{\"status\":\"ok\",\"source\":{}}}",
                            serde_json::to_string(service.source.as_str()).unwrap()
                        ),
                    ),
                    ("POST" | "GET", _) => HttpResponse::json(
                        404,
                        ErrorBody::new("not_found", req.path.clone()).to_json(),
                    ),
                    _ => HttpResponse::json(
                        405,
                        ErrorBody::new("method_not_allowed", req.method.clone()).to_json(),
                    ),
                },
            );
        http::spawn_server(addr, handler)
    }
}

/// The gather-side outcome for one source, indexed by chain position.
pub type SourceOutcome = (usize, std::result::Result<CandidateResponse, String>);

/// Fans questions out to specialist endpoints and judges the gathered
/// pool. Holds the chain's corpora for unified retrieval and for
/// re-scoring candidates under their specialist contexts.
pub struct Coordinator {
    chain: Vec<SourceId>,
    endpoints: BTreeMap<SourceId, String>,
    profiles: Vec<SpecialistProfile>,
    unified_index: Index,
    passages_by_id: HashMap<String, Passage>,
    config: EngineConfig,
    net: NetConfig,
}

impl Coordinator {
    pub fn new(
        chain: &[SourceId],
        corpora: &BTreeMap<SourceId, Corpus>,
        profiles: &BTreeMap<SourceId, SpecialistProfile>,
        endpoints: BTreeMap<SourceId, String>,
        config: EngineConfig,
        net: NetConfig,
    ) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::Config(
                "chain must contain at least one source".into(),
            ));
        }
        for source in chain {
            if !endpoints.contains_key(source) {
                return Err(Error::Config(format!("source `{source}` has no endpoint")));
            }
            if !corpora.contains_key(source) {
                return Err(Error::Config(format!("source `{source}` has no corpus")));
            }
            if !profiles.contains_key(source) {
                return Err(Error::Config(format!("source `{source}` has no profile")));
            }
        }
        let unified_index = build_index(chain.iter().map(|s| &corpora[s]))?;
        let passages_by_id = chain
            .iter()
            .flat_map(|s| corpora[s].passages().iter())
            .map(|p| (p.id.clone(), p.clone()))
            .collect();
        Ok(Coordinator {
            chain: chain.to_vec(),
            endpoints,
            profiles: chain.iter().map(|s| profiles[s].clone()).collect(),
            unified_index,
            passages_by_id,
            config,
            net,
        })
    }

    /// Convenience constructor reusing a deployment's corpora and profiles.
    pub fn from_deployment(
        deployment: &Deployment,
        chain: &[SourceId],
        endpoints: BTreeMap<SourceId, String>,
        net: NetConfig,
    ) -> Result<Self> {
        Coordinator::new(
            chain,
            &deployment.corpora,
            &deployment.profiles,
            endpoints,
            deployment.config.clone(),
            net,
        )
    }

    pub fn chain(&self) -> &[SourceId] {
        &self.chain
    }

    fn allocation(&self) -> Result<BudgetAllocation> {
        match &self.config.allocation_override {
            Some(alloc) => Ok(alloc.restricted_to(&self.chain)),
            None => crate::specialist::allocate_budget(&self.profiles, self.config.budget),
        }
    }

    fn request_for(
        &self,
        source: &SourceId,
        allocation: &BudgetAllocation,
        question_id: &str,
        question: &str,
    ) -> Result<CandidateRequest> {
        let beam = allocation
            .beam_for(source)
            .ok_or_else(|| Error::Config(format!("no beam allocated for `{source}`")))?;
        let beam = self
            .config
            .beam_cap
            .map_or(beam, |cap| beam.min(cap.max(1)));
        let retrieval_k = self
            .config
            .specialist_k
            .get(source)
            .copied()
            .unwrap_or(self.config.unified_k);
        Ok(CandidateRequest {
            protocol_version: wire::PROTOCOL_VERSION,
            question_id: question_id.to_string(),
            question: question.to_string(),
            beam,
            retrieval_k,
        })
    }

    /// Fan out to every source, bounded by `max_in_flight`; outcomes come
    /// back in arrival order.
    fn gather(
        &self,
        question_id: &str,
        question: &str,
        allocation: &BudgetAllocation,
    ) -> Result<Vec<SourceOutcome>> {
        let mut outcomes = Vec::with_capacity(self.chain.len());
        let chunk = self.net.max_in_flight.max(1);
        for batch in self.chain.chunks(chunk) {
            let (tx, rx) = mpsc::channel();
            std::thread::scope(|scope| -> Result<()> {
                for source in batch {
                    let position = self
                        .chain
                        .iter()
                        .position(|s| s == source)
                        .expect("source comes from the chain");
                    let request = self.request_for(source, allocation, question_id, question)?;
                    let endpoint = self.endpoints[source].clone();
                    let tx = tx.clone();
                    let timeout = self.net.timeout();
                    let retries = self.net.retries;
                    scope.spawn(move || {
                        let outcome = fetch_candidates(&endpoint, &request, timeout, retries);
                        let _ = tx.send((position, outcome));
                    });
                }
                Ok(())
            })?;
            drop(tx);
            outcomes.extend(rx.iter());
        }
        Ok(outcomes)
    }

    /// Deterministic post-gather reduction: validate responses, rebuild the
    /// pool and specialist contexts in chain order, and judge. Public so
    /// arrival-order independence is directly testable.
    pub fn select_from_outcomes(
        &self,
        question: &str,
        allocation: &BudgetAllocation,
        mut outcomes: Vec<SourceOutcome>,
    ) -> Result<SelectionResult> {
        outcomes.sort_by_key(|(position, _)| *position);

        let mut pool: Vec<CandidateAnswer> = Vec::new();
        let mut contexts: BTreeMap<SourceId, RetrievedContext> = BTreeMap::new();
        let mut failures: Vec<SourceFailure> = Vec::new();
        let lookup: HashMap<String, &Passage> = self
            .passages_by_id
            .iter()
            .map(|(id, p)| (id.clone(), p))
            .collect();

        for (position, outcome) in outcomes {
            let source = self
                .chain
                .get(position)
                .ok_or_else(|| Error::Service(format!("outcome for unknown position {position}")))?
                .clone();
            match outcome.and_then(|r| self.validate_response(&source, r, allocation)) {
                Ok(response) => {
                    let k = self
                        .config
                        .specialist_k
                        .get(&source)
                        .copied()
                        .unwrap_or(self.config.unified_k);
                    match context_from_ids(
                        &response.context_passage_ids,
                        &lookup,
                        k,
                        std::iter::once(source.clone()).collect(),
                    ) {
                        Ok(context) => {
                            contexts.insert(source.clone(), context);
                            for (i, candidate) in response.candidates.into_iter().enumerate() {
                                if candidate.answer.trim().is_empty() {
                                    continue;
                                }
                                pool.push(CandidateAnswer::new(
                                    candidate.answer,
                                    source.clone(),
                                    (i + 1) as u32,
                                    candidate.score,
                                ));
                            }
                        }
                        Err(e) => failures.push(SourceFailure {
                            source,
                            stage: "context".into(),
                            message: e.to_string(),
                        }),
                    }
                }
                Err(message) => failures.push(SourceFailure {
                    source,
                    stage: "transport".into(),
                    message,
                }),
            }
        }

        if failures.len() == self.chain.len() {
            let causes = failures
                .iter()
                .map(|f| format!("{}: {}", f.source, f.message))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::AllSourcesFailed(causes));
        }

        if self.config.dedupe {
            pool = dedupe(&pool);
        }

        let unified_context = self.unified_index.retrieve(question, self.config.unified_k);
        let trace = Trace {
            allocation: Some(allocation.clone()),
            failures,
            ..Trace::default()
        };
        let scoring = self.config.scoring.clone();
        let question_owned = question.to_string();
        let factory = move |ctx: &RetrievedContext| -> Box<dyn TokenProbabilityModel> {
            Box::new(BigramModel::fit(&question_owned, ctx, &scoring))
        };
        judge_pool(
            &pool,
            &self.chain,
            &unified_context,
            &contexts,
            &factory,
            self.config.mode,
            trace,
        )
    }

    fn validate_response(
        &self,
        source: &SourceId,
        response: CandidateResponse,
        allocation: &BudgetAllocation,
    ) -> std::result::Result<CandidateResponse, String> {
        if response.protocol_version != wire::PROTOCOL_VERSION {
            return Err(format!(
                "unsupported protocol version {}",
                response.protocol_version
            ));
        }
        if &response.source != source {
            return Err(format!(
                "response source `{}` does not match `{source}`",
                response.source
            ));
        }
        let beam = allocation.beam_for(source).unwrap_or(0);
        let beam = self
            .config
            .beam_cap
            .map_or(beam, |cap| beam.min(cap.max(1)));
        if response.candidates.len() > beam as usize {
            return Err(format!(
                "{} candidates exceed the allocated beam {beam}",
                response.candidates.len()
            ));
        }
        let mut prev = f64::INFINITY;
        for c in &response.candidates {
            if !(0.0..=1.0).contains(&c.score) || c.score > prev {
                return Err("candidate scores must be non-increasing within [0, 1]".into());
            }
            prev = c.score;
        }
        Ok(response)
    }

    /// Answer a question over the wire: fan out, gather, judge.
    pub fn coordinate(&self, question_id: &str, question: &str) -> Result<SelectionResult> {
        if self.config.mode == SelectionMode::Oracle {
            return Err(Error::Config(
                "the coordinator cannot run the oracle judge".into(),
            ));
        }
        let allocation = self.allocation()?;
        let outcomes = self.gather(question_id, question, &allocation)?;
        self.select_from_outcomes(question, &allocation, outcomes)
    }

    /// Serve `POST /v1/answer` on `addr` until the handle drops.
    pub fn serve(self, addr: &str) -> Result<ServerHandle> {
        let coordinator = Arc::new(self);
        let handler: Handler =
            Arc::new(
                move |req: &HttpRequest| match (req.method.as_str(), req.path.as_str()) {
                    ("POST", "/v1/answer") => {
                        match serde_json::from_str::<AnswerRequest>(&req.body) {
                            Ok(request) => {
                                let qid = request
                                    .question_id
                                    .clone()
                                    .unwrap_or_else(|| "adhoc".into());
                                match coordinator.coordinate(&qid, &request.question) {
                                    Ok(result) => HttpResponse::json(
                                        200,
                                        serde_json::to_string(&result).expect("result serializes"),
                                    ),
                                    Err(e) => HttpResponse::json(
                                        500,
                                        ErrorBody::new("pipeline_error", e.to_string()).to_json(),
                                    ),
                                }
                            }
                            Err(e) => HttpResponse::json(
                                400,
                                ErrorBody::new("malformed_request", e.to_string()).to_json(),
                            ),
                        }
                    }
                    ("GET", "/v1/health") => HttpResponse::json(200, "{\"status\":\"ok\"}".into()),
                    _ => HttpResponse::json(
                        404,
                        ErrorBody::new("not_found", req.path.clone()).to_json(),
                    ),
                },
            );
        http::spawn_server(addr, handler)
    }
}

fn fetch_candidates(
    endpoint: &str,
    request: &CandidateRequest,
    timeout: Duration,
    retries: u32,
) -> std::result::Result<CandidateResponse, String> {
    let body = serde_json::to_string(request).map_err(|e| e.to_string())?;
    let (status, response_body) =
        http::post_json_with_retry(endpoint, "/v1/candidates", &body, timeout, retries)
            .map_err(|e| e.to_string())?;
    if status != 200 {
        let detail = serde_json::from_str::<ErrorBody>(&response_body)
            .map(|e| format!("{} ({})", e.message, e.code))
            .unwrap_or(response_body);
        return Err(format!("status {status}: {detail}"));
    }
    serde_json::from_str(&response_body).map_err(|e| format!("bad response body: {e}"))
}
