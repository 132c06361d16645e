//! Blocking client: submit a batch, solve the puzzle, collect predictions.

use std::time::{Duration, Instant};

use powgate_core::hashcash::{solve_parallel, verify, Challenge, HashAlg};
use powgate_core::server::{Predictions, PuzzleOffer};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{ErrorBody, QueryRequest, SolutionRequest};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("server answered {status}: {message}")]
    Server { status: u16, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("puzzle expired again after resubmitting")]
    Expired,
    /// The server rejected a solution this client had already verified.
    /// Client and server disagree about the hash; this is a bug.
    #[error("server rejected a locally verified solution: {0}")]
    Rejected(String),
}

/// Retries for connection failures only. A request that may have reached
/// the server (timeouts, HTTP errors) is never retried, because a repeated
/// query is charged again.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(2),
        }
    }
}

/// What one `query` call cost the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallReport {
    pub bits: u32,
    pub trials: u64,
    pub solve_seconds: f64,
    pub server_roundtrip_seconds: f64,
    /// The first puzzle expired before the solution arrived and the batch
    /// was sent again (and charged again).
    #[serde(default)]
    pub resubmitted: bool,
}

#[derive(Debug, Clone)]
pub struct ClientSession {
    endpoint: String,
    user_id: String,
    hash_alg: HashAlg,
    retry: RetryPolicy,
    http: Client,
}

struct Solved {
    puzzle_id: String,
    counter: String,
    bits: u32,
}

impl ClientSession {
    pub fn new(endpoint: impl Into<String>, user_id: impl Into<String>) -> Result<Self, ClientError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(ClientSession {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            user_id: user_id.into(),
            hash_alg: HashAlg::default(),
            retry: RetryPolicy::default(),
            http,
        })
    }

    pub fn with_hash_alg(mut self, alg: HashAlg) -> Self {
        self.hash_alg = alg;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    /// Sends one batch and returns the answers with a cost report. An
    /// expired puzzle triggers exactly one resubmission.
    pub fn query(&self, batch: &[Vec<f64>]) -> Result<(Predictions, CallReport), ClientError> {
        let mut report = CallReport {
            bits: 0,
            trials: 0,
            solve_seconds: 0.0,
            server_roundtrip_seconds: 0.0,
            resubmitted: false,
        };
        loop {
            let solved = self.request_and_solve(batch, &mut report)?;
            let body = SolutionRequest {
                puzzle_id: solved.puzzle_id,
                solution: solved.counter,
            };
            let resp = self.post("/v1/solution", &body, &mut report)?;
            match resp.status() {
                s if s.is_success() => {
                    let predictions: Predictions = resp
                        .json()
                        .map_err(|e| ClientError::Protocol(format!("bad predictions: {e}")))?;
                    if predictions.labels.len() != batch.len() {
                        return Err(ClientError::Protocol(format!(
                            "{} answers for {} queries",
                            predictions.labels.len(),
                            batch.len()
                        )));
                    }
                    return Ok((predictions, report));
                }
                StatusCode::GONE if !report.resubmitted => {
                    tracing::warn!(bits = solved.bits, "puzzle expired; resubmitting the batch once");
                    report.resubmitted = true;
                }
                StatusCode::GONE => return Err(ClientError::Expired),
                StatusCode::UNPROCESSABLE_ENTITY => return Err(ClientError::Rejected(error_message(resp))),
                status => {
                    return Err(ClientError::Server {
                        status: status.as_u16(),
                        message: error_message(resp),
                    })
                }
            }
        }
    }

    fn request_and_solve(&self, batch: &[Vec<f64>], report: &mut CallReport) -> Result<Solved, ClientError> {
        let body = QueryRequest {
            user_id: self.user_id.clone(),
            queries: batch.to_vec(),
        };
        let resp = self.post("/v1/query", &body, report)?;
        if !resp.status().is_success() {
            return Err(ClientError::Server {
                status: resp.status().as_u16(),
                message: error_message(resp),
            });
        }
        let offer: PuzzleOffer = resp
            .json()
            .map_err(|e| ClientError::Protocol(format!("bad puzzle offer: {e}")))?;
        let challenge: Challenge = offer
            .challenge
            .parse()
            .map_err(|e| ClientError::Protocol(format!("bad challenge {:?}: {e}", offer.challenge)))?;
        if challenge.bits() != offer.bits {
            return Err(ClientError::Protocol(format!(
                "offer says {} bits but the challenge has {}",
                offer.bits,
                challenge.bits()
            )));
        }

        let start = Instant::now();
        let solved = solve_parallel(&challenge, self.hash_alg, None).map_err(|e| ClientError::Protocol(e.to_string()))?;
        report.solve_seconds += start.elapsed().as_secs_f64();
        report.trials += solved.trials;
        report.bits = offer.bits;
        if !verify(&challenge, solved.solution, self.hash_alg) {
            return Err(ClientError::Protocol("solver produced a solution that does not verify".into()));
        }
        Ok(Solved {
            puzzle_id: offer.puzzle_id,
            counter: solved.solution.to_string(),
            bits: offer.bits,
        })
    }

    /// POST with transport-level retries; the wire time of the successful
    /// attempt is added to the report.
    fn post<B: Serialize>(&self, path: &str, body: &B, report: &mut CallReport) -> Result<Response, ClientError> {
        let url = format!("{}{path}", self.endpoint);
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 1;
        loop {
            let start = Instant::now();
            match self.http.post(&url).json(body).send() {
                Ok(resp) => {
                    report.server_roundtrip_seconds += start.elapsed().as_secs_f64();
                    return Ok(resp);
                }
                Err(e) if attempt < self.retry.max_attempts.max(1) && e.is_connect() => {
                    tracing::warn!(error = %e, attempt, "transport error; retrying");
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.retry.max_backoff);
                    attempt += 1;
                }
                Err(e) => return Err(ClientError::Transport(e.to_string())),
            }
        }
    }
}

fn error_message(resp: Response) -> String {
    let status = resp.status();
    match resp.json::<ErrorBody>() {
        Ok(body) => body.error,
        Err(_) => status.canonical_reason().unwrap_or("error").to_string(),
    }
}
