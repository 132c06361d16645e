//! Gateway logic: account each batch's leakage, issue a calibrated puzzle,
//! and release predictions only for a verified, unconsumed, unexpired one.

mod clock;
mod ledger;
mod puzzle;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::compose;
use crate::backend::BackendError;
use crate::calibration::{Calibrator, UserLedger};
use crate::estimator::LeakageEstimator;
use crate::exec::Exec;
use crate::hashcash::{generate_challenge, HashAlg, Solution};

pub use clock::{Clock, ManualClock, SystemClock};
pub use ledger::LedgerStore;
pub use puzzle::{Puzzle, PuzzleStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("batch of {size} exceeds the limit of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("unknown puzzle")]
    UnknownPuzzle,
    #[error("puzzle already consumed")]
    Replay,
    #[error("puzzle expired")]
    Expired,
    #[error("solution does not meet the difficulty")]
    InvalidSolution,
    #[error("snapshot {path}: {reason}")]
    Snapshot { path: String, reason: String },
    #[error("internal: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::BadRequest(_) => 400,
            GatewayError::BatchTooLarge { .. } => 413,
            GatewayError::UnknownPuzzle => 404,
            GatewayError::Replay => 409,
            GatewayError::Expired => 410,
            GatewayError::InvalidSolution => 422,
            GatewayError::Snapshot { .. } | GatewayError::Internal(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Difficulty from the user's cumulative ledger.
    #[default]
    Stateful,
    /// Difficulty from each query's own cost; immune to account splitting.
    Stateless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseKind {
    #[default]
    Labels,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: Mode,
    pub response: ResponseKind,
    pub max_batch: usize,
    pub puzzle_ttl_seconds: u64,
    pub hash_alg: HashAlg,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: Mode::Stateful,
            response: ResponseKind::Labels,
            max_batch: 1000,
            puzzle_ttl_seconds: 600,
            hash_alg: HashAlg::Sha1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleOffer {
    pub puzzle_id: String,
    pub challenge: String,
    pub bits: u32,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<Vec<f64>>>,
}

/// What one accepted batch did to the books.
#[derive(Debug, Clone, PartialEq)]
pub struct Issued {
    pub offer: PuzzleOffer,
    pub costs: Vec<f64>,
    pub ledger: UserLedger,
}

pub struct Gateway {
    estimator: LeakageEstimator,
    calibrator: Arc<Calibrator>,
    config: GatewayConfig,
    ledgers: LedgerStore,
    puzzles: PuzzleStore,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    exec: Exec,
    issued: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("users", &self.ledgers.len())
            .field("puzzles", &self.puzzles.len())
            .finish_non_exhaustive()
    }
}

const PURGE_EVERY: u64 = 1024;

impl Gateway {
    pub fn new(
        estimator: LeakageEstimator,
        calibrator: Arc<Calibrator>,
        config: GatewayConfig,
    ) -> Result<Self, GatewayError> {
        calibrator
            .validate()
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        if config.max_batch == 0 {
            return Err(GatewayError::Internal("max_batch must be positive".into()));
        }
        Ok(Gateway {
            estimator,
            calibrator,
            config,
            ledgers: LedgerStore::new(),
            puzzles: PuzzleStore::new(),
            clock: Arc::new(SystemClock),
            rng: Mutex::new(ChaCha20Rng::from_rng(&mut rand::rng())),
            exec: Exec::default(),
            issued: AtomicU64::new(0),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ledgers(mut self, ledgers: LedgerStore) -> Self {
        self.ledgers = ledgers;
        self
    }

    /// Fixed seed for puzzle ids and challenge nonces; for tests and
    /// simulations only.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Mutex::new(ChaCha20Rng::seed_from_u64(seed));
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn calibrator(&self) -> &Calibrator {
        &self.calibrator
    }

    pub fn estimator(&self) -> &LeakageEstimator {
        &self.estimator
    }

    pub fn ledgers(&self) -> &LedgerStore {
        &self.ledgers
    }

    pub fn puzzles(&self) -> &PuzzleStore {
        &self.puzzles
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn handle_query(&self, user_id: &str, queries: Vec<Vec<f64>>) -> Result<PuzzleOffer, GatewayError> {
        self.issue(user_id, queries).map(|i| i.offer)
    }

    /// `handle_query` that also reports per-query costs and the ledger
    /// right after this batch was added.
    pub fn issue(&self, user_id: &str, queries: Vec<Vec<f64>>) -> Result<Issued, GatewayError> {
        self.check_request(user_id, &queries)?;
        let costs = self
            .estimator
            .batch_costs(&queries, self.exec)
            .map_err(|e| match e {
                BackendError::Width { .. } | BackendError::UnknownQuery(_) => GatewayError::BadRequest(e.to_string()),
                other => GatewayError::Internal(other.to_string()),
            })?;
        let batch_cost = compose(&costs);
        let calibrator = &self.calibrator;
        let (bits, ledger) = self.ledgers.record(user_id, queries.len() as u64, batch_cost, |ledger| {
            let bits = match self.config.mode {
                Mode::Stateful => calibrator.difficulty(ledger),
                Mode::Stateless => {
                    let per_query: Vec<u32> =
                        costs.iter().map(|&c| calibrator.stateless_difficulty(c)).collect();
                    calibrator.combine_bits(&per_query)
                }
            };
            (bits, ledger.clone())
        });

        let now = self.clock.now();
        let (puzzle_id, challenge) = {
            let mut rng = self.rng.lock().unwrap_or_else(|p| p.into_inner());
            let id = hex::encode(rng.random::<[u8; 16]>());
            let challenge = generate_challenge(user_id, bits, now, &mut *rng)
                .map_err(|e| GatewayError::Internal(e.to_string()))?;
            (id, challenge)
        };
        let expires_at = now.saturating_add(self.config.puzzle_ttl_seconds);
        let offer = PuzzleOffer {
            puzzle_id: puzzle_id.clone(),
            challenge: challenge.to_string(),
            bits,
            expires_at,
        };
        self.puzzles.insert(
            puzzle_id,
            Puzzle {
                challenge,
                issued_at: now,
                expires_at,
                batch: Some(Arc::new(queries)),
            },
        );
        if self.issued.fetch_add(1, Ordering::Relaxed) % PURGE_EVERY == PURGE_EVERY - 1 {
            self.puzzles.purge_expired(now, self.config.puzzle_ttl_seconds);
        }
        Ok(Issued { offer, costs, ledger })
    }

    pub fn handle_solution(&self, puzzle_id: &str, solution: &str) -> Result<Predictions, GatewayError> {
        let solution: Solution = solution
            .parse()
            .map_err(|e: crate::hashcash::HashcashError| GatewayError::BadRequest(e.to_string()))?;
        let batch = self
            .puzzles
            .redeem(puzzle_id, solution, self.clock.now(), self.config.hash_alg)?;
        let backend = self.estimator.backend();
        let mut labels = Vec::with_capacity(batch.len());
        let mut probs = Vec::new();
        for query in batch.iter() {
            let p = backend
                .victim_predict(query)
                .map_err(|e| GatewayError::Internal(e.to_string()))?;
            labels.push(p.argmax());
            if self.config.response == ResponseKind::Logits {
                probs.push(p.into_inner());
            }
        }
        Ok(Predictions {
            labels,
            probs: (self.config.response == ResponseKind::Logits).then_some(probs),
        })
    }

    fn check_request(&self, user_id: &str, queries: &[Vec<f64>]) -> Result<(), GatewayError> {
        if user_id.is_empty() || user_id.contains(':') {
            return Err(GatewayError::BadRequest(
                "user_id must be non-empty and must not contain ':'".into(),
            ));
        }
        if queries.is_empty() {
            return Err(GatewayError::BadRequest("empty batch".into()));
        }
        if queries.len() > self.config.max_batch {
            return Err(GatewayError::BatchTooLarge {
                size: queries.len(),
                max: self.config.max_batch,
            });
        }
        let width = self.estimator.backend().input_width();
        for (i, q) in queries.iter().enumerate() {
            if q.len() != width {
                return Err(GatewayError::BadRequest(format!(
                    "query {i} has width {}, expected {width}",
                    q.len()
                )));
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(GatewayError::BadRequest(format!("query {i} has a non-finite value")));
            }
        }
        Ok(())
    }
}
