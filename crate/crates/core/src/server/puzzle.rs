use std::sync::Arc;

use dashmap::DashMap;

use super::GatewayError;
use crate::hashcash::{verify, Challenge, HashAlg, Solution};

/// An issued challenge together with the batch it will release.
#[derive(Debug, Clone)]
pub struct Puzzle {
    pub challenge: Challenge,
    pub issued_at: u64,
    pub expires_at: u64,
    /// Dropped once the puzzle is consumed.
    pub batch: Option<Arc<Vec<Vec<f64>>>>,
}

impl Puzzle {
    pub fn consumed(&self) -> bool {
        self.batch.is_none()
    }
}

#[derive(Debug, Default)]
pub struct PuzzleStore {
    puzzles: DashMap<String, Puzzle>,
}

impl PuzzleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, id: String, puzzle: Puzzle) {
        self.puzzles.insert(id, puzzle);
    }

    pub fn get(&self, id: &str) -> Option<Puzzle> {
        self.puzzles.get(id).map(|p| p.clone())
    }

    pub fn len(&self) -> usize {
        self.puzzles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.puzzles.is_empty()
    }

    /// Checks and consumes under the entry lock, so two racing valid
    /// submissions release the batch once. Error precedence: unknown,
    /// replayed, expired, then invalid.
    pub fn redeem(
        &self,
        id: &str,
        solution: Solution,
        now: u64,
        alg: HashAlg,
    ) -> Result<Arc<Vec<Vec<f64>>>, GatewayError> {
        let mut puzzle = self.puzzles.get_mut(id).ok_or(GatewayError::UnknownPuzzle)?;
        if puzzle.consumed() {
            return Err(GatewayError::Replay);
        }
        if now >= puzzle.expires_at {
            return Err(GatewayError::Expired);
        }
        if !verify(&puzzle.challenge, solution, alg) {
            return Err(GatewayError::InvalidSolution);
        }
        Ok(puzzle.batch.take().expect("unconsumed puzzle holds its batch"))
    }

    /// Forgets puzzles that expired more than `grace` seconds ago; their
    /// ids then answer as unknown.
    pub fn purge_expired(&self, now: u64, grace: u64) -> usize {
        let before = self.puzzles.len();
        self.puzzles.retain(|_, p| p.expires_at.saturating_add(grace) > now);
        before - self.puzzles.len()
    }
}
