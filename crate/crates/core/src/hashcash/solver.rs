use sha1::Sha1;
use sha2::{Digest, Sha256};

use super::{leading_zero_bits, Challenge, HashAlg, HashcashError, Solution};

/// A found solution and the number of counters tried to reach it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Solved {
    pub solution: Solution,
    pub trials: u64,
}

/// Scans counters in `[start, end)` in ascending order; returns the first hit.
fn scan<D: Digest>(prefix: &[u8], bits: u32, start: u64, end: u64) -> Option<u64> {
    let mut buf = Vec::with_capacity(prefix.len() + 20);
    buf.extend_from_slice(prefix);
    let mut fmt = itoa::Buffer::new();
    for counter in start..end {
        buf.truncate(prefix.len());
        buf.extend_from_slice(fmt.format(counter).as_bytes());
        if leading_zero_bits(&D::digest(&buf)) >= bits {
            return Some(counter);
        }
    }
    None
}

fn scan_alg(alg: HashAlg, prefix: &[u8], bits: u32, start: u64, end: u64) -> Option<u64> {
    match alg {
        HashAlg::Sha1 => scan::<Sha1>(prefix, bits, start, end),
        HashAlg::Sha256 => scan::<Sha256>(prefix, bits, start, end),
    }
}

fn prefix_of(challenge: &Challenge) -> Vec<u8> {
    format!("{challenge}:").into_bytes()
}

/// Deterministic solver: tries counters 0, 1, 2, ... and returns the
/// smallest valid one. `max_trials = None` searches the whole `u64` range.
pub fn solve(
    challenge: &Challenge,
    alg: HashAlg,
    max_trials: Option<u64>,
) -> Result<Solved, HashcashError> {
    if challenge.bits() > alg.max_bits() {
        return Err(HashcashError::BitsOutOfRange {
            bits: challenge.bits(),
            max: alg.max_bits(),
        });
    }
    let limit = max_trials.unwrap_or(u64::MAX);
    match scan_alg(alg, &prefix_of(challenge), challenge.bits(), 0, limit) {
        Some(counter) => Ok(Solved {
            solution: Solution::new(counter),
            trials: counter + 1,
        }),
        None => Err(HashcashError::SolveTimeout { trials: limit }),
    }
}

/// Solver over an arbitrary [`super::PowHasher`]; slower than [`solve`]
/// since it re-serializes the full input per trial.
pub fn solve_with<H: super::PowHasher + ?Sized>(
    hasher: &H,
    challenge: &Challenge,
    max_trials: Option<u64>,
) -> Result<Solved, HashcashError> {
    let limit = max_trials.unwrap_or(u64::MAX);
    for counter in 0..limit {
        let solution = Solution::new(counter);
        if super::verify_with(hasher, challenge, solution) {
            return Ok(Solved {
                solution,
                trials: counter + 1,
            });
        }
    }
    Err(HashcashError::SolveTimeout { trials: limit })
}

/// Multi-threaded search that still returns the smallest valid counter:
/// counters are scanned in windows of `threads * chunk`, each window split
/// across the pool, and the lowest hit of the first successful window wins.
/// `trials` reports the counter position, matching [`solve`].
#[cfg(feature = "parallel")]
pub fn solve_parallel(
    challenge: &Challenge,
    alg: HashAlg,
    max_trials: Option<u64>,
) -> Result<Solved, HashcashError> {
    use rayon::prelude::*;

    const CHUNK: u64 = 4096;
    if challenge.bits() > alg.max_bits() {
        return Err(HashcashError::BitsOutOfRange {
            bits: challenge.bits(),
            max: alg.max_bits(),
        });
    }
    let limit = max_trials.unwrap_or(u64::MAX);
    let prefix = prefix_of(challenge);
    let lanes = rayon::current_num_threads() as u64;
    let mut window_start = 0u64;
    while window_start < limit {
        let window_end = window_start.saturating_add(lanes * CHUNK).min(limit);
        let hit = (0..lanes)
            .into_par_iter()
            .filter_map(|lane| {
                let lo = window_start.saturating_add(lane * CHUNK);
                let hi = lo.saturating_add(CHUNK).min(window_end);
                (lo < hi)
                    .then(|| scan_alg(alg, &prefix, challenge.bits(), lo, hi))
                    .flatten()
            })
            .min();
        if let Some(counter) = hit {
            return Ok(Solved {
                solution: Solution::new(counter),
                trials: counter + 1,
            });
        }
        window_start = window_end;
    }
    Err(HashcashError::SolveTimeout { trials: limit })
}
