//! Fine-grained binary HashCash.
//!
//! Difficulty is counted in leading zero *bits* of the digest rather than
//! hex digits, so each step of `k` doubles the expected work. The server
//! issues the challenge (interactive mode); a client-minted stamp helper is
//! kept in [`stamp`] for completeness.

mod bench;
mod challenge;
mod solver;
pub mod stamp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha1::Sha1;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use bench::{benchmark, BenchRow, BenchTable};
pub use challenge::{generate_challenge, Challenge, Nonce, Solution, CHALLENGE_VERSION};
pub use solver::{solve, solve_with, Solved};

#[cfg(feature = "parallel")]
pub use solver::solve_parallel;

/// Upper bound accepted for a challenge's difficulty, the width of the
/// largest supported digest.
pub const MAX_BITS: u32 = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashcashError {
    #[error("resource {0:?} must be non-empty and must not contain ':'")]
    InvalidResource(String),
    #[error("difficulty {bits} exceeds the {max}-bit limit")]
    BitsOutOfRange { bits: u32, max: u32 },
    #[error("malformed challenge: {0}")]
    MalformedChallenge(String),
    #[error("malformed solution counter {0:?}")]
    MalformedSolution(String),
    #[error("no solution within {trials} trials")]
    SolveTimeout { trials: u64 },
    #[error("benchmark needs at least one repetition")]
    NoRepetitions,
    #[error("invalid bench table: {0}")]
    InvalidBenchTable(String),
    #[error("bench table I/O: {0}")]
    Io(String),
}

/// Digest used for puzzles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashAlg {
    #[default]
    Sha1,
    Sha256,
}

impl HashAlg {
    pub fn digest_len(self) -> usize {
        match self {
            HashAlg::Sha1 => 20,
            HashAlg::Sha256 => 32,
        }
    }

    pub fn max_bits(self) -> u32 {
        8 * self.digest_len() as u32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HashAlg::Sha1 => "sha1",
            HashAlg::Sha256 => "sha256",
        }
    }
}

impl fmt::Display for HashAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HashAlg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sha1" | "sha-1" => Ok(HashAlg::Sha1),
            "sha256" | "sha-256" => Ok(HashAlg::Sha256),
            other => Err(format!("unknown hash algorithm {other:?}")),
        }
    }
}

/// A digest of at most 32 bytes, stored inline.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DigestBytes {
    buf: [u8; 32],
    len: usize,
}

impl DigestBytes {
    pub fn from_slice(bytes: &[u8]) -> Self {
        assert!(bytes.len() <= 32, "digest longer than 32 bytes");
        let mut buf = [0u8; 32];
        buf[..bytes.len()].copy_from_slice(bytes);
        DigestBytes {
            buf,
            len: bytes.len(),
        }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf[..self.len]
    }
}

impl fmt::Debug for DigestBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.as_slice()))
    }
}

/// The hash behind puzzle verification. Abstracted so tests can count
/// digest computations.
pub trait PowHasher {
    fn hash(&self, data: &[u8]) -> DigestBytes;
}

impl PowHasher for HashAlg {
    fn hash(&self, data: &[u8]) -> DigestBytes {
        match self {
            HashAlg::Sha1 => DigestBytes::from_slice(&Sha1::digest(data)),
            HashAlg::Sha256 => DigestBytes::from_slice(&Sha256::digest(data)),
        }
    }
}

impl<H: PowHasher + ?Sized> PowHasher for &H {
    fn hash(&self, data: &[u8]) -> DigestBytes {
        (**self).hash(data)
    }
}

/// Consecutive zero bits from the most significant bit of the first byte.
pub fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut total = 0;
    for &b in digest {
        if b == 0 {
            total += 8;
        } else {
            return total + b.leading_zeros();
        }
    }
    total
}

/// Bytes fed to the hash: `<challenge>:<counter>`.
pub fn hash_input(challenge: &Challenge, solution: Solution) -> String {
    format!("{challenge}:{solution}")
}

/// Checks a solution with one digest computation.
pub fn verify(challenge: &Challenge, solution: Solution, alg: HashAlg) -> bool {
    verify_with(&alg, challenge, solution)
}

pub fn verify_with<H: PowHasher + ?Sized>(
    hasher: &H,
    challenge: &Challenge,
    solution: Solution,
) -> bool {
    let digest = hasher.hash(hash_input(challenge, solution).as_bytes());
    leading_zero_bits(digest.as_slice()) >= challenge.bits()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn leading_zero_examples() {
        assert_eq!(leading_zero_bits(&[0x00, 0xFF]), 8);
        assert_eq!(leading_zero_bits(&[0x0F]), 4);
        assert_eq!(leading_zero_bits(&[0x80]), 0);
        assert_eq!(leading_zero_bits(&[0x00, 0x00]), 16);
        assert_eq!(leading_zero_bits(&[0x00, 0x01]), 15);
    }

    #[test]
    fn digest_lengths() {
        assert_eq!(HashAlg::Sha1.hash(b"abc").as_slice().len(), 20);
        assert_eq!(HashAlg::Sha256.hash(b"abc").as_slice().len(), 32);
        assert_eq!(
            format!("{:?}", HashAlg::Sha1.hash(b"abc")),
            "a9993e364706816aba3e25717850c26c9cd0d89d"
        );
    }

    #[test]
    fn alg_parsing() {
        assert_eq!("SHA-256".parse::<HashAlg>(), Ok(HashAlg::Sha256));
        assert_eq!("sha1".parse::<HashAlg>(), Ok(HashAlg::Sha1));
        assert!("md5".parse::<HashAlg>().is_err());
    }

    struct Counting<'a>(&'a Cell<usize>);

    impl PowHasher for Counting<'_> {
        fn hash(&self, data: &[u8]) -> DigestBytes {
            self.0.set(self.0.get() + 1);
            HashAlg::Sha1.hash(data)
        }
    }

    #[test]
    fn verify_hashes_once() {
        let ch: Challenge = "1:8:0:alice:0123456789abcdef".parse().unwrap();
        let calls = Cell::new(0);
        let hasher = Counting(&calls);
        assert!(verify_with(&hasher, &ch, Solution::new(78)));
        assert_eq!(calls.get(), 1);
        assert!(!verify_with(&hasher, &ch, Solution::new(77)));
        assert_eq!(calls.get(), 2);
    }
}
