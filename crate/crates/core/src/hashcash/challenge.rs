use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, Rng};

use super::{HashcashError, MAX_BITS};

pub const CHALLENGE_VERSION: u32 = 1;

/// 64 random bits rendered as 16 lowercase hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce([u8; 8]);

impl Nonce {
    pub fn random<R: Rng + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 8];
        rng.fill(&mut bytes);
        Nonce(bytes)
    }

    pub fn from_bytes(bytes: [u8; 8]) -> Self {
        Nonce(bytes)
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for Nonce {
    type Err = HashcashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower_hex = s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !lower_hex {
            return Err(HashcashError::MalformedChallenge(format!(
                "nonce {s:?} is not 16 lowercase hex characters"
            )));
        }
        let mut bytes = [0u8; 8];
        hex::decode_to_slice(s, &mut bytes)
            .map_err(|e| HashcashError::MalformedChallenge(e.to_string()))?;
        Ok(Nonce(bytes))
    }
}

/// A server-issued puzzle, serialized as `1:<bits>:<timestamp>:<resource>:<nonce>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Challenge {
    bits: u32,
    timestamp: u64,
    resource: String,
    nonce: Nonce,
}

fn check_resource(resource: &str) -> Result<(), HashcashError> {
    if resource.is_empty() || resource.contains(':') {
        return Err(HashcashError::InvalidResource(resource.to_owned()));
    }
    Ok(())
}

fn check_bits(bits: u32) -> Result<(), HashcashError> {
    if bits > MAX_BITS {
        return Err(HashcashError::BitsOutOfRange {
            bits,
            max: MAX_BITS,
        });
    }
    Ok(())
}

impl Challenge {
    pub fn new(
        bits: u32,
        timestamp: u64,
        resource: impl Into<String>,
        nonce: Nonce,
    ) -> Result<Self, HashcashError> {
        let resource = resource.into();
        check_bits(bits)?;
        check_resource(&resource)?;
        Ok(Challenge {
            bits,
            timestamp,
            resource,
            nonce,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    pub fn resource(&self) -> &str {
        &self.resource
    }

    pub fn nonce(&self) -> Nonce {
        self.nonce
    }

    /// Same challenge with a different difficulty label.
    pub fn with_bits(&self, bits: u32) -> Result<Self, HashcashError> {
        check_bits(bits)?;
        Ok(Challenge {
            bits,
            ..self.clone()
        })
    }
}

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{CHALLENGE_VERSION}:{}:{}:{}:{}",
            self.bits, self.timestamp, self.resource, self.nonce
        )
    }
}

/// Canonical ASCII decimal: digits only, no sign, no leading zeros.
fn parse_canonical_u64(s: &str) -> Option<u64> {
    let canonical = !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_digit())
        && (s == "0" || !s.starts_with('0'));
    if canonical {
        s.parse().ok()
    } else {
        None
    }
}

impl FromStr for Challenge {
    type Err = HashcashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = |why: &str| HashcashError::MalformedChallenge(format!("{why} in {s:?}"));
        let fields: Vec<&str> = s.split(':').collect();
        if fields.len() != 5 {
            return Err(malformed("expected 5 ':'-separated fields"));
        }
        match parse_canonical_u64(fields[0]) {
            Some(v) if v == u64::from(CHALLENGE_VERSION) => {}
            _ => return Err(malformed("unsupported version")),
        }
        let bits = parse_canonical_u64(fields[1])
            .and_then(|b| u32::try_from(b).ok())
            .ok_or_else(|| malformed("bad bits field"))?;
        let timestamp = parse_canonical_u64(fields[2]).ok_or_else(|| malformed("bad timestamp"))?;
        let nonce = fields[4].parse()?;
        Challenge::new(bits, timestamp, fields[3], nonce)
    }
}

/// Builds a fresh challenge for `user_id` with a nonce drawn from `rng`.
pub fn generate_challenge<R: Rng + CryptoRng + ?Sized>(
    user_id: &str,
    bits: u32,
    now: u64,
    rng: &mut R,
) -> Result<Challenge, HashcashError> {
    check_resource(user_id)?;
    check_bits(bits)?;
    Challenge::new(bits, now, user_id, Nonce::random(rng))
}

/// Counter appended to a challenge, in ASCII decimal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Solution(u64);

impl Solution {
    pub fn new(counter: u64) -> Self {
        Solution(counter)
    }

    pub fn counter(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Solution {
    type Err = HashcashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_canonical_u64(s)
            .map(Solution)
            .ok_or_else(|| HashcashError::MalformedSolution(s.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn generated_format() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ch = generate_challenge("alice", 8, 0, &mut rng).unwrap();
        let s = ch.to_string();
        assert!(s.starts_with("1:8:0:alice:"), "{s}");
        let nonce = s.rsplit(':').next().unwrap();
        assert_eq!(nonce.len(), 16);
        assert!(nonce.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()));
        assert_eq!(s.parse::<Challenge>().unwrap(), ch);
    }

    #[test]
    fn generation_is_deterministic_per_rng_state() {
        let a = generate_challenge("u", 3, 9, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = generate_challenge("u", 3, 9, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let c = generate_challenge("u", 3, 9, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.nonce(), c.nonce());
    }

    #[test]
    fn rejects_separator_in_user() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            generate_challenge("a:b", 8, 0, &mut rng),
            Err(HashcashError::InvalidResource(_))
        ));
        assert!(generate_challenge("", 8, 0, &mut rng).is_err());
        assert!(generate_challenge("a", MAX_BITS + 1, 0, &mut rng).is_err());
    }

    #[test]
    fn parse_rejects_noncanonical() {
        for bad in [
            "1:8:0:alice:0123456789ABCDEF",
            "1:08:0:alice:0123456789abcdef",
            "2:8:0:alice:0123456789abcdef",
            "1: 8:0:alice:0123456789abcdef",
            "1:8:0:alice:0123456789abcde",
            "1:8:0::0123456789abcdef",
            "1:8:0:al:ice:0123456789abcdef",
            "1:-8:0:alice:0123456789abcdef",
        ] {
            assert!(bad.parse::<Challenge>().is_err(), "{bad}");
        }
    }

    #[test]
    fn solution_parsing() {
        assert_eq!("0".parse::<Solution>().unwrap(), Solution::new(0));
        assert_eq!("120".parse::<Solution>().unwrap().counter(), 120);
        for bad in ["", "01", "+1", "-1", "1a", " 1", "18446744073709551616"] {
            assert!(bad.parse::<Solution>().is_err(), "{bad}");
        }
    }
}
