//! Non-interactive mode: the client picks its own challenge and sends the
//! whole stamp `<challenge>:<counter>`. The gateway never accepts these;
//! it always issues its own challenges.

use rand::{CryptoRng, Rng};

use super::{generate_challenge, solve, verify, Challenge, HashAlg, HashcashError, Solution};

pub fn mint<R: Rng + CryptoRng + ?Sized>(
    resource: &str,
    bits: u32,
    now: u64,
    alg: HashAlg,
    rng: &mut R,
) -> Result<String, HashcashError> {
    let challenge = generate_challenge(resource, bits, now, rng)?;
    let solved = solve(&challenge, alg, None)?;
    Ok(format!("{challenge}:{}", solved.solution))
}

/// Accepts a stamp bound to `resource` with at least `min_bits`, minted no
/// more than `max_age` seconds before `now`.
pub fn check(
    stamp: &str,
    resource: &str,
    min_bits: u32,
    now: u64,
    max_age: u64,
    alg: HashAlg,
) -> bool {
    let Some((challenge, counter)) = stamp.rsplit_once(':') else {
        return false;
    };
    let (Ok(challenge), Ok(solution)) = (challenge.parse::<Challenge>(), counter.parse::<Solution>())
    else {
        return false;
    };
    challenge.resource() == resource
        && challenge.bits() >= min_bits
        && challenge.timestamp() <= now
        && now - challenge.timestamp() <= max_age
        && verify(&challenge, solution, alg)
}
