use std::io;
use std::ops::RangeInclusive;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{generate_challenge, solve, HashAlg, HashcashError};
use crate::exec::Exec;

/// Mean solve cost at one difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub bits: u32,
    pub mean_solve_seconds: f64,
    pub mean_trials: f64,
    pub repetitions: u32,
}

/// Solve time versus difficulty; rows strictly increasing in `bits`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchTable {
    rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn new(rows: Vec<BenchRow>) -> Result<Self, HashcashError> {
        for pair in rows.windows(2) {
            if pair[1].bits <= pair[0].bits {
                return Err(HashcashError::InvalidBenchTable(format!(
                    "bits not strictly increasing at {}",
                    pair[1].bits
                )));
            }
        }
        if let Some(r) = rows
            .iter()
            .find(|r| !(r.mean_solve_seconds > 0.0 && r.mean_trials > 0.0) || r.repetitions == 0)
        {
            return Err(HashcashError::InvalidBenchTable(format!(
                "non-positive measurement at bits {}",
                r.bits
            )));
        }
        Ok(BenchTable { rows })
    }

    pub fn rows(&self) -> &[BenchRow] {
        &self.rows
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), HashcashError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| HashcashError::Io(e.to_string()))?;
        }
        // Header still has to appear for an empty table.
        if self.rows.is_empty() {
            w.write_record(["bits", "mean_solve_seconds", "mean_trials", "repetitions"])
                .map_err(|e| HashcashError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| HashcashError::Io(e.to_string()))
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, HashcashError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(|e| HashcashError::Io(e.to_string()))?;
        if headers != vec!["bits", "mean_solve_seconds", "mean_trials", "repetitions"] {
            return Err(HashcashError::InvalidBenchTable(format!(
                "unexpected header {headers:?}"
            )));
        }
        let rows = r
            .deserialize()
            .collect::<Result<Vec<BenchRow>, _>>()
            .map_err(|e| HashcashError::InvalidBenchTable(e.to_string()))?;
        BenchTable::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), HashcashError> {
        let file = std::fs::File::create(path)
            .map_err(|e| HashcashError::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(file)
    }

    pub fn load(path: &Path) -> Result<Self, HashcashError> {
        let file = std::fs::File::open(path)
            .map_err(|e| HashcashError::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }
}

/// Solves `repetitions` fresh challenges per difficulty and records mean
/// wall time and mean trials. Challenge nonces come from a ChaCha stream
/// keyed by `(seed, bits, repetition)`, so trial counts are reproducible;
/// timings are not.
pub fn benchmark(
    bits: RangeInclusive<u32>,
    repetitions: u32,
    alg: HashAlg,
    seed: u64,
    exec: Exec,
) -> Result<BenchTable, HashcashError> {
    if repetitions == 0 {
        return Err(HashcashError::NoRepetitions);
    }
    let mut rows = Vec::new();
    for k in bits {
        let samples = exec.map_range(repetitions as usize, |rep| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream((u64::from(k) << 32) | rep as u64);
            let challenge = generate_challenge("bench", k, 0, &mut rng)?;
            let start = Instant::now();
            let solved = solve(&challenge, alg, None)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            Ok::<_, HashcashError>((secs, solved.trials))
        });
        let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = samples.len() as f64;
        rows.push(BenchRow {
            bits: k,
            mean_solve_seconds: samples.iter().map(|s| s.0).sum::<f64>() / n,
            mean_trials: samples.iter().map(|s| s.1 as f64).sum::<f64>() / n,
            repetitions,
        });
    }
    BenchTable::new(rows)
}
